fn main() {
    std::process::exit(homcar_cli::cli::run(std::env::args_os()));
}
