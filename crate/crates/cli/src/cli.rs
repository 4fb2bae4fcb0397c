//! Argument parsing and dispatch for the `homcar` binary.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use homcar::inference::McmcConfig;

use crate::commands::{experiment, fit, metrics, simulate, variance_profile};
use crate::config::{load_config, parse_override, ModelName, PriorConfig};
use crate::error::{CliResult, Outcome, EXIT_OK};
use crate::graph_input::GraphSource;

#[derive(Debug, Parser)]
#[command(name = "homcar", version, about = "ICAR and HomCAR variance studies and BYM model comparisons")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Marginal prior variances of the ICAR (and optionally HomCAR) structure.
    VarianceProfile(VarianceProfileCmd),
    /// Simulate replicate data sets from the configured scenario.
    Simulate(ConfigCmd),
    /// Fit one BYM-type model to a counts file.
    Fit(FitCmd),
    /// Simulate, fit every model to every replicate and aggregate.
    Experiment(ExperimentCmd),
    /// Recompute the aggregate files of an existing experiment directory.
    Metrics(MetricsCmd),
}

#[derive(Debug, Clone, Args)]
pub struct GraphArgs {
    /// Built-in lattice `RxC` with unit spacing.
    #[arg(long, value_name = "RxC", conflicts_with_all = ["edges", "nodes"])]
    pub lattice: Option<String>,
    /// Edge list CSV (`from,to`).
    #[arg(long, value_name = "FILE")]
    pub edges: Option<PathBuf>,
    /// Node table CSV (`unit_id[,x,y][,expected]`).
    #[arg(long, value_name = "FILE")]
    pub nodes: Option<PathBuf>,
}

impl GraphArgs {
    fn is_set(&self) -> bool {
        self.lattice.is_some() || self.edges.is_some() || self.nodes.is_some()
    }

    fn source(&self) -> GraphSource {
        GraphSource {
            lattice: self.lattice.clone(),
            edges: self.edges.clone(),
            nodes: self.nodes.clone(),
        }
    }
}

#[derive(Debug, Args)]
pub struct VarianceProfileCmd {
    #[command(flatten)]
    pub graph: GraphArgs,
    /// Precision the structure matrix is scaled by.
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    /// Also profile the HomCAR structure matrix.
    #[arg(long)]
    pub homcar: bool,
    #[arg(long, default_value = "out/variance-profile")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConfigCmd {
    /// TOML config file.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set scenario.replicates=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(flatten)]
    pub graph: GraphArgs,
    /// Number of replicate data sets.
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Base seed of the scenario.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Experiment name (output subdirectory).
    #[arg(long)]
    pub name: Option<String>,
    /// Output root directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExperimentCmd {
    #[command(flatten)]
    pub common: ConfigCmd,
    /// Worker pool size.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Only run these replicate indices. Repeatable.
    #[arg(long = "replicate", value_name = "INDEX")]
    pub replicates_only: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct McmcArgs {
    #[arg(long, default_value_t = McmcConfig::default().chains)]
    pub chains: usize,
    #[arg(long, default_value_t = McmcConfig::default().burn_in)]
    pub burn_in: usize,
    /// Post-burn-in iterations per chain, before thinning.
    #[arg(long, default_value_t = McmcConfig::default().samples_per_chain)]
    pub samples: usize,
    #[arg(long, default_value_t = McmcConfig::default().thinning)]
    pub thinning: usize,
    #[arg(long, default_value_t = McmcConfig::default().seed)]
    pub seed: u64,
    /// Target Metropolis acceptance rate during burn-in.
    #[arg(long, default_value_t = McmcConfig::default().adaptation_target)]
    pub adaptation_target: f64,
}

#[derive(Debug, Args)]
pub struct PriorArgs {
    #[arg(long, default_value_t = PriorConfig::default().tau_u_shape)]
    pub tau_u_shape: f64,
    #[arg(long, default_value_t = PriorConfig::default().tau_u_rate)]
    pub tau_u_rate: f64,
    #[arg(long, default_value_t = PriorConfig::default().tau_v_shape)]
    pub tau_v_shape: f64,
    #[arg(long, default_value_t = PriorConfig::default().tau_v_rate)]
    pub tau_v_rate: f64,
}

#[derive(Debug, Args)]
pub struct FitCmd {
    #[command(flatten)]
    pub graph: GraphArgs,
    /// Counts CSV (`unit_id,count[,expected]`).
    #[arg(long, value_name = "FILE")]
    pub counts: PathBuf,
    #[arg(long, value_enum, default_value = "bym")]
    pub model: ModelArg,
    /// Expected count for every unit when the inputs carry none.
    #[arg(long)]
    pub expected: Option<f64>,
    #[command(flatten)]
    pub mcmc: McmcArgs,
    #[command(flatten)]
    pub priors: PriorArgs,
    #[arg(long, default_value = "out/fit")]
    pub out: PathBuf,
    /// Also write every retained draw.
    #[arg(long)]
    pub write_draws: bool,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum ModelArg {
    Bym,
    Homcar,
}

impl From<ModelArg> for ModelName {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Bym => ModelName::Bym,
            ModelArg::Homcar => ModelName::Homcar,
        }
    }
}

#[derive(Debug, Args)]
pub struct MetricsCmd {
    /// Directory written by `experiment`.
    #[arg(long, value_name = "DIR")]
    pub experiment: PathBuf,
    /// Defaults to `<experiment>/metrics`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn path_value(p: &std::path::Path) -> toml::Value {
    toml::Value::String(p.display().to_string())
}

/// `--set` overrides first, then dedicated flags, so flags win.
fn overrides(cmd: &ConfigCmd) -> CliResult<Vec<(String, toml::Value)>> {
    let mut out = cmd.overrides.iter().map(|s| parse_override(s)).collect::<CliResult<Vec<_>>>()?;
    if cmd.graph.is_set() {
        // A graph given on the command line replaces the configured one.
        out.push(("graph".into(), toml::Value::Table(toml::Table::new())));
        if let Some(l) = &cmd.graph.lattice {
            out.push(("graph.lattice".into(), toml::Value::String(l.clone())));
        }
        if let Some(e) = &cmd.graph.edges {
            out.push(("graph.edges".into(), path_value(e)));
        }
        if let Some(n) = &cmd.graph.nodes {
            out.push(("graph.nodes".into(), path_value(n)));
        }
    }
    if let Some(j) = cmd.replicates {
        out.push(("scenario.replicates".into(), toml::Value::Integer(j as i64)));
    }
    if let Some(s) = cmd.seed {
        let v = i64::try_from(s).map_err(|_| crate::error::CliError::Input(format!("seed {s} is too large")))?;
        out.push(("scenario.base_seed".into(), toml::Value::Integer(v)));
    }
    if let Some(n) = &cmd.name {
        out.push(("name".into(), toml::Value::String(n.clone())));
    }
    if let Some(o) = &cmd.out {
        out.push(("output_dir".into(), path_value(o)));
    }
    Ok(out)
}

fn report(outcome: &Outcome) -> i32 {
    match outcome {
        Outcome::Success => {}
        Outcome::ConvergenceWarning(m) => eprintln!("warning: {m}"),
        Outcome::PartialFailure(m) => eprintln!("error: {m}"),
    }
    outcome.exit_code()
}

fn dispatch(cli: Cli) -> CliResult<i32> {
    match cli.command {
        Command::VarianceProfile(c) => {
            let args = variance_profile::VarianceProfileArgs {
                graph: c.graph.source(),
                tau: c.tau,
                homcar: c.homcar,
                out: c.out,
            };
            let r = variance_profile::run(&args)?;
            println!("icar ratio {}", r.icar.summary.max_min_ratio);
            if let Some(h) = &r.homcar {
                println!("homcar ratio {}", h.summary.max_min_ratio);
            }
            Ok(EXIT_OK)
        }
        Command::Simulate(c) => {
            let (cfg, inputs) = load_config(c.config.as_deref(), &overrides(&c)?)?;
            let reps = simulate::run(&cfg, inputs)?;
            println!("wrote {} replicates to {}", reps.len(), cfg.experiment_dir().display());
            Ok(EXIT_OK)
        }
        Command::Fit(c) => {
            let args = fit::FitArgs {
                graph: c.graph.source(),
                counts: c.counts,
                model: c.model.into(),
                expected: c.expected,
                mcmc: McmcConfig {
                    chains: c.mcmc.chains,
                    burn_in: c.mcmc.burn_in,
                    samples_per_chain: c.mcmc.samples,
                    thinning: c.mcmc.thinning,
                    seed: c.mcmc.seed,
                    adaptation_target: c.mcmc.adaptation_target,
                },
                priors: PriorConfig {
                    tau_u_shape: c.priors.tau_u_shape,
                    tau_u_rate: c.priors.tau_u_rate,
                    tau_v_shape: c.priors.tau_v_shape,
                    tau_v_rate: c.priors.tau_v_rate,
                },
                out: c.out,
                write_draws: c.write_draws,
            };
            let (_, outcome) = fit::run(&args)?;
            Ok(report(&outcome))
        }
        Command::Experiment(c) => {
            let mut ov = overrides(&c.common)?;
            if let Some(j) = c.jobs {
                ov.push(("jobs".into(), toml::Value::Integer(j as i64)));
            }
            if !c.replicates_only.is_empty() {
                let list = c.replicates_only.iter().map(|&r| toml::Value::Integer(r as i64)).collect();
                ov.push(("only_replicates".into(), toml::Value::Array(list)));
            }
            let (cfg, inputs) = load_config(c.common.config.as_deref(), &ov)?;
            let run = experiment::run(&cfg, inputs)?;
            println!("wrote {}", run.dir.display());
            Ok(report(&run.outcome))
        }
        Command::Metrics(c) => {
            let args = metrics::MetricsArgs { experiment: c.experiment, out: c.out };
            let summary = metrics::run(&args)?;
            if summary.complete {
                Ok(EXIT_OK)
            } else {
                Ok(report(&Outcome::PartialFailure("experiment is incomplete".into())))
            }
        }
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { crate::error::EXIT_INPUT } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
