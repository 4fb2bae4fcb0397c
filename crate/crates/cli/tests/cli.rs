use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use homcar::car::{build_homcar, build_icar};
use homcar::graph::parse_graph;
use homcar::inference::{brute_force_posterior, BymModelSpec, QuadratureGrid};
use homcar_cli::error::{EXIT_CONVERGENCE, EXIT_INPUT, EXIT_OK};
use tempfile::TempDir;

fn homcar(dir: &Path, args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_homcar"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs");
    (
        out.status.code().expect("exit code"),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn read(p: impl AsRef<Path>) -> String {
    fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

/// `(unit_id, value)` pairs from a variance CSV, skipping `#` lines.
fn variance_rows(text: &str) -> Vec<(String, f64)> {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| {
            let (id, v) = l.split_once(',').unwrap();
            (id.to_string(), v.parse().unwrap())
        })
        .collect()
}

#[test]
fn variance_profile_three_unit_path() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "p3.csv", "a,b\nb,c\n");
    let (code, _, err) = homcar(tmp.path(), &["variance-profile", "--edges", "p3.csv", "--homcar", "--out", "vp"]);
    assert_eq!(code, EXIT_OK, "{err}");
    let icar = variance_rows(&read(tmp.path().join("vp/icar_variances.csv")));
    let expected = [("a", 5.0 / 9.0), ("b", 2.0 / 9.0), ("c", 5.0 / 9.0)];
    for ((id, v), (eid, ev)) in icar.iter().zip(expected) {
        assert_eq!(id, eid);
        assert!((v - ev).abs() < 1e-12);
    }
    let summary: serde_json::Value = serde_json::from_str(&read(tmp.path().join("vp/variance_summary.json"))).unwrap();
    assert!((summary["icar"]["max_min_ratio"].as_f64().unwrap() - 2.5).abs() < 1e-12);
    // Moore-Penrose diagonal of Q* on P3 is (53/45, 4/9, 53/45).
    let hom = variance_rows(&read(tmp.path().join("vp/homcar_variances.csv")));
    for ((_, v), e) in hom.iter().zip([53.0 / 45.0, 4.0 / 9.0, 53.0 / 45.0]) {
        assert!((v - e).abs() < 1e-12);
    }
    assert!((summary["homcar"]["max_min_ratio"].as_f64().unwrap() - 53.0 / 20.0).abs() < 1e-12);

    let manifest: serde_json::Value = serde_json::from_str(&read(tmp.path().join("vp/manifest.json"))).unwrap();
    assert_eq!(manifest["command"], "variance-profile");
    assert_eq!(manifest["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 3);
}

#[test]
fn variance_profile_two_units_is_flat() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "pair.csv", "a,b\n");
    let (code, _, err) = homcar(tmp.path(), &["variance-profile", "--edges", "pair.csv", "--homcar", "--out", "vp"]);
    assert_eq!(code, EXIT_OK, "{err}");
    let summary: serde_json::Value = serde_json::from_str(&read(tmp.path().join("vp/variance_summary.json"))).unwrap();
    for kind in ["icar", "homcar"] {
        assert!((summary[kind]["max_min_ratio"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn variance_profile_rejects_missing_graph() {
    let tmp = TempDir::new().unwrap();
    let (code, _, _) = homcar(tmp.path(), &["variance-profile", "--edges", "missing.csv"]);
    assert_eq!(code, EXIT_INPUT);
    let (code, _, _) = homcar(tmp.path(), &["variance-profile"]);
    assert_eq!(code, EXIT_INPUT);
}

#[test]
fn simulate_shape_and_determinism() {
    let tmp = TempDir::new().unwrap();
    let args = ["simulate", "--lattice", "15x15", "--replicates", "3", "--name", "s", "--out", "o"];
    let (code, _, err) = homcar(tmp.path(), &args);
    assert_eq!(code, EXIT_OK, "{err}");
    let root = tmp.path().join("o/s");
    let mut reps: Vec<String> = fs::read_dir(root.join("replicates"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    reps.sort();
    assert_eq!(reps, ["rep_000.csv", "rep_001.csv", "rep_002.csv"]);
    assert_eq!(read(root.join("replicates/rep_000.csv")).lines().count(), 226);

    let scenario: serde_json::Value = serde_json::from_str(&read(root.join("scenario.json"))).unwrap();
    assert!(scenario["delta"].as_f64().unwrap() > 0.0);
    assert_eq!(scenario["replicate_seeds"].as_array().unwrap().len(), 3);

    let files = ["replicates/rep_000.csv", "replicates/rep_002.csv", "scenario.json", "manifest.json", "graph/edges.csv"];
    let before: Vec<String> = files.iter().map(|f| read(root.join(f))).collect();
    let (code, _, _) = homcar(tmp.path(), &args);
    assert_eq!(code, EXIT_OK);
    for (f, b) in files.iter().zip(&before) {
        assert_eq!(&read(root.join(f)), b, "{f} changed on rerun");
    }
}

#[test]
fn simulate_rejects_zero_replicates_and_missing_centroids() {
    let tmp = TempDir::new().unwrap();
    let (code, _, err) = homcar(tmp.path(), &["simulate", "--lattice", "4x4", "--replicates", "0", "--out", "o"]);
    assert_eq!(code, EXIT_INPUT);
    assert!(err.contains("replicates"), "{err}");
    write(tmp.path(), "e.csv", "a,b\nb,c\n");
    let (code, _, _) = homcar(tmp.path(), &["simulate", "--edges", "e.csv", "--out", "o"]);
    assert_eq!(code, EXIT_INPUT);
}

#[test]
fn config_file_and_flag_precedence() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        tmp.path(),
        "exp.toml",
        "name = \"fromfile\"\noutput_dir = \"o\"\n[graph]\nlattice = \"3x3\"\n[scenario]\nreplicates = 4\nbase_seed = 9\n",
    );
    let (code, _, err) = homcar(
        tmp.path(),
        &["simulate", "--config", "exp.toml", "--set", "scenario.replicates=5", "--replicates", "2"],
    );
    assert_eq!(code, EXIT_OK, "{err}");
    let root = tmp.path().join("o/fromfile");
    let manifest: serde_json::Value = serde_json::from_str(&read(root.join("manifest.json"))).unwrap();
    assert_eq!(manifest["parameters"]["scenario"]["replicates"], 2);
    assert_eq!(manifest["parameters"]["scenario"]["base_seed"], 9);
    let sha = homcar_cli::io::sha256_hex(read(&cfg).as_bytes());
    assert_eq!(manifest["inputs"][0]["sha256"], sha.as_str());
    let (code, _, _) = homcar(tmp.path(), &["simulate", "--config", "exp.toml", "--set", "scenario.bogus=1"]);
    assert_eq!(code, EXIT_INPUT);
}

const CYCLE: &str = "a,b\nb,c\nc,d\nd,a\n";
const CYCLE_COUNTS: &str = "unit_id,count,expected\na,2,5\nb,7,5\nc,4,5\nd,5,5\n";

#[test]
fn fit_matches_quadrature_oracle() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "g.csv", CYCLE);
    write(tmp.path(), "counts.csv", CYCLE_COUNTS);
    let graph = parse_graph(CYCLE, None).unwrap();
    for (model, q) in [("bym", build_icar(graph.clone()).unwrap()), ("homcar", build_homcar(graph.clone()).unwrap())] {
        let out = format!("fit_{model}");
        let (code, _, err) = homcar(
            tmp.path(),
            &[
                "fit", "--edges", "g.csv", "--counts", "counts.csv", "--model", model, "--samples", "60000", "--seed",
                "11", "--out", &out,
            ],
        );
        assert_eq!(code, EXIT_OK, "{err}");
        let oracle = brute_force_posterior(
            &[2, 7, 4, 5],
            &[5.0; 4],
            &BymModelSpec::new(q).unwrap(),
            &QuadratureGrid::default(),
        )
        .unwrap();
        let summary = read(tmp.path().join(&out).join("summary.csv"));
        for (line, o) in summary.lines().skip(1).zip(&oracle.eta_mean) {
            let mean: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
            assert!((mean - o).abs() < 0.02, "{model}: {mean} vs {o}");
        }
        let hyper = read(tmp.path().join(&out).join("hyperparameters.csv"));
        let beta0: f64 = hyper.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
        assert!((beta0 - oracle.beta0_mean).abs() < 0.02);
    }
}

#[test]
fn fit_large_counts_pin_log_risk_at_zero() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "g.csv", "a,b\n");
    write(tmp.path(), "counts.csv", "unit_id,count\na,1000000\nb,1000000\n");
    let (code, _, err) = homcar(
        tmp.path(),
        &["fit", "--edges", "g.csv", "--counts", "counts.csv", "--expected", "1000000", "--samples", "2000", "--out", "f"],
    );
    // With two units beta0 trades off against the mean of v, so only the
    // log-risks are identified and the fit may carry a convergence warning.
    assert!(code == EXIT_OK || code == EXIT_CONVERGENCE, "{err}");
    for line in read(tmp.path().join("f/summary.csv")).lines().skip(1) {
        let mean: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!(mean.abs() < 0.01, "{line}");
    }
    let conv: serde_json::Value = serde_json::from_str(&read(tmp.path().join("f/convergence.json"))).unwrap();
    for entry in conv["rhat"].as_array().unwrap() {
        if entry["name"].as_str().unwrap().starts_with("eta") {
            assert!(entry["rhat"].as_f64().unwrap() < 1.05, "{entry}");
        }
    }
}

#[test]
fn fit_input_errors() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "g.csv", CYCLE);
    write(tmp.path(), "short.csv", "unit_id,count,expected\na,2,5\nb,7,5\nc,4,5\n");
    let (code, _, err) = homcar(tmp.path(), &["fit", "--edges", "g.csv", "--counts", "short.csv", "--out", "f"]);
    assert_eq!(code, EXIT_INPUT, "{err}");
    write(tmp.path(), "noexp.csv", "unit_id,count\na,2\nb,7\nc,4\nd,5\n");
    let (code, _, err) = homcar(tmp.path(), &["fit", "--edges", "g.csv", "--counts", "noexp.csv", "--out", "f"]);
    assert_eq!(code, EXIT_INPUT);
    assert!(err.contains("expected"), "{err}");
    write(tmp.path(), "bad.csv", "unit_id,count,expected\na,2,5\nb,x,5\nc,4,5\nd,5,5\n");
    let (code, _, _) = homcar(tmp.path(), &["fit", "--edges", "g.csv", "--counts", "bad.csv", "--out", "f"]);
    assert_eq!(code, EXIT_INPUT);
    assert!(!tmp.path().join("f").exists());
}

#[test]
fn fit_flags_non_convergence_but_writes_outputs() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "g.csv", CYCLE);
    write(tmp.path(), "counts.csv", CYCLE_COUNTS);
    let (code, _, err) = homcar(
        tmp.path(),
        &[
            "fit", "--edges", "g.csv", "--counts", "counts.csv", "--burn-in", "2", "--samples", "8", "--thinning", "1",
            "--write-draws", "--out", "f",
        ],
    );
    assert_eq!(code, EXIT_CONVERGENCE, "{err}");
    let conv: serde_json::Value = serde_json::from_str(&read(tmp.path().join("f/convergence.json"))).unwrap();
    assert_eq!(conv["converged"], false);
    assert_eq!(read(tmp.path().join("f/draws.csv")).lines().count(), 1 + 4 * 8);
    assert!(tmp.path().join("f/manifest.json").exists());
}

const QUICK: [&str; 8] = [
    "--set",
    "mcmc.chains=2",
    "--set",
    "mcmc.burn_in=100",
    "--set",
    "mcmc.samples_per_chain=200",
    "--set",
    "mcmc.thinning=2",
];

fn experiment(dir: &Path, name: &str, extra: &[&str]) -> i32 {
    let mut args = vec!["experiment", "--lattice", "4x4", "--replicates", "3", "--name", name, "--out", "o"];
    args.extend_from_slice(&QUICK);
    args.extend_from_slice(extra);
    let (code, _, err) = homcar(dir, &args);
    assert!(code == EXIT_OK || code == EXIT_CONVERGENCE, "exit {code}: {err}");
    code
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines().map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn experiment_outputs_and_reaggregation() {
    let tmp = TempDir::new().unwrap();
    experiment(tmp.path(), "full", &[]);
    let root = tmp.path().join("o/full");
    let rows = csv_rows(&read(root.join("summary.csv")));
    assert_eq!(rows.len(), 5);
    let modes: Vec<(&str, &str)> = rows[1..].iter().map(|r| (r[0].as_str(), r[2].as_str())).collect();
    assert_eq!(modes, [("bym", "mean"), ("homcar", "mean"), ("bym", "sum"), ("homcar", "sum")]);
    for r in &rows[1..] {
        assert_eq!(&r[3..6], ["3", "3", "0"]);
        assert_eq!(r[7], "true");
    }
    for m in ["bym", "homcar"] {
        for rep in ["rep_000", "rep_001", "rep_002"] {
            for f in ["summary.csv", "hyperparameters.csv", "convergence.json", "fit_metrics.json"] {
                assert!(root.join(m).join(rep).join(f).exists(), "{m}/{rep}/{f}");
            }
        }
    }
    assert_eq!(read(root.join("variance_maps.csv")).lines().count(), 17);
    assert_eq!(read(root.join("relative_variance_bins.csv")).lines().count(), 10);
    assert_eq!(read(root.join("correlations.csv")).lines().count(), 5);
    assert_eq!(read(root.join("failures.csv")).lines().count(), 1);
    let manifest: serde_json::Value = serde_json::from_str(&read(root.join("manifest.json"))).unwrap();
    let outputs: Vec<&str> = manifest["outputs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert!(outputs.contains(&"homcar/rep_002/summary.csv") && outputs.contains(&"summary.csv"));
    let mut sorted = outputs.clone();
    sorted.sort();
    assert_eq!(outputs, sorted);

    let (code, _, err) = homcar(tmp.path(), &["metrics", "--experiment", "o/full", "--out", "again"]);
    assert_eq!(code, EXIT_OK, "{err}");
    for f in [
        "summary.csv",
        "variance_maps.csv",
        "variance_histogram.csv",
        "relative_variance_difference.csv",
        "relative_variance_bins.csv",
        "correlations.csv",
        "failures.csv",
    ] {
        assert_eq!(read(tmp.path().join("again").join(f)), read(root.join(f)), "{f}");
    }
}

#[test]
fn duplicate_models_give_identical_rows() {
    let tmp = TempDir::new().unwrap();
    experiment(tmp.path(), "dup", &["--set", "models=[\"bym\", \"bym\"]"]);
    let rows = csv_rows(&read(tmp.path().join("o/dup/summary.csv")));
    assert_eq!(rows.len(), 5);
    assert_eq!((rows[1][0].as_str(), rows[2][0].as_str()), ("bym", "bym_2"));
    assert_eq!(rows[1][1..], rows[2][1..]);
    assert_eq!(rows[3][1..], rows[4][1..]);
    assert!(!tmp.path().join("o/dup/relative_variance_difference.csv").exists());
}

#[test]
fn single_replicate_rerun_reproduces_files() {
    let tmp = TempDir::new().unwrap();
    experiment(tmp.path(), "all", &["--jobs", "2"]);
    experiment(tmp.path(), "one", &["--replicate", "1"]);
    let summary = read(tmp.path().join("o/one/summary.csv"));
    assert!(summary.lines().nth(1).unwrap().contains(",false,"), "subset run must be marked incomplete");
    for f in [
        "replicates/rep_001.csv",
        "bym/rep_001/summary.csv",
        "homcar/rep_001/hyperparameters.csv",
        "homcar/rep_001/fit_metrics.json",
        "bym/rep_001/convergence.json",
    ] {
        assert_eq!(read(tmp.path().join("o/one").join(f)), read(tmp.path().join("o/all").join(f)), "{f}");
    }
    assert!(!tmp.path().join("o/one/bym/rep_000").exists());
}

#[test]
fn experiment_config_errors() {
    let tmp = TempDir::new().unwrap();
    let (code, _, _) = homcar(tmp.path(), &["experiment", "--lattice", "4x4", "--replicates", "1", "--out", "o"]);
    assert_eq!(code, EXIT_INPUT);
    let (code, _, _) =
        homcar(tmp.path(), &["experiment", "--lattice", "4x4", "--replicates", "3", "--replicate", "7", "--out", "o"]);
    assert_eq!(code, EXIT_INPUT);
    let (code, _, _) = homcar(tmp.path(), &["experiment", "--lattice", "4x4", "--set", "models=[]", "--out", "o"]);
    assert_eq!(code, EXIT_INPUT);
}
