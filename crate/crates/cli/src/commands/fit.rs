use std::path::{Path, PathBuf};

use homcar::car::{build_homcar, build_icar};
use homcar::inference::{fit_bym, BymFit, BymModelSpec, McmcConfig};
use homcar::metrics::{dic, waic};
use serde::{Deserialize, Serialize};

use crate::config::{ModelName, PriorConfig};
use crate::error::{input_err, CliError, CliResult, Outcome};
use crate::graph_input::GraphSource;
use crate::io::{align_to_units, read_input, write_file, OutputDir, Table};

#[derive(Clone, Debug, Serialize)]
pub struct FitArgs {
    pub graph: GraphSource,
    pub counts: PathBuf,
    pub model: ModelName,
    /// Used when the counts file has no `expected` column and the graph
    /// carries no expected counts.
    pub expected: Option<f64>,
    pub mcmc: McmcConfig,
    pub priors: PriorConfig,
    pub out: PathBuf,
    pub write_draws: bool,
}

/// Contents of `fit_metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitMetrics {
    pub dic: f64,
    pub mean_deviance: f64,
    pub dic_effective_parameters: f64,
    pub waic: f64,
    pub lppd: f64,
    pub waic_effective_parameters: f64,
}

impl FitMetrics {
    pub fn of(fit: &BymFit) -> CliResult<Self> {
        let d = dic(&fit.log_lik)?;
        let w = waic(&fit.log_lik)?;
        Ok(Self {
            dic: d.dic,
            mean_deviance: d.mean_deviance,
            dic_effective_parameters: d.effective_parameters,
            waic: w.waic,
            lppd: w.lppd,
            waic_effective_parameters: w.effective_parameters,
        })
    }
}

pub(crate) fn json_text<T: Serialize>(value: &T) -> String {
    format!("{}\n", serde_json::to_string_pretty(value).expect("value serialises"))
}

/// Writes the per-fit files into `dir` and returns their names.
pub(crate) fn write_fit_files(dir: &Path, fit: &BymFit, write_draws: bool) -> CliResult<Vec<&'static str>> {
    let metrics = FitMetrics::of(fit)?;
    let mut files = vec![
        ("summary.csv", fit.summary_csv()),
        ("hyperparameters.csv", fit.hyperparameter_csv()),
        ("convergence.json", json_text(&fit.diagnostics)),
        ("fit_metrics.json", json_text(&metrics)),
    ];
    if write_draws {
        files.push(("draws.csv", fit.draws_csv()));
    }
    for (name, text) in &files {
        write_file(&dir.join(name), text.as_bytes())?;
    }
    Ok(files.into_iter().map(|(n, _)| n).collect())
}

pub(crate) fn model_spec(
    graph: homcar::graph::AdjacencyGraph,
    model: ModelName,
    priors: &PriorConfig,
) -> CliResult<BymModelSpec> {
    let structure = match model {
        ModelName::Bym => build_icar(graph)?,
        ModelName::Homcar => build_homcar(graph)?,
    };
    let (pu, pv) = priors.priors()?;
    Ok(BymModelSpec::new(structure)?.with_priors(pu, pv))
}

/// Counts and expected counts aligned with the graph's unit order.
fn load_counts(
    path: &Path,
    graph: &homcar::graph::AdjacencyGraph,
    fallback: Option<f64>,
) -> CliResult<(Vec<u64>, Vec<f64>, crate::io::InputRecord)> {
    let (text, record) = read_input(path)?;
    let source = path.display().to_string();
    let table = Table::parse(&text, &source)?;
    let ids = table.strings(table.require("unit_id")?);
    let counts: Vec<u64> = table.parsed(table.require("count")?)?;
    let counts = align_to_units(graph.unit_ids(), &ids, &counts, &source)?;
    let expected = match (table.column("expected"), fallback, graph.expected_counts()) {
        (Some(col), _, _) => align_to_units(graph.unit_ids(), &ids, &table.parsed::<f64>(col)?, &source)?,
        (None, Some(e), _) => vec![e; counts.len()],
        (None, None, Some(e)) => e.to_vec(),
        (None, None, None) => {
            return input_err(format!(
                "{source}: no `expected` column; pass --expected or give expected counts in the node file"
            ))
        }
    };
    Ok((counts, expected, record))
}

/// Fits one model and writes its files. Non-convergence still writes every
/// file and is reported through the outcome.
pub fn run(args: &FitArgs) -> CliResult<(BymFit, Outcome)> {
    let (graph, mut inputs) = args.graph.load()?;
    let (counts, expected, counts_record) = load_counts(&args.counts, &graph, args.expected)?;
    inputs.push(counts_record);
    let model = model_spec(graph, args.model, &args.priors)?;
    let fit = fit_bym(&counts, &expected, &model, &args.mcmc)?;

    let mut out = OutputDir::create(&args.out)?;
    for name in write_fit_files(out.root(), &fit, args.write_draws)? {
        out.record(name.to_string());
    }
    out.finish("fit", args, inputs)?;
    let outcome = if fit.converged() {
        Outcome::Success
    } else {
        Outcome::ConvergenceWarning(format!(
            "max split R-hat {:.4} exceeds {}",
            fit.diagnostics.max_rhat,
            homcar::inference::RHAT_THRESHOLD
        ))
    };
    Ok((fit, outcome))
}

/// Reads `fit_metrics.json` back.
pub(crate) fn read_fit_metrics(path: &Path) -> CliResult<FitMetrics> {
    let text = crate::io::read_text(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}
