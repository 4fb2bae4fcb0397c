//! Recomputes the experiment-level aggregates from the per-replicate files
//! an experiment left on disk.

use std::path::{Path, PathBuf};

use homcar::graph::parse_graph;
use serde::{Deserialize, Serialize};

use super::experiment::{aggregate, model_entries, prior_variances, write_aggregate, AggregationInput, ExperimentSummary, FitRecord};
use super::fit::read_fit_metrics;
use super::replicate_name;
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::io::{align_to_units, read_input, read_text, OutputDir, Table};

#[derive(Clone, Debug, Serialize)]
pub struct MetricsArgs {
    pub experiment: PathBuf,
    /// Defaults to `<experiment>/metrics`.
    pub out: Option<PathBuf>,
}

#[derive(Deserialize)]
struct ConvergenceFlag {
    converged: bool,
}

fn read_fit(dir: &Path, unit_ids: &[String]) -> CliResult<FitRecord> {
    let path = dir.join("summary.csv");
    let source = path.display().to_string();
    let table = Table::parse(&read_text(&path)?, &source)?;
    let ids = table.strings(table.require("unit_id")?);
    let col = |name: &str| -> CliResult<Vec<f64>> {
        let values: Vec<f64> = table.parsed(table.require(name)?)?;
        align_to_units(unit_ids, &ids, &values, &source)
    };
    let metrics = read_fit_metrics(&dir.join("fit_metrics.json"))?;
    let conv_path = dir.join("convergence.json");
    let conv: ConvergenceFlag = serde_json::from_str(&read_text(&conv_path)?)
        .map_err(|e| CliError::Input(format!("{}: {e}", conv_path.display())))?;
    Ok(FitRecord {
        eta_mean: col("eta_mean")?,
        eta_q025: col("eta_q025")?,
        eta_q975: col("eta_q975")?,
        dic: metrics.dic,
        waic: metrics.waic,
        converged: conv.converged,
    })
}

pub fn run(args: &MetricsArgs) -> CliResult<ExperimentSummary> {
    let root = &args.experiment;
    let (config_text, config_record) = read_input(&root.join("config.json"))?;
    let cfg: ExperimentConfig =
        serde_json::from_str(&config_text).map_err(|e| CliError::Input(format!("config.json: {e}")))?;
    let (edges, edges_record) = read_input(&root.join("graph/edges.csv"))?;
    let (nodes, nodes_record) = read_input(&root.join("graph/nodes.csv"))?;
    let graph = parse_graph(&edges, Some(&nodes))?;
    let unit_ids = graph.unit_ids().to_vec();

    let total = cfg.scenario.replicates;
    let replicates: Vec<usize> = match &cfg.only_replicates {
        Some(only) => {
            let mut v = only.clone();
            v.sort_unstable();
            v.dedup();
            v
        }
        None => (0..total).collect(),
    };
    let mut truths = Vec::with_capacity(replicates.len());
    for &r in &replicates {
        let path = root.join(format!("replicates/{}.csv", replicate_name(r, total)));
        let source = path.display().to_string();
        let table = Table::parse(&read_text(&path)?, &source)?;
        let ids = table.strings(table.require("unit_id")?);
        let theta: Vec<f64> = table.parsed(table.require("theta_true")?)?;
        truths.push(align_to_units(&unit_ids, &ids, &theta, &source)?);
    }

    let models = model_entries(&cfg.models);
    let fits = models
        .iter()
        .map(|entry| {
            replicates
                .iter()
                .map(|&r| {
                    read_fit(&root.join(&entry.dir).join(replicate_name(r, total)), &unit_ids).map_err(|e| e.to_string())
                })
                .collect()
        })
        .collect();

    let (prior_icar, prior_homcar) = prior_variances(&graph)?;
    let input = AggregationInput {
        unit_ids,
        centroids: graph.centroids().map(|c| c.to_vec()),
        prior_icar,
        prior_homcar,
        models,
        replicates,
        total_replicates: total,
        truths,
        fits,
        histogram_bins: cfg.output.histogram_bins,
        target_variance: cfg.scenario.marginal_sd.powi(2),
    };
    let summary = aggregate(&input)?;
    let mut out = OutputDir::create(args.out.clone().unwrap_or_else(|| root.join("metrics")))?;
    write_aggregate(&mut out, &input, &summary)?;
    out.finish("metrics", args, vec![config_record, edges_record, nodes_record])?;
    Ok(summary)
}
