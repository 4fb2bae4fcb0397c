//! End-to-end comparison: simulate replicates, fit every model to each, and
//! aggregate accuracy, information criteria and empirical variance maps.

use std::fmt::Write as _;
use std::path::PathBuf;

use homcar::car::{build_homcar, build_icar};
use homcar::inference::BymFit;
use homcar::metrics::{
    empirical_variance_map, interval_score, mab, mean_variance, pearson_correlation, relative_change_bin,
    relative_change_label, relative_variance_difference, rmse, variance_mse, MetricsReport,
};
use homcar::sampling::child_seed;
use homcar::spectral::marginal_variances;
use homcar::stats::SpreadSummary;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use super::fit::{json_text, model_spec, write_fit_files, FitMetrics};
use super::replicate_name;
use super::simulate::{build_scenario, scenario_json, write_graph, write_replicates};
use crate::config::{ExperimentConfig, ModelName};
use crate::error::{CliError, CliResult, Outcome};
use crate::io::{InputRecord, OutputDir};

/// Interval level used for the interval score.
pub const INTERVAL_ALPHA: f64 = 0.05;

/// Seed of the MCMC run for a replicate; every model shares it.
pub fn fit_seed(replicate_seed: u64) -> u64 {
    child_seed(replicate_seed, 0)
}

/// What the aggregation needs from one fit.
#[derive(Clone, Debug, PartialEq)]
pub struct FitRecord {
    pub eta_mean: Vec<f64>,
    pub eta_q025: Vec<f64>,
    pub eta_q975: Vec<f64>,
    pub dic: f64,
    pub waic: f64,
    pub converged: bool,
}

impl FitRecord {
    pub fn of(fit: &BymFit) -> CliResult<Self> {
        let m = FitMetrics::of(fit)?;
        Ok(Self {
            eta_mean: fit.eta.iter().map(|s| s.mean).collect(),
            eta_q025: fit.eta.iter().map(|s| s.q025).collect(),
            eta_q975: fit.eta.iter().map(|s| s.q975).collect(),
            dic: m.dic,
            waic: m.waic,
            converged: fit.converged(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelEntry {
    /// Output directory name; repeated models get `_2`, `_3`, ... suffixes.
    pub dir: String,
    pub model: ModelName,
}

pub fn model_entries(models: &[ModelName]) -> Vec<ModelEntry> {
    let mut seen: Vec<ModelName> = Vec::new();
    models
        .iter()
        .map(|&model| {
            seen.push(model);
            let k = seen.iter().filter(|&&m| m == model).count();
            let dir = if k == 1 { model.label().to_string() } else { format!("{}_{k}", model.label()) };
            ModelEntry { dir, model }
        })
        .collect()
}

pub struct AggregationInput {
    pub unit_ids: Vec<String>,
    pub centroids: Option<Vec<[f64; 2]>>,
    pub prior_icar: Vec<f64>,
    pub prior_homcar: Vec<f64>,
    pub models: Vec<ModelEntry>,
    pub replicates: Vec<usize>,
    pub total_replicates: usize,
    /// True log-risks, one vector per entry of `replicates`.
    pub truths: Vec<Vec<f64>>,
    /// `fits[model][k]` for replicate `replicates[k]`.
    pub fits: Vec<Vec<Result<FitRecord, String>>>,
    pub histogram_bins: usize,
    pub target_variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelAggregate {
    pub entry: ModelEntry,
    pub fitted: usize,
    pub failed: usize,
    pub unconverged: usize,
    /// DIC, WAIC and interval score averaged over replicates.
    pub mean: MetricsReport,
    /// DIC, WAIC and interval score summed over replicates.
    pub sum: MetricsReport,
    pub correlation_icar_prior: f64,
    pub correlation_homcar_prior: f64,
    pub variance_summary: Option<SpreadSummary>,
}

impl ModelAggregate {
    pub fn variance_map(&self) -> &[f64] {
        &self.mean.variance_map
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentSummary {
    pub models: Vec<ModelAggregate>,
    pub complete: bool,
    /// `(homcar - bym) / bym` per unit for the first entry of each model.
    pub relative_difference: Option<Vec<f64>>,
    pub failures: Vec<(String, usize, String)>,
}

fn nan_if_err(r: homcar::Result<f64>) -> f64 {
    r.unwrap_or(f64::NAN)
}

pub fn aggregate(input: &AggregationInput) -> CliResult<ExperimentSummary> {
    let n = input.unit_ids.len();
    let mut models = Vec::new();
    let mut failures = Vec::new();
    for (entry, fits) in input.models.iter().zip(&input.fits) {
        let ok: Vec<(usize, &FitRecord)> = fits
            .iter()
            .enumerate()
            .filter_map(|(k, f)| f.as_ref().ok().map(|r| (k, r)))
            .collect();
        for (k, f) in fits.iter().enumerate() {
            if let Err(msg) = f {
                failures.push((entry.dir.clone(), input.replicates[k], msg.clone()));
            }
        }
        let j = ok.len();
        let (mut mab_v, mut rmse_v) = (f64::NAN, f64::NAN);
        let (mut dic_sum, mut waic_sum, mut is_sum) = (0.0, 0.0, 0.0);
        if j > 0 {
            let est = DMatrix::from_fn(n, j, |i, c| ok[c].1.eta_mean[i]);
            let truth = DMatrix::from_fn(n, j, |i, c| input.truths[ok[c].0][i]);
            mab_v = mab(&est, &truth)?;
            rmse_v = rmse(&est, &truth)?;
            for &(k, f) in &ok {
                dic_sum += f.dic;
                waic_sum += f.waic;
                let mut is = 0.0;
                for i in 0..n {
                    is += interval_score(f.eta_q025[i], f.eta_q975[i], input.truths[k][i], INTERVAL_ALPHA)?;
                }
                is_sum += is / n as f64;
            }
        }
        let maps: Vec<Vec<f64>> = ok.iter().map(|(_, f)| f.eta_mean.clone()).collect();
        let variance_map = if j >= 2 { empirical_variance_map(&maps)? } else { vec![f64::NAN; n] };
        let valid_map = j >= 2;
        let corr_icar = if valid_map { nan_if_err(pearson_correlation(&input.prior_icar, &variance_map)) } else { f64::NAN };
        let corr_homcar =
            if valid_map { nan_if_err(pearson_correlation(&input.prior_homcar, &variance_map)) } else { f64::NAN };
        let report = |dic: f64, waic: f64, is: f64| MetricsReport {
            dic,
            waic,
            mab: mab_v,
            rmse: rmse_v,
            interval_score_mean: is,
            variance_map: variance_map.clone(),
            variance_mse: if valid_map { variance_mse(&variance_map, input.target_variance) } else { f64::NAN },
            mean_variance: if valid_map { mean_variance(&variance_map) } else { f64::NAN },
            prior_posterior_correlation: corr_icar,
        };
        let jf = j as f64;
        models.push(ModelAggregate {
            entry: entry.clone(),
            fitted: j,
            failed: fits.len() - j,
            unconverged: ok.iter().filter(|(_, f)| !f.converged).count(),
            mean: report(dic_sum / jf, waic_sum / jf, is_sum / jf),
            sum: report(dic_sum, waic_sum, is_sum),
            correlation_icar_prior: corr_icar,
            correlation_homcar_prior: corr_homcar,
            variance_summary: valid_map.then(|| SpreadSummary::of(&variance_map)),
        });
    }

    let first = |m: ModelName| models.iter().find(|a| a.entry.model == m && a.variance_summary.is_some());
    let relative_difference = match (first(ModelName::Bym), first(ModelName::Homcar)) {
        (Some(b), Some(h)) => relative_variance_difference(h.variance_map(), b.variance_map()).ok(),
        _ => None,
    };
    Ok(ExperimentSummary {
        complete: failures.is_empty() && input.replicates.len() == input.total_replicates,
        models,
        relative_difference,
        failures,
    })
}

fn fmt(x: f64) -> String {
    x.to_string()
}

/// Writes the top-level aggregate files.
pub fn write_aggregate(out: &mut OutputDir, input: &AggregationInput, s: &ExperimentSummary) -> CliResult<()> {
    let mut summary = String::from("model,kind,aggregation,replicates,fitted,failed,unconverged,complete,");
    summary.push_str(&MetricsReport::CSV_COLUMNS.join(","));
    summary.push('\n');
    for (mode, pick) in [("mean", 0), ("sum", 1)] {
        for m in &s.models {
            let report = if pick == 0 { &m.mean } else { &m.sum };
            writeln!(
                summary,
                "{},{},{mode},{},{},{},{},{},{}",
                m.entry.dir,
                m.entry.model.label(),
                input.replicates.len(),
                m.fitted,
                m.failed,
                m.unconverged,
                s.complete,
                report.csv_values()
            )
            .unwrap();
        }
    }
    out.write("summary.csv", summary)?;

    let mut maps = String::from("unit_id,x,y,prior_variance_icar,prior_variance_homcar");
    for m in &s.models {
        write!(maps, ",empirical_variance_{}", m.entry.dir).unwrap();
    }
    maps.push('\n');
    for (i, id) in input.unit_ids.iter().enumerate() {
        let (x, y) = input
            .centroids
            .as_ref()
            .map_or((String::new(), String::new()), |c| (fmt(c[i][0]), fmt(c[i][1])));
        write!(maps, "{id},{x},{y},{},{}", input.prior_icar[i], input.prior_homcar[i]).unwrap();
        for m in &s.models {
            write!(maps, ",{}", m.variance_map()[i]).unwrap();
        }
        maps.push('\n');
    }
    out.write("variance_maps.csv", maps)?;

    // Shared bins so the per-model histograms are comparable.
    let upper = s
        .models
        .iter()
        .flat_map(|m| m.variance_map().iter().copied())
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max);
    let bins = input.histogram_bins.max(1);
    let width = if upper > 0.0 { upper / bins as f64 } else { 1.0 };
    let mut hist = String::from("model,bin,lower,upper,count\n");
    for m in &s.models {
        let mut counts = vec![0usize; bins];
        for v in m.variance_map().iter().filter(|v| v.is_finite()) {
            counts[((v / width) as usize).min(bins - 1)] += 1;
        }
        for (b, c) in counts.iter().enumerate() {
            writeln!(hist, "{},{b},{},{},{c}", m.entry.dir, b as f64 * width, (b + 1) as f64 * width).unwrap();
        }
    }
    out.write("variance_histogram.csv", hist)?;

    if let Some(rel) = &s.relative_difference {
        let bym = s.models.iter().find(|a| a.entry.model == ModelName::Bym && a.variance_summary.is_some());
        let hom = s.models.iter().find(|a| a.entry.model == ModelName::Homcar && a.variance_summary.is_some());
        let (bym, hom) = (bym.expect("bym map"), hom.expect("homcar map"));
        let mut text = String::from("unit_id,bym_variance,homcar_variance,relative_difference,bin,label\n");
        let mut tally = [0usize; 9];
        for (i, id) in input.unit_ids.iter().enumerate() {
            let bin = relative_change_bin(rel[i]);
            tally[(bin + 4) as usize] += 1;
            writeln!(
                text,
                "{id},{},{},{},{bin},{}",
                bym.variance_map()[i],
                hom.variance_map()[i],
                rel[i],
                relative_change_label(bin)
            )
            .unwrap();
        }
        out.write("relative_variance_difference.csv", text)?;
        let mut bins_text = String::from("bin,label,count\n");
        for (k, c) in tally.iter().enumerate() {
            let bin = k as i8 - 4;
            writeln!(bins_text, "{bin},{},{c}", relative_change_label(bin)).unwrap();
        }
        out.write("relative_variance_bins.csv", bins_text)?;
    }

    let mut corr = String::from("model,prior,pearson\n");
    for m in &s.models {
        writeln!(corr, "{},icar,{}", m.entry.dir, m.correlation_icar_prior).unwrap();
        writeln!(corr, "{},homcar,{}", m.entry.dir, m.correlation_homcar_prior).unwrap();
    }
    out.write("correlations.csv", corr)?;

    let mut fails = String::from("model,replicate,error\n");
    for (dir, r, msg) in &s.failures {
        writeln!(fails, "{dir},{r},\"{}\"", msg.replace('"', "'")).unwrap();
    }
    out.write("failures.csv", fails)?;
    Ok(())
}

/// Unit-precision ICAR and HomCAR prior marginal variances.
pub(crate) fn prior_variances(graph: &homcar::graph::AdjacencyGraph) -> CliResult<(Vec<f64>, Vec<f64>)> {
    let icar = marginal_variances(&build_icar(graph.clone())?, 1.0)?.variances;
    let homcar = marginal_variances(&build_homcar(graph.clone())?, 1.0)?.variances;
    Ok((icar, homcar))
}

pub struct ExperimentRun {
    pub dir: PathBuf,
    pub summary: ExperimentSummary,
    pub outcome: Outcome,
}

pub fn run(cfg: &ExperimentConfig, mut inputs: Vec<InputRecord>) -> CliResult<ExperimentRun> {
    cfg.validate_for_experiment()?;
    let (graph, scenario, graph_inputs) = build_scenario(cfg)?;
    inputs.extend(graph_inputs);
    let dir = cfg.experiment_dir();
    let mut out = OutputDir::create(&dir)?;
    out.write("config.json", json_text(cfg))?;
    out.write("scenario.json", scenario_json(cfg, &scenario))?;
    write_graph(&mut out, &graph)?;

    let indices: Vec<usize> = match &cfg.only_replicates {
        Some(only) => {
            let mut v = only.clone();
            v.sort_unstable();
            v.dedup();
            v
        }
        None => (0..scenario.replicates).collect(),
    };
    let data = write_replicates(&mut out, &scenario, &indices)?;

    let (prior_icar, prior_homcar) = prior_variances(&graph)?;
    let entries = model_entries(&cfg.models);
    let mut specs = Vec::new();
    for m in [ModelName::Bym, ModelName::Homcar] {
        if cfg.models.contains(&m) {
            specs.push((m, model_spec((*graph).clone(), m, &cfg.priors)?));
        }
    }
    let spec_for = |m: ModelName| &specs.iter().find(|(k, _)| *k == m).expect("spec built").1;
    let expected = vec![scenario.baseline_expected; graph.len()];

    let jobs: Vec<(usize, usize)> = (0..entries.len())
        .flat_map(|m| (0..data.len()).map(move |k| (m, k)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| CliError::Input(format!("cannot build worker pool: {e}")))?;
    let root = out.root().to_path_buf();
    let results: Vec<(Vec<String>, Result<FitRecord, String>)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(m, k)| {
                let entry = &entries[m];
                let rep = &data[k];
                let rel = format!("{}/{}", entry.dir, replicate_name(rep.replicate_index, scenario.replicates));
                let mcmc = cfg.mcmc.with_seed(fit_seed(rep.seed_used));
                let outcome = homcar::inference::fit_bym(&rep.counts, &expected, spec_for(entry.model), &mcmc)
                    .map_err(CliError::from)
                    .and_then(|fit| {
                        let names = write_fit_files(&root.join(&rel), &fit, cfg.output.write_draws)?;
                        Ok((names, FitRecord::of(&fit)?))
                    });
                match outcome {
                    Ok((names, record)) => (names.iter().map(|n| format!("{rel}/{n}")).collect(), Ok(record)),
                    Err(e) => (Vec::new(), Err(e.to_string())),
                }
            })
            .collect()
    });

    let mut fits: Vec<Vec<Result<FitRecord, String>>> = vec![Vec::new(); entries.len()];
    for ((m, _), (names, record)) in jobs.iter().zip(results) {
        for n in names {
            out.record(n);
        }
        fits[*m].push(record);
    }

    let input = AggregationInput {
        unit_ids: graph.unit_ids().to_vec(),
        centroids: graph.centroids().map(|c| c.to_vec()),
        prior_icar,
        prior_homcar,
        models: entries,
        replicates: indices,
        total_replicates: scenario.replicates,
        truths: data.iter().map(|d| d.theta_true.clone()).collect(),
        fits,
        histogram_bins: cfg.output.histogram_bins,
        target_variance: cfg.scenario.marginal_sd.powi(2),
    };
    let summary = aggregate(&input)?;
    write_aggregate(&mut out, &input, &summary)?;
    out.finish("experiment", cfg, inputs)?;

    let unconverged: usize = summary.models.iter().map(|m| m.unconverged).sum();
    let outcome = if !summary.failures.is_empty() {
        Outcome::PartialFailure(format!("{} fits failed; see failures.csv", summary.failures.len()))
    } else if unconverged > 0 {
        Outcome::ConvergenceWarning(format!("{unconverged} fits exceeded the R-hat threshold"))
    } else {
        Outcome::Success
    };
    Ok(ExperimentRun { dir, summary, outcome })
}
