use std::sync::Arc;

use homcar::graph::AdjacencyGraph;
use homcar::sampling::{generate_replicate, GaussianField, ReplicateData, SimulationScenario};
use serde::Serialize;

use super::replicate_name;
use crate::config::ExperimentConfig;
use crate::error::{input_err, CliResult};
use crate::io::{InputRecord, OutputDir};

#[derive(Serialize)]
struct ScenarioFile {
    units: usize,
    range_quantile: f64,
    delta: f64,
    marginal_sd: f64,
    baseline_expected: f64,
    replicates: usize,
    base_seed: u64,
    replicate_seeds: Vec<u64>,
}

/// Graph, scenario and hashed inputs described by a config.
pub fn build_scenario(cfg: &ExperimentConfig) -> CliResult<(Arc<AdjacencyGraph>, SimulationScenario, Vec<InputRecord>)> {
    let (graph, inputs) = cfg.graph.load()?;
    if graph.centroids().is_none() {
        return input_err("simulation needs unit centroids; supply a node file with x,y columns or use a lattice");
    }
    let graph = Arc::new(graph);
    let s = &cfg.scenario;
    let scenario = SimulationScenario::with_range_quantile(
        graph.clone(),
        s.range_quantile,
        s.marginal_sd,
        s.baseline_expected,
        s.replicates,
        s.base_seed,
    )?;
    Ok((graph, scenario, inputs))
}

pub(crate) fn scenario_json(cfg: &ExperimentConfig, scenario: &SimulationScenario) -> String {
    let file = ScenarioFile {
        units: scenario.graph.len(),
        range_quantile: cfg.scenario.range_quantile,
        delta: scenario.delta,
        marginal_sd: scenario.marginal_sd,
        baseline_expected: scenario.baseline_expected,
        replicates: scenario.replicates,
        base_seed: scenario.base_seed,
        replicate_seeds: (0..scenario.replicates).map(|r| scenario.replicate_seed(r)).collect(),
    };
    format!("{}\n", serde_json::to_string_pretty(&file).expect("scenario serialises"))
}

/// Appends a constant `expected` column so replicate files feed `fit` directly.
fn with_expected(csv: &str, expected: f64) -> String {
    let mut out = String::with_capacity(csv.len() + csv.lines().count() * 4);
    for (k, line) in csv.lines().enumerate() {
        out.push_str(line);
        if k == 0 {
            out.push_str(",expected\n");
        } else {
            out.push_str(&format!(",{expected}\n"));
        }
    }
    out
}

/// Draws the listed replicates and writes `replicates/rep_XXX.csv` for each.
pub(crate) fn write_replicates(
    out: &mut OutputDir,
    scenario: &SimulationScenario,
    indices: &[usize],
) -> CliResult<Vec<ReplicateData>> {
    let field = GaussianField::new(&scenario.covariance()?)?;
    let ids = scenario.graph.unit_ids();
    let mut data = Vec::with_capacity(indices.len());
    for &r in indices {
        let rep = generate_replicate(scenario, &field, r)?;
        out.write(
            &format!("replicates/{}.csv", replicate_name(r, scenario.replicates)),
            with_expected(&rep.to_csv(ids), scenario.baseline_expected),
        )?;
        data.push(rep);
    }
    Ok(data)
}

pub(crate) fn write_graph(out: &mut OutputDir, graph: &AdjacencyGraph) -> CliResult<()> {
    out.write("graph/edges.csv", graph.to_edge_text())?;
    out.write("graph/nodes.csv", graph.to_node_text())
}

/// Writes the scenario description, the graph and every replicate under
/// `<output_dir>/<name>/`.
pub fn run(cfg: &ExperimentConfig, mut inputs: Vec<InputRecord>) -> CliResult<Vec<ReplicateData>> {
    cfg.validate_for_simulation()?;
    let (graph, scenario, graph_inputs) = build_scenario(cfg)?;
    inputs.extend(graph_inputs);
    let mut out = OutputDir::create(cfg.experiment_dir())?;
    out.write("scenario.json", scenario_json(cfg, &scenario))?;
    write_graph(&mut out, &graph)?;
    let all: Vec<usize> = (0..scenario.replicates).collect();
    let data = write_replicates(&mut out, &scenario, &all)?;
    out.finish("simulate", cfg, inputs)?;
    Ok(data)
}
