use std::path::PathBuf;

use homcar::car::{build_icar, homcar_transform};
use homcar::spectral::{marginal_variances, VarianceProfile};
use serde::Serialize;

use crate::error::CliResult;
use crate::graph_input::GraphSource;
use crate::io::OutputDir;

#[derive(Clone, Debug, Serialize)]
pub struct VarianceProfileArgs {
    pub graph: GraphSource,
    pub tau: f64,
    pub homcar: bool,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VarianceProfileReport {
    pub unit_ids: Vec<String>,
    pub icar: VarianceProfile,
    pub homcar: Option<VarianceProfile>,
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    icar: &'a homcar::stats::SpreadSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    homcar: Option<&'a homcar::stats::SpreadSummary>,
}

/// Writes `icar_variances.csv`, optionally `homcar_variances.csv`, and
/// `variance_summary.json`.
pub fn run(args: &VarianceProfileArgs) -> CliResult<VarianceProfileReport> {
    let (graph, inputs) = args.graph.load()?;
    let unit_ids = graph.unit_ids().to_vec();
    let icar = build_icar(graph)?;
    let icar_profile = marginal_variances(&icar, args.tau)?;
    let homcar_profile = if args.homcar {
        // The transform needs the unit-precision variances of the same matrix.
        let unit = if args.tau == 1.0 { icar_profile.clone() } else { marginal_variances(&icar, 1.0)? };
        let q_star = homcar_transform(&icar, &unit)?;
        Some(marginal_variances(&q_star, args.tau)?)
    } else {
        None
    };

    let mut out = OutputDir::create(&args.out)?;
    out.write("icar_variances.csv", icar_profile.to_csv(&unit_ids, "icar"))?;
    if let Some(h) = &homcar_profile {
        out.write("homcar_variances.csv", h.to_csv(&unit_ids, "homcar"))?;
    }
    let summary = SummaryFile {
        icar: &icar_profile.summary,
        homcar: homcar_profile.as_ref().map(|h| &h.summary),
    };
    out.write(
        "variance_summary.json",
        format!("{}\n", serde_json::to_string_pretty(&summary).expect("summary serialises")),
    )?;
    out.finish("variance-profile", args, inputs)?;
    Ok(VarianceProfileReport {
        unit_ids,
        icar: icar_profile,
        homcar: homcar_profile,
    })
}
