use std::path::PathBuf;

use homcar::graph::{parse_graph, AdjacencyGraph};
use serde::{Deserialize, Serialize};

use crate::error::{input_err, CliResult};
use crate::io::{read_input, InputRecord};

/// Where a graph comes from: the built-in lattice or edge/node files.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSource {
    /// `RxC`, e.g. `15x15`.
    pub lattice: Option<String>,
    pub edges: Option<PathBuf>,
    pub nodes: Option<PathBuf>,
}

pub fn parse_lattice(spec: &str) -> CliResult<(usize, usize)> {
    let parts: Vec<&str> = spec.split(['x', 'X']).collect();
    match parts.as_slice() {
        [r, c] => match (r.trim().parse(), c.trim().parse()) {
            (Ok(r), Ok(c)) if r > 0 && c > 0 => Ok((r, c)),
            _ => input_err(format!("invalid lattice `{spec}`; expected RxC with positive sizes")),
        },
        _ => input_err(format!("invalid lattice `{spec}`; expected RxC")),
    }
}

impl GraphSource {
    pub fn load(&self) -> CliResult<(AdjacencyGraph, Vec<InputRecord>)> {
        match (&self.lattice, &self.edges) {
            (Some(spec), None) => {
                if self.nodes.is_some() {
                    return input_err("a node file cannot be combined with a lattice");
                }
                let (r, c) = parse_lattice(spec)?;
                Ok((AdjacencyGraph::lattice(r, c)?, Vec::new()))
            }
            (None, Some(edges)) => {
                let (edge_text, edge_rec) = read_input(edges)?;
                let mut inputs = vec![edge_rec];
                let node_text = match &self.nodes {
                    Some(p) => {
                        let (t, rec) = read_input(p)?;
                        inputs.push(rec);
                        Some(t)
                    }
                    None => None,
                };
                Ok((parse_graph(&edge_text, node_text.as_deref())?, inputs))
            }
            (Some(_), Some(_)) => input_err("give either a lattice or an edge file, not both"),
            (None, None) => input_err("no graph given; use a lattice or an edge file"),
        }
    }
}
