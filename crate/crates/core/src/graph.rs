//! Areal adjacency graphs.
//!
//! A graph holds an ordered list of unit identifiers, a set of undirected
//! weighted edges and, optionally, planar centroids and expected counts per
//! unit. Graphs are immutable once built; every query is a pure function.
//!
//! The text formats accepted by [`parse_graph`] are headerless CSV:
//!
//! ```text
//! # edges: id_a,id_b[,weight]
//! a,b
//! b,c,2.5
//! ```
//!
//! ```text
//! # nodes: id[,x,y][,E]
//! a,0,0,5
//! b,1,0,5
//! ```

use std::collections::{HashMap, VecDeque};

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::stats::quantile_sorted;

/// One undirected edge, stored with `a < b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencyGraph {
    unit_ids: Vec<String>,
    edges: Vec<Edge>,
    neighbors: Vec<Vec<(usize, f64)>>,
    centroids: Option<Vec<[f64; 2]>>,
    expected: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentPartition {
    pub component_index: Vec<usize>,
    pub component_count: usize,
}

impl ComponentPartition {
    /// Unit indices grouped by component, in component order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.component_count];
        for (unit, &c) in self.component_index.iter().enumerate() {
            out[c].push(unit);
        }
        out
    }
}

/// Key-ordered summary used for golden-file comparisons.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GraphSummary {
    pub units: usize,
    pub edges: usize,
    pub components: usize,
    pub total_weight: f64,
    pub min_neighbors: usize,
    pub max_neighbors: usize,
    pub mean_neighbors: f64,
    pub isolated_units: usize,
    pub has_centroids: bool,
    pub has_expected_counts: bool,
}

impl AdjacencyGraph {
    /// Builds a graph from unit ids and `(i, j, w)` triples over their indices.
    ///
    /// Duplicate edges with the same weight collapse to one; conflicting
    /// weights, self-loops and non-positive weights are rejected.
    pub fn new<I>(unit_ids: Vec<String>, edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize, f64)>,
    {
        let n = unit_ids.len();
        let mut seen = HashMap::with_capacity(n);
        for (i, id) in unit_ids.iter().enumerate() {
            if id.is_empty() {
                return invalid(format!("unit {i} has an empty id"));
            }
            if seen.insert(id.as_str(), i).is_some() {
                return invalid(format!("duplicate unit id '{id}'"));
            }
        }

        let mut by_pair: HashMap<(usize, usize), f64> = HashMap::new();
        for (i, j, w) in edges {
            if i >= n || j >= n {
                return invalid(format!("edge ({i},{j}) references a unit outside 0..{n}"));
            }
            if i == j {
                return invalid(format!("self-loop on unit '{}'", unit_ids[i]));
            }
            if !(w.is_finite() && w > 0.0) {
                return invalid(format!(
                    "edge ({},{}) has non-positive weight {w}",
                    unit_ids[i], unit_ids[j]
                ));
            }
            let key = (i.min(j), i.max(j));
            match by_pair.get(&key) {
                Some(&old) if old != w => {
                    return invalid(format!(
                        "edge ({},{}) listed with conflicting weights {old} and {w}",
                        unit_ids[key.0], unit_ids[key.1]
                    ));
                }
                Some(_) => {}
                None => {
                    by_pair.insert(key, w);
                }
            }
        }

        let mut edges: Vec<Edge> = by_pair
            .into_iter()
            .map(|((a, b), weight)| Edge { a, b, weight })
            .collect();
        edges.sort_by_key(|e| (e.a, e.b));

        let mut neighbors = vec![Vec::new(); n];
        for e in &edges {
            neighbors[e.a].push((e.b, e.weight));
            neighbors[e.b].push((e.a, e.weight));
        }
        for list in &mut neighbors {
            list.sort_by_key(|&(j, _)| j);
        }

        Ok(Self {
            unit_ids,
            edges,
            neighbors,
            centroids: None,
            expected: None,
        })
    }

    pub fn with_centroids(mut self, centroids: Vec<[f64; 2]>) -> Result<Self> {
        crate::error::check_len(self.len(), centroids.len())?;
        if centroids.iter().flatten().any(|c| !c.is_finite()) {
            return invalid("centroid coordinates must be finite");
        }
        self.centroids = Some(centroids);
        Ok(self)
    }

    pub fn with_expected_counts(mut self, expected: Vec<f64>) -> Result<Self> {
        crate::error::check_len(self.len(), expected.len())?;
        if let Some((i, e)) = expected
            .iter()
            .enumerate()
            .find(|(_, e)| !(e.is_finite() && **e > 0.0))
        {
            return invalid(format!(
                "expected count for '{}' must be positive, got {e}",
                self.unit_ids[i]
            ));
        }
        self.expected = Some(expected);
        Ok(self)
    }

    /// Rook-contiguity `rows x cols` lattice with unit spacing.
    ///
    /// Unit `r_c` sits at centroid `(c, r)`; units are ordered row-major.
    pub fn lattice(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return invalid("lattice dimensions must be positive");
        }
        let idx = |r: usize, c: usize| r * cols + c;
        let mut ids = Vec::with_capacity(rows * cols);
        let mut centroids = Vec::with_capacity(rows * cols);
        let mut edges = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                ids.push(format!("{r}_{c}"));
                centroids.push([c as f64, r as f64]);
                if c + 1 < cols {
                    edges.push((idx(r, c), idx(r, c + 1), 1.0));
                }
                if r + 1 < rows {
                    edges.push((idx(r, c), idx(r + 1, c), 1.0));
                }
            }
        }
        Self::new(ids, edges)?.with_centroids(centroids)
    }

    pub fn len(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unit_ids.is_empty()
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.unit_ids.iter().position(|u| u == id)
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Neighbours of `unit` as `(index, weight)`, sorted by index.
    pub fn neighbors(&self, unit: usize) -> &[(usize, f64)] {
        &self.neighbors[unit]
    }

    pub fn centroids(&self) -> Option<&[[f64; 2]]> {
        self.centroids.as_deref()
    }

    pub fn expected_counts(&self) -> Option<&[f64]> {
        self.expected.as_deref()
    }

    pub fn neighbor_counts(&self) -> Vec<usize> {
        self.neighbors.iter().map(Vec::len).collect()
    }

    /// `D_ii`, the sum of incident edge weights.
    pub fn weighted_degrees(&self) -> Vec<f64> {
        self.neighbors
            .iter()
            .map(|list| list.iter().map(|&(_, w)| w).sum())
            .collect()
    }

    pub fn connected_components(&self) -> ComponentPartition {
        let n = self.len();
        let mut index = vec![usize::MAX; n];
        let mut count = 0;
        let mut queue = VecDeque::new();
        for start in 0..n {
            if index[start] != usize::MAX {
                continue;
            }
            index[start] = count;
            queue.push_back(start);
            while let Some(u) = queue.pop_front() {
                for &(v, _) in &self.neighbors[u] {
                    if index[v] == usize::MAX {
                        index[v] = count;
                        queue.push_back(v);
                    }
                }
            }
            count += 1;
        }
        ComponentPartition {
            component_index: index,
            component_count: count,
        }
    }

    pub fn is_connected(&self) -> bool {
        self.connected_components().component_count == 1
    }

    pub(crate) fn require_connected(&self) -> Result<()> {
        let components = self.connected_components().component_count;
        if components == 1 {
            Ok(())
        } else {
            Err(Error::Disconnected { components })
        }
    }

    /// Hop distances from `source`; `usize::MAX` for unreachable units.
    pub fn hop_distances(&self, source: usize) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.len()];
        dist[source] = 0;
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            for &(v, _) in &self.neighbors[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Largest hop distance from each unit to any other unit.
    pub fn eccentricity(&self) -> Result<Vec<usize>> {
        self.require_connected()?;
        Ok((0..self.len())
            .map(|s| self.hop_distances(s).into_iter().max().unwrap_or(0))
            .collect())
    }

    /// Euclidean distances between centroids.
    pub fn centroid_distances(&self) -> Result<DMatrix<f64>> {
        let c = self
            .centroids
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("graph has no centroids".into()))?;
        let n = c.len();
        Ok(DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                0.0
            } else {
                (c[i][0] - c[j][0]).hypot(c[i][1] - c[j][1])
            }
        }))
    }

    pub fn summary(&self) -> GraphSummary {
        let counts = self.neighbor_counts();
        let n = self.len();
        GraphSummary {
            units: n,
            edges: self.edges.len(),
            components: self.connected_components().component_count,
            total_weight: self.edges.iter().map(|e| e.weight).sum(),
            min_neighbors: counts.iter().copied().min().unwrap_or(0),
            max_neighbors: counts.iter().copied().max().unwrap_or(0),
            mean_neighbors: if n == 0 {
                0.0
            } else {
                counts.iter().sum::<usize>() as f64 / n as f64
            },
            isolated_units: counts.iter().filter(|&&c| c == 0).count(),
            has_centroids: self.centroids.is_some(),
            has_expected_counts: self.expected.is_some(),
        }
    }

    /// Pretty-printed JSON summary with fixed key order.
    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary()).expect("summary is always serialisable")
    }

    /// Edge text in the format read by [`parse_graph`]; weights are always written.
    pub fn to_edge_text(&self) -> String {
        let mut out = String::new();
        for e in &self.edges {
            out.push_str(&format!(
                "{},{},{}\n",
                self.unit_ids[e.a], self.unit_ids[e.b], e.weight
            ));
        }
        out
    }

    /// Node text in the format read by [`parse_graph`].
    pub fn to_node_text(&self) -> String {
        let mut out = String::new();
        for (i, id) in self.unit_ids.iter().enumerate() {
            out.push_str(id);
            if let Some(c) = &self.centroids {
                out.push_str(&format!(",{},{}", c[i][0], c[i][1]));
            }
            if let Some(e) = &self.expected {
                out.push_str(&format!(",{}", e[i]));
            }
            out.push('\n');
        }
        out
    }
}

/// Empirical `q`-quantile of the off-diagonal upper-triangle entries of a
/// distance matrix, with linear interpolation between order statistics.
pub fn distance_quantile(distances: &DMatrix<f64>, q: f64) -> Result<f64> {
    let n = distances.nrows();
    if n < 2 || distances.ncols() != n {
        return invalid("distance quantile needs a square matrix with at least 2 units");
    }
    if !(q > 0.0 && q < 1.0) {
        return invalid(format!("quantile level must lie in (0,1), got {q}"));
    }
    let mut values = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            values.push(distances[(i, j)]);
        }
    }
    values.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&values, q))
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(k, raw)| {
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            None
        } else {
            Some((k + 1, line.split(',').map(str::trim).collect()))
        }
    })
}

fn parse_number(line: usize, field: &str, what: &str) -> Result<f64> {
    field.parse::<f64>().map_err(|_| Error::Parse {
        line,
        msg: format!("cannot parse {what} '{field}'"),
    })
}

fn parse_err<T>(line: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Parse {
        line,
        msg: msg.into(),
    })
}

/// Parses edge text and optional node text into a validated graph.
///
/// Unit order follows the node text when present, otherwise first
/// appearance in the edge text.
pub fn parse_graph(edge_text: &str, node_text: Option<&str>) -> Result<AdjacencyGraph> {
    let mut ids: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut centroids: Vec<[f64; 2]> = Vec::new();
    let mut expected: Vec<f64> = Vec::new();
    let mut layout: Option<usize> = None;

    if let Some(nodes) = node_text {
        for (line, fields) in data_lines(nodes) {
            let width = fields.len();
            if !(1..=4).contains(&width) {
                return parse_err(line, format!("node row has {width} fields, expected 1 to 4"));
            }
            if *layout.get_or_insert(width) != width {
                return parse_err(line, "node rows must all have the same number of fields");
            }
            let id = fields[0].to_string();
            if id.is_empty() {
                return parse_err(line, "empty unit id");
            }
            if index.insert(id.clone(), ids.len()).is_some() {
                return parse_err(line, format!("duplicate unit id '{id}'"));
            }
            ids.push(id);
            if width >= 3 {
                centroids.push([
                    parse_number(line, fields[1], "x coordinate")?,
                    parse_number(line, fields[2], "y coordinate")?,
                ]);
            }
            if width == 2 || width == 4 {
                let e = parse_number(line, fields[width - 1], "expected count")?;
                if !(e.is_finite() && e > 0.0) {
                    return parse_err(line, format!("expected count must be positive, got {e}"));
                }
                expected.push(e);
            }
        }
    }

    let fixed_units = node_text.is_some();
    let mut edges = Vec::new();
    for (line, fields) in data_lines(edge_text) {
        if !(2..=3).contains(&fields.len()) {
            return parse_err(line, format!("edge row has {} fields, expected 2 or 3", fields.len()));
        }
        let mut ends = [0usize; 2];
        for (slot, id) in ends.iter_mut().zip(&fields[..2]) {
            if id.is_empty() {
                return parse_err(line, "empty unit id");
            }
            *slot = match index.get(*id) {
                Some(&k) => k,
                None if fixed_units => {
                    return parse_err(line, format!("unknown unit id '{id}'"));
                }
                None => {
                    index.insert(id.to_string(), ids.len());
                    ids.push(id.to_string());
                    ids.len() - 1
                }
            };
        }
        if ends[0] == ends[1] {
            return parse_err(line, format!("self-loop on '{}'", fields[0]));
        }
        let weight = match fields.get(2) {
            Some(w) => parse_number(line, w, "weight")?,
            None => 1.0,
        };
        if !(weight.is_finite() && weight > 0.0) {
            return parse_err(line, format!("weight must be positive, got {weight}"));
        }
        edges.push((ends[0], ends[1], weight));
    }

    let mut graph = AdjacencyGraph::new(ids, edges)?;
    if !centroids.is_empty() {
        graph = graph.with_centroids(centroids)?;
    }
    if !expected.is_empty() {
        graph = graph.with_expected_counts(expected)?;
    }
    Ok(graph)
}
