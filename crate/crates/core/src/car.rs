//! ICAR, HomCAR and Stern–Cressie structure matrices.
//!
//! A [`StructureMatrix`] is the precision matrix of a CAR prior without its
//! scalar precision `tau`. All three kinds share the sparsity pattern of the
//! source graph: one diagonal entry per unit plus one off-diagonal entry per
//! edge and direction.
//!
//! * ICAR: `Q = D - W`, rows sum to zero.
//! * HomCAR: `Q* = L^{1/2} Q L^{1/2}` with `L = diag(sigma_i^2)` the ICAR
//!   marginal variances. Conditional means become rescaled neighbour sums,
//!   `n_i^{-1} sum_j (sigma_j / sigma_i) theta_j`, with conditional
//!   precision `tau n_i sigma_i^2`.
//! * Stern–Cressie: `Q_ii = E_i`, `Q_ij = -phi sqrt(E_i E_j)`.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, invalid, Error, Result};
use crate::graph::AdjacencyGraph;
use crate::spectral::{SpectralDecomposition, VarianceProfile};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CarKind {
    Icar,
    HomCar,
    SternCressie { phi: f64 },
}

impl CarKind {
    /// Intrinsic kinds have one null direction per connected component.
    pub fn is_intrinsic(self) -> bool {
        matches!(self, CarKind::Icar | CarKind::HomCar)
    }

    pub fn label(self) -> &'static str {
        match self {
            CarKind::Icar => "icar",
            CarKind::HomCar => "homcar",
            CarKind::SternCressie { .. } => "stern-cressie",
        }
    }
}

impl fmt::Display for CarKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CarKind::SternCressie { phi } => write!(f, "stern-cressie(phi={phi})"),
            other => f.write_str(other.label()),
        }
    }
}

/// Where the HomCAR scaling variances came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VarianceSource {
    /// Diagonal of the Moore–Penrose pseudoinverse of the ICAR matrix itself.
    MoorePenrose,
    /// Caller-supplied reweighting.
    External,
}

#[derive(Clone, Debug)]
pub struct StructureMatrix {
    kind: CarKind,
    graph: Arc<AdjacencyGraph>,
    diag: Vec<f64>,
    // off[i] is aligned with graph.neighbors(i)
    off: Vec<Vec<f64>>,
    sigma: Option<Vec<f64>>,
    variance_source: Option<VarianceSource>,
    spectral: OnceLock<Arc<SpectralDecomposition>>,
}

impl PartialEq for StructureMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.graph == other.graph
            && self.diag == other.diag
            && self.off == other.off
            && self.sigma == other.sigma
            && self.variance_source == other.variance_source
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalSpec {
    pub unit: usize,
    pub neighbors: Vec<usize>,
    /// Coefficients on `theta_j` in the conditional mean, aligned with `neighbors`.
    pub mean_weights: Vec<f64>,
    /// Conditional precision is `tau * conditional_precision_multiplier`.
    pub conditional_precision_multiplier: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeValue {
    pub a: usize,
    pub b: usize,
    pub value: f64,
}

/// `Q = D - W` for the graph's edge weights.
pub fn build_icar(graph: impl Into<Arc<AdjacencyGraph>>) -> Result<StructureMatrix> {
    let graph = graph.into();
    if graph.len() < 2 {
        return invalid("an ICAR structure needs at least 2 units");
    }
    let diag = graph.weighted_degrees();
    let off = (0..graph.len())
        .map(|i| graph.neighbors(i).iter().map(|&(_, w)| -w).collect())
        .collect();
    Ok(StructureMatrix::from_parts(CarKind::Icar, graph, diag, off, None, None))
}

/// Stern–Cressie structure with expected counts `expected` and dependence `phi`.
pub fn build_stern_cressie(
    graph: impl Into<Arc<AdjacencyGraph>>,
    expected: &[f64],
    phi: f64,
) -> Result<StructureMatrix> {
    let graph = graph.into();
    check_len(graph.len(), expected.len())?;
    if expected.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
        return invalid("expected counts must be positive");
    }
    if !(phi > 0.0 && phi <= 1.0) {
        return invalid(format!("phi must lie in (0,1], got {phi}"));
    }
    let off = (0..graph.len())
        .map(|i| {
            graph
                .neighbors(i)
                .iter()
                .map(|&(j, _)| -phi * (expected[i] * expected[j]).sqrt())
                .collect()
        })
        .collect();
    Ok(StructureMatrix::from_parts(
        CarKind::SternCressie { phi },
        graph,
        expected.to_vec(),
        off,
        None,
        None,
    ))
}

/// HomCAR matrix scaled by the ICAR matrix's own marginal variances.
///
/// `profile` must be `marginal_variances(icar, 1.0)`; anything else is
/// rejected. Use [`homcar_transform_external`] to reweight with other
/// variances.
pub fn homcar_transform(icar: &StructureMatrix, profile: &VarianceProfile) -> Result<StructureMatrix> {
    if profile.source_fingerprint != Some(icar.fingerprint()) || profile.tau != 1.0 {
        return invalid(
            "variance profile was not computed from this ICAR matrix with tau = 1; \
             use homcar_transform_external to reweight with other variances",
        );
    }
    homcar_with_source(icar, &profile.variances, VarianceSource::MoorePenrose)
}

/// HomCAR-style reweighting `L^{1/2} Q L^{1/2}` with caller-supplied variances.
pub fn homcar_transform_external(icar: &StructureMatrix, variances: &[f64]) -> Result<StructureMatrix> {
    homcar_with_source(icar, variances, VarianceSource::External)
}

/// ICAR matrix, its Moore–Penrose marginal variances, and the HomCAR transform in one step.
pub fn build_homcar(graph: impl Into<Arc<AdjacencyGraph>>) -> Result<StructureMatrix> {
    let icar = build_icar(graph)?;
    let profile = crate::spectral::marginal_variances(&icar, 1.0)?;
    homcar_transform(&icar, &profile)
}

fn homcar_with_source(
    icar: &StructureMatrix,
    variances: &[f64],
    source: VarianceSource,
) -> Result<StructureMatrix> {
    if icar.kind != CarKind::Icar {
        return invalid(format!("HomCAR transform expects an ICAR matrix, got {}", icar.kind));
    }
    check_len(icar.dim(), variances.len())?;
    if let Some((i, v)) = variances
        .iter()
        .enumerate()
        .find(|(_, v)| !(v.is_finite() && **v > 0.0))
    {
        return invalid(format!(
            "variance for unit '{}' must be positive, got {v}",
            icar.graph.unit_ids()[i]
        ));
    }
    let sigma: Vec<f64> = variances.iter().map(|v| v.sqrt()).collect();
    let diag = (0..icar.dim())
        .map(|i| variances[i] * icar.diag[i])
        .collect();
    let off = (0..icar.dim())
        .map(|i| {
            icar.graph
                .neighbors(i)
                .iter()
                .zip(&icar.off[i])
                .map(|(&(j, _), q)| sigma[i] * sigma[j] * q)
                .collect()
        })
        .collect();
    Ok(StructureMatrix::from_parts(
        CarKind::HomCar,
        icar.graph.clone(),
        diag,
        off,
        Some(sigma),
        Some(source),
    ))
}

impl StructureMatrix {
    fn from_parts(
        kind: CarKind,
        graph: Arc<AdjacencyGraph>,
        diag: Vec<f64>,
        off: Vec<Vec<f64>>,
        sigma: Option<Vec<f64>>,
        variance_source: Option<VarianceSource>,
    ) -> Self {
        Self {
            kind,
            graph,
            diag,
            off,
            sigma,
            variance_source,
            spectral: OnceLock::new(),
        }
    }

    pub fn kind(&self) -> CarKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn graph(&self) -> &Arc<AdjacencyGraph> {
        &self.graph
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.diag
    }

    /// Off-diagonal entries of row `i` as `(column, value)`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.graph
            .neighbors(i)
            .iter()
            .zip(&self.off[i])
            .map(|(&(j, _), &v)| (j, v))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return self.diag[i];
        }
        self.row(i).find(|&(k, _)| k == j).map_or(0.0, |(_, v)| v)
    }

    /// Per-unit marginal standard deviations used by the HomCAR transform.
    pub fn sigma(&self) -> Option<&[f64]> {
        self.sigma.as_deref()
    }

    pub fn variance_source(&self) -> Option<VarianceSource> {
        self.variance_source
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = self.diag[i];
            for (j, v) in self.row(i) {
                m[(i, j)] = v;
            }
        }
        m
    }

    /// `Q x` using the sparse pattern.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim())
            .map(|i| self.diag[i] * x[i] + self.row(i).map(|(j, v)| v * x[j]).sum::<f64>())
            .collect()
    }

    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        self.mul_vec(x).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    /// Hash of the matrix entries, used to tie variance profiles to their source.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.kind.label().hash(&mut h);
        for (i, d) in self.diag.iter().enumerate() {
            d.to_bits().hash(&mut h);
            for (j, v) in self.row(i) {
                j.hash(&mut h);
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Cached eigendecomposition.
    pub fn spectral(&self) -> Result<&SpectralDecomposition> {
        if let Some(s) = self.spectral.get() {
            return Ok(s);
        }
        let s = Arc::new(SpectralDecomposition::of_structure(self)?);
        let _ = self.spectral.set(s);
        Ok(self.spectral.get().expect("just initialised"))
    }

    /// Full conditional of unit `i` in conditional-mean form.
    pub fn conditional_spec(&self, i: usize) -> Result<ConditionalSpec> {
        if i >= self.dim() {
            return invalid(format!("unit index {i} out of range"));
        }
        if self.graph.neighbors(i).is_empty() {
            return invalid(format!(
                "unit '{}' has no neighbours, its conditional is undefined",
                self.graph.unit_ids()[i]
            ));
        }
        let qii = self.diag[i];
        let (neighbors, mean_weights) = self.row(i).map(|(j, v)| (j, -v / qii)).unzip();
        Ok(ConditionalSpec {
            unit: i,
            neighbors,
            mean_weights,
            conditional_precision_multiplier: qii,
        })
    }

    /// `-Q_ij / sqrt(Q_ii Q_jj)` for every edge.
    pub fn partial_correlations(&self) -> Vec<EdgeValue> {
        self.graph
            .edges()
            .iter()
            .map(|e| EdgeValue {
                a: e.a,
                b: e.b,
                value: -self.get(e.a, e.b) / (self.diag[e.a] * self.diag[e.b]).sqrt(),
            })
            .collect()
    }

    /// Row sums of the matrix. For ICAR they must vanish (to 1e-12 relative
    /// to the diagonal), otherwise this returns a numerical error.
    pub fn row_sums(&self) -> Result<Vec<f64>> {
        let sums: Vec<f64> = (0..self.dim())
            .map(|i| self.diag[i] + self.row(i).map(|(_, v)| v).sum::<f64>())
            .collect();
        if self.kind == CarKind::Icar {
            for (i, s) in sums.iter().enumerate() {
                if s.abs() >= 1e-12 * self.diag[i].max(1.0) {
                    return Err(Error::Numerical(format!("ICAR row {i} sums to {s}")));
                }
            }
        }
        Ok(sums)
    }

    /// Unit-norm basis of the null space, one vector per connected component
    /// for intrinsic kinds. Each vector is checked against `||Q v||_inf < 1e-10`.
    pub fn null_directions(&self) -> Result<Vec<DVector<f64>>> {
        let n = self.dim();
        let vectors: Vec<DVector<f64>> = match self.kind {
            CarKind::Icar | CarKind::HomCar => {
                let weight = |i: usize| match &self.sigma {
                    Some(s) if self.kind == CarKind::HomCar => 1.0 / s[i],
                    _ => 1.0,
                };
                self.graph
                    .connected_components()
                    .members()
                    .into_iter()
                    .map(|members| {
                        let mut v = DVector::zeros(n);
                        for &i in &members {
                            v[i] = weight(i);
                        }
                        v.normalize()
                    })
                    .collect()
            }
            CarKind::SternCressie { .. } => {
                let s = self.spectral()?;
                (0..s.null_count())
                    .map(|k| s.eigenvectors().column(k).into_owned())
                    .collect()
            }
        };
        let scale = self.diag.iter().fold(1.0f64, |m, d| m.max(d.abs()));
        for v in &vectors {
            let r = self.mul_vec(v.as_slice());
            let worst = r.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            if worst >= 1e-10 * scale {
                return Err(Error::Numerical(format!(
                    "null direction check failed: ||Qv||_inf = {worst:e}"
                )));
            }
        }
        Ok(vectors)
    }

    /// Coefficients `c` of the identifiability constraint `sum_i c_i theta_i = 0`:
    /// ones for ICAR, `sigma` for HomCAR, none for the proper Stern–Cressie form.
    pub fn constraint_vector(&self) -> Option<Vec<f64>> {
        match self.kind {
            CarKind::Icar => Some(vec![1.0; self.dim()]),
            CarKind::HomCar => self.sigma.clone(),
            CarKind::SternCressie { .. } => None,
        }
    }

    /// Sorted `i,j,value` rows (0-based indices) covering every stored entry.
    pub fn to_triplet_text(&self) -> String {
        let mut out = String::new();
        for i in 0..self.dim() {
            let mut entries: Vec<(usize, f64)> = self.row(i).collect();
            entries.push((i, self.diag[i]));
            entries.sort_by_key(|&(j, _)| j);
            for (j, v) in entries {
                out.push_str(&format!("{i},{j},{v}\n"));
            }
        }
        out
    }
}
