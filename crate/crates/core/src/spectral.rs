//! Dense symmetric eigendecomposition and everything built on it:
//! Moore–Penrose pseudoinverses, the generalized-inverse family of a
//! rank-deficient structure matrix, marginal variances and the singular
//! Gaussian log-density.
//!
//! Eigenvalues with `|d| < 1e-9 * max|d|` are treated as null.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::car::StructureMatrix;
use crate::error::{check_len, invalid, Error, Result};
use crate::stats::SpreadSummary;

/// Relative threshold below which an eigenvalue counts as zero.
pub const NULL_EIGENVALUE_TOL: f64 = 1e-9;

const EIGEN_EPS: f64 = 1e-15;
const EIGEN_MAX_ITER: usize = 10_000;

#[derive(Clone, Debug)]
pub struct SpectralDecomposition {
    /// Null eigenvalues first, then the rest in ascending order.
    eigenvalues: DVector<f64>,
    /// Orthonormal eigenvectors as columns, same order as `eigenvalues`.
    eigenvectors: DMatrix<f64>,
    null_count: usize,
}

/// Free parameters of a generalized inverse `U D* U'` of a matrix with a
/// single null eigenvalue, where `D* = [[D^{-1}, x], [y', z]]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneralizedInverseSpec {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: f64,
}

impl GeneralizedInverseSpec {
    /// The spec with `x = y = 0`, `z = 0`, i.e. the Moore–Penrose pseudoinverse.
    pub fn zero(dim: usize) -> Self {
        Self {
            x: vec![0.0; dim.saturating_sub(1)],
            y: vec![0.0; dim.saturating_sub(1)],
            z: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VarianceProfile {
    pub variances: Vec<f64>,
    pub summary: SpreadSummary,
    pub tau: f64,
    /// Fingerprint of the structure matrix the variances were computed from.
    #[serde(skip)]
    pub source_fingerprint: Option<u64>,
}

impl VarianceProfile {
    pub fn from_variances(variances: Vec<f64>, tau: f64) -> Self {
        Self {
            summary: SpreadSummary::of(&variances),
            variances,
            tau,
            source_fingerprint: None,
        }
    }

    /// `unit_id,variance` rows preceded by a `#`-commented summary block.
    pub fn to_csv(&self, unit_ids: &[String], label: &str) -> String {
        let s = &self.summary;
        let mut out = format!(
            "# kind={label}\n# tau={}\n# min={}\n# median={}\n# max={}\n# max_min_ratio={}\nunit_id,variance\n",
            self.tau, s.min, s.median, s.max, s.max_min_ratio
        );
        for (id, v) in unit_ids.iter().zip(&self.variances) {
            out.push_str(&format!("{id},{v}\n"));
        }
        out
    }
}

impl SpectralDecomposition {
    /// Decomposes a symmetric matrix and verifies orthonormality and reconstruction.
    pub fn of_symmetric(m: &DMatrix<f64>) -> Result<Self> {
        let n = m.nrows();
        if m.ncols() != n {
            return invalid("eigendecomposition needs a square matrix");
        }
        let scale = m.amax().max(f64::MIN_POSITIVE);
        if (m - m.transpose()).amax() > 1e-12 * scale {
            return invalid("matrix is not symmetric");
        }
        let eig = SymmetricEigen::try_new(m.clone(), EIGEN_EPS, EIGEN_MAX_ITER)
            .ok_or_else(|| Error::Numerical("symmetric eigen routine did not converge".into()))?;

        let max_abs = eig.eigenvalues.amax();
        let is_null = |d: f64| d.abs() < NULL_EIGENVALUE_TOL * max_abs || max_abs == 0.0;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            let (da, db) = (eig.eigenvalues[a], eig.eigenvalues[b]);
            is_null(db)
                .cmp(&is_null(da))
                .then(da.total_cmp(&db))
        });
        let eigenvalues = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
        let mut eigenvectors = DMatrix::zeros(n, n);
        for (dst, &src) in order.iter().enumerate() {
            eigenvectors.set_column(dst, &eig.eigenvectors.column(src));
        }
        let null_count = eigenvalues.iter().filter(|&&d| is_null(d)).count();

        let s = Self {
            eigenvalues,
            eigenvectors,
            null_count,
        };
        let ortho = (s.eigenvectors.transpose() * &s.eigenvectors - DMatrix::identity(n, n)).amax();
        if ortho >= 1e-9 {
            return Err(Error::Numerical(format!("eigenvectors not orthonormal ({ortho:e})")));
        }
        let recon = (s.reconstruct() - m).amax();
        if recon >= 1e-8 * scale.max(1.0) {
            return Err(Error::Numerical(format!("eigendecomposition residual {recon:e}")));
        }
        Ok(s)
    }

    /// Decomposes a structure matrix; for intrinsic kinds the null count must
    /// equal the number of connected components of the source graph.
    pub fn of_structure(q: &StructureMatrix) -> Result<Self> {
        let s = Self::of_symmetric(&q.to_dense())?;
        if q.kind().is_intrinsic() {
            let components = q.graph().connected_components().component_count;
            if s.null_count != components {
                return Err(Error::Numerical(format!(
                    "{} null eigenvalues but {components} connected components",
                    s.null_count
                )));
            }
        }
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn null_count(&self) -> usize {
        self.null_count
    }

    fn reconstruct(&self) -> DMatrix<f64> {
        let scaled = &self.eigenvectors * DMatrix::from_diagonal(&self.eigenvalues);
        scaled * self.eigenvectors.transpose()
    }

    /// Non-null eigenpairs `(d_k, u_k)`.
    pub fn range_pairs(&self) -> impl Iterator<Item = (f64, nalgebra::DVectorView<'_, f64>)> {
        (self.null_count..self.dim()).map(move |k| (self.eigenvalues[k], self.eigenvectors.column(k)))
    }

    /// `U D^- U'`: reciprocal non-null eigenvalues, zero on the null space.
    pub fn pseudoinverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        let r = self.null_count;
        let range = self.eigenvectors.columns(r, n - r);
        let inv = DVector::from_iterator(n - r, self.eigenvalues.rows(r, n - r).iter().map(|d| 1.0 / d));
        let scaled = range * DMatrix::from_diagonal(&inv);
        scaled * range.transpose()
    }

    /// Diagonal of the pseudoinverse without forming it.
    pub fn pseudoinverse_diagonal(&self) -> Vec<f64> {
        let n = self.dim();
        (0..n)
            .map(|i| {
                self.range_pairs()
                    .map(|(d, u)| u[i] * u[i] / d)
                    .sum()
            })
            .collect()
    }

    /// `U D* U'` for the generalized-inverse family of a matrix with exactly
    /// one null eigenvalue.
    pub fn generalized_inverse(&self, spec: &GeneralizedInverseSpec) -> Result<DMatrix<f64>> {
        let n = self.dim();
        if self.null_count != 1 {
            return invalid(format!(
                "generalized-inverse family is parametrised for rank deficiency 1, found {}",
                self.null_count
            ));
        }
        check_len(n - 1, spec.x.len())?;
        check_len(n - 1, spec.y.len())?;
        // Basis order: non-null eigenvectors first, null eigenvector last.
        let mut basis = DMatrix::zeros(n, n);
        for k in 1..n {
            basis.set_column(k - 1, &self.eigenvectors.column(k));
        }
        basis.set_column(n - 1, &self.eigenvectors.column(0));
        let mut d_star = DMatrix::zeros(n, n);
        for k in 0..n - 1 {
            d_star[(k, k)] = 1.0 / self.eigenvalues[k + 1];
            d_star[(k, n - 1)] = spec.x[k];
            d_star[(n - 1, k)] = spec.y[k];
        }
        d_star[(n - 1, n - 1)] = spec.z;
        Ok(&basis * d_star * basis.transpose())
    }
}

pub fn eigendecompose(q: &StructureMatrix) -> Result<SpectralDecomposition> {
    SpectralDecomposition::of_structure(q)
}

pub fn moore_penrose(q: &StructureMatrix) -> Result<DMatrix<f64>> {
    Ok(q.spectral()?.pseudoinverse())
}

pub fn generalized_inverse(q: &StructureMatrix, spec: &GeneralizedInverseSpec) -> Result<DMatrix<f64>> {
    q.spectral()?.generalized_inverse(spec)
}

/// Marginal variances `diag((tau Q)^-) = diag(Q^-) / tau`.
pub fn marginal_variances(q: &StructureMatrix, tau: f64) -> Result<VarianceProfile> {
    if !(tau.is_finite() && tau > 0.0) {
        return invalid(format!("tau must be positive, got {tau}"));
    }
    let variances = q
        .spectral()?
        .pseudoinverse_diagonal()
        .into_iter()
        .map(|v| v / tau)
        .collect();
    let mut profile = VarianceProfile::from_variances(variances, tau);
    profile.source_fingerprint = Some(q.fingerprint());
    Ok(profile)
}

/// Log-density of `N(mu, (tau Q)^-)` on its support `{theta : theta - mu ⟂ null(Q)}`.
///
/// With `spec` the quadratic form is evaluated as `r' S^g r` where `S^g` is
/// the member of the generalized-inverse family of the covariance `(tau Q)^-`
/// selected by `spec`; the value must agree with the precision form to 1e-8.
pub fn singular_normal_logdensity(
    theta: &[f64],
    mu: &[f64],
    q: &StructureMatrix,
    tau: f64,
    spec: Option<&GeneralizedInverseSpec>,
) -> Result<f64> {
    logdensity_with(q.spectral()?, theta, mu, tau, spec)
}

pub(crate) fn logdensity_with(
    s: &SpectralDecomposition,
    theta: &[f64],
    mu: &[f64],
    tau: f64,
    spec: Option<&GeneralizedInverseSpec>,
) -> Result<f64> {
    let n = s.dim();
    check_len(n, theta.len())?;
    check_len(n, mu.len())?;
    if !(tau.is_finite() && tau > 0.0) {
        return invalid(format!("tau must be positive, got {tau}"));
    }
    let r = DVector::from_iterator(n, theta.iter().zip(mu).map(|(t, m)| t - m));
    let tol = 1e-8 * r.norm().max(1.0);
    for k in 0..s.null_count {
        let proj = s.eigenvectors.column(k).dot(&r);
        if proj.abs() >= tol {
            return invalid(format!(
                "theta - mu has component {proj:e} along a null direction; outside the support"
            ));
        }
    }

    let log_det: f64 = s.range_pairs().map(|(d, _)| (tau * d).ln()).sum();
    let quad_precision: f64 = s.range_pairs().map(|(d, u)| tau * d * u.dot(&r).powi(2)).sum();
    let quad = match spec {
        None => quad_precision,
        Some(spec) => {
            // The covariance (tau Q)^- has eigenvalues 1/(tau d) on the same
            // basis; its own g-inverse family is U [[diag(tau d), x], [y', z]] U'.
            let covariance = SpectralDecomposition {
                eigenvalues: DVector::from_iterator(
                    n,
                    (0..n).map(|k| if k < s.null_count { 0.0 } else { 1.0 / (tau * s.eigenvalues[k]) }),
                ),
                eigenvectors: s.eigenvectors.clone(),
                null_count: s.null_count,
            };
            let g = covariance.generalized_inverse(spec)?;
            let via_g = (r.transpose() * g * &r)[(0, 0)];
            if (via_g - quad_precision).abs() > 1e-8 * quad_precision.abs().max(1.0) {
                return Err(Error::Numerical(format!(
                    "quadratic form differs between routes: {via_g} vs {quad_precision}"
                )));
            }
            via_g
        }
    };
    let rank = (n - s.null_count) as f64;
    Ok(-0.5 * rank * (2.0 * PI).ln() + 0.5 * log_det - 0.5 * quad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::car::build_icar;
    use crate::graph::parse_graph;

    fn p3_icar() -> StructureMatrix {
        build_icar(parse_graph("a,b\nb,c", None).unwrap()).unwrap()
    }

    #[test]
    fn eigenvalues_of_small_matrices() {
        let s = eigendecompose(&p3_icar()).unwrap();
        assert_eq!(s.null_count(), 1);
        for (d, e) in s.eigenvalues().iter().zip([0.0, 1.0, 3.0]) {
            assert!((d - e).abs() < 1e-12);
        }
        let two = build_icar(parse_graph("a,b", None).unwrap()).unwrap();
        let s = eigendecompose(&two).unwrap();
        assert!((s.eigenvalues()[1] - 2.0).abs() < 1e-12);
        let id = SpectralDecomposition::of_symmetric(&DMatrix::identity(3, 3)).unwrap();
        assert_eq!(id.null_count(), 0);
        assert!(id.eigenvalues().iter().all(|&d| (d - 1.0).abs() < 1e-15));
    }

    #[test]
    fn rejects_asymmetric() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(SpectralDecomposition::of_symmetric(&m).is_err());
    }

    #[test]
    fn pseudoinverse_examples() {
        let pinv = moore_penrose(&p3_icar()).unwrap();
        let expected = DMatrix::from_row_slice(3, 3, &[5., -1., -4., -1., 2., -1., -4., -1., 5.]) / 9.0;
        assert!((pinv - expected).amax() < 1e-12);

        let two = build_icar(parse_graph("a,b", None).unwrap()).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1., -1., -1., 1.]) / 4.0;
        assert!((moore_penrose(&two).unwrap() - expected).amax() < 1e-12);

        let m = DMatrix::from_row_slice(3, 3, &[4., 1., 0., 1., 3., 1., 0., 1., 2.]);
        let s = SpectralDecomposition::of_symmetric(&m).unwrap();
        let inv = m.try_inverse().unwrap();
        assert!((s.pseudoinverse() - inv).amax() < 1e-10);
    }

    #[test]
    fn marginal_variance_examples() {
        let q = p3_icar();
        let p = marginal_variances(&q, 1.0).unwrap();
        for (v, e) in p.variances.iter().zip([5. / 9., 2. / 9., 5. / 9.]) {
            assert!((v - e).abs() < 1e-12);
        }
        assert!((p.summary.max_min_ratio - 2.5).abs() < 1e-10);
        let p = marginal_variances(&q, 4.0).unwrap();
        for (v, e) in p.variances.iter().zip([5. / 36., 1. / 18., 5. / 36.]) {
            assert!((v - e).abs() < 1e-12);
        }
        let two = build_icar(parse_graph("a,b", None).unwrap()).unwrap();
        let p = marginal_variances(&two, 1.0).unwrap();
        assert!((p.variances[0] - 0.25).abs() < 1e-12);
        assert!((p.summary.max_min_ratio - 1.0).abs() < 1e-10);
        assert!(marginal_variances(&q, 0.0).is_err());
    }

    #[test]
    fn generalized_inverse_family() {
        let q = p3_icar();
        let dense = q.to_dense();
        let mp = generalized_inverse(&q, &GeneralizedInverseSpec::zero(3)).unwrap();
        assert!((&mp - moore_penrose(&q).unwrap()).amax() < 1e-12);

        let spec = GeneralizedInverseSpec {
            x: vec![0.3, -1.2],
            y: vec![2.0, 0.1],
            z: 5.0,
        };
        let g = generalized_inverse(&q, &spec).unwrap();
        assert!((&dense * &g * &dense - &dense).amax() < 1e-8);
        assert!((&g - g.transpose()).amax() > 1e-3);

        let two = build_icar(parse_graph("a,b\nc,d", None).unwrap()).unwrap();
        assert!(generalized_inverse(&two, &GeneralizedInverseSpec::zero(4)).is_err());
        let short = GeneralizedInverseSpec { x: vec![0.0], y: vec![0.0, 0.0], z: 0.0 };
        assert!(generalized_inverse(&q, &short).is_err());
    }

    #[test]
    fn logdensity_examples() {
        let q = p3_icar();
        let mu = [0.1, -0.2, 0.1];
        let base = -(2.0 / 2.0) * (2.0 * PI).ln() + 0.5 * (1.0f64.ln() + 3.0f64.ln());
        let at_mean = singular_normal_logdensity(&mu, &mu, &q, 1.0, None).unwrap();
        assert!((at_mean - base).abs() < 1e-12);

        // Eigenvector with d = 1 and unit norm: quadratic term is -1/2.
        let h = 0.5f64.sqrt();
        let theta = [mu[0] + h, mu[1], mu[2] - h];
        let value = singular_normal_logdensity(&theta, &mu, &q, 1.0, None).unwrap();
        assert!((value - (base - 0.5)).abs() < 1e-12);

        let spec = GeneralizedInverseSpec { x: vec![1.0, -4.0], y: vec![0.5, 3.0], z: -2.0 };
        let via_g = singular_normal_logdensity(&theta, &mu, &q, 1.0, Some(&spec)).unwrap();
        assert!((via_g - value).abs() < 1e-8);

        assert!(singular_normal_logdensity(&[1.0, 1.0, 1.0], &[0.0; 3], &q, 1.0, None).is_err());
    }

    #[test]
    fn variance_profile_csv() {
        let q = p3_icar();
        let p = marginal_variances(&q, 1.0).unwrap();
        let csv = p.to_csv(q.graph().unit_ids(), "icar");
        assert!(csv.starts_with("# kind=icar\n# tau=1\n"));
        assert!(csv.contains("unit_id,variance\na,0.55555555555555"));
        assert_eq!(csv.lines().count(), 10);
    }
}
