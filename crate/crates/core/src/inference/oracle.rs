//! Deterministic quadrature posterior for tiny graphs, used to check the sampler.
//!
//! For fixed `(tau_u, tau_v)` the intercept is integrated out analytically:
//! with `C = C_u / tau_u + I / tau_v` and `s = 1'C^{-1}1`,
//! `p(eta | tau) ∝ |C|^{-1/2} s^{-1/2} exp(-eta'K eta / 2)`,
//! `K = C^{-1} - C^{-1}11'C^{-1}/s`, and `E[beta0 | eta, tau] = 1'C^{-1}eta / s`.
//! `C_u` is the covariance of the unit-precision spatial effect on its
//! constraint plane, built from the pseudoinverse rather than from the
//! sampler's centred precision. The `eta` integral uses a product
//! Gauss–Hermite rule centred and scaled at the conditional mode; the
//! precisions use composite Simpson on a `log tau` grid.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::Serialize;

use super::{check_data, BymModelSpec, GammaPrior};
use crate::error::{invalid, Error, Result};

/// Largest graph the oracle accepts.
pub const MAX_ORACLE_UNITS: usize = 4;

/// Grid points whose Laplace mass is this far (in log units) below the
/// largest are skipped.
const NEGLIGIBLE_LOG_MASS: f64 = 40.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct QuadratureGrid {
    pub log_tau_min: f64,
    pub log_tau_max: f64,
    /// Odd number of Simpson nodes per precision axis.
    pub tau_points: usize,
    /// Gauss–Hermite nodes per latent dimension.
    pub hermite_order: usize,
}

impl Default for QuadratureGrid {
    fn default() -> Self {
        Self {
            log_tau_min: -6.0,
            log_tau_max: 14.0,
            tau_points: 61,
            hermite_order: 10,
        }
    }
}

impl QuadratureGrid {
    /// Same range with the precision step halved.
    pub fn refined(&self) -> Self {
        Self {
            tau_points: 2 * self.tau_points - 1,
            ..*self
        }
    }

    fn validate(&self) -> Result<()> {
        if self.tau_points < 3 || self.tau_points % 2 == 0 {
            return invalid("tau_points must be odd and at least 3");
        }
        if !(self.log_tau_min < self.log_tau_max) {
            return invalid("empty log-precision range");
        }
        if self.hermite_order < 2 {
            return invalid("hermite_order must be at least 2");
        }
        Ok(())
    }

    fn nodes(&self) -> Vec<(f64, f64)> {
        let n = self.tau_points;
        let h = (self.log_tau_max - self.log_tau_min) / (n - 1) as f64;
        (0..n)
            .map(|k| {
                let w = if k == 0 || k == n - 1 {
                    1.0
                } else if k % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                (self.log_tau_min + k as f64 * h, w * h / 3.0)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OraclePosterior {
    pub beta0_mean: f64,
    pub eta_mean: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct InterceptOnlyPosterior {
    pub mode: f64,
    pub mean: f64,
}

/// Gauss–Hermite nodes and weights for `∫ f(x) exp(-x^2) dx` (Golub–Welsch).
pub fn gauss_hermite(order: usize) -> Vec<(f64, f64)> {
    let mut jacobi = DMatrix::zeros(order, order);
    for k in 1..order {
        let b = (k as f64 / 2.0).sqrt();
        jacobi[(k, k - 1)] = b;
        jacobi[(k - 1, k)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut rule: Vec<(f64, f64)> = (0..order)
        .map(|k| {
            let v0 = eig.eigenvectors[(0, k)];
            (eig.eigenvalues[k], std::f64::consts::PI.sqrt() * v0 * v0)
        })
        .collect();
    rule.sort_by(|a, b| a.0.total_cmp(&b.0));
    rule
}

/// Posterior of `beta0` in `O ~ Poisson(E exp(beta0))` with a flat prior,
/// by adaptive Gauss–Hermite quadrature around the mode.
pub fn brute_force_intercept_only(count: u64, expected: f64, grid: &QuadratureGrid) -> Result<InterceptOnlyPosterior> {
    if count == 0 {
        return invalid("a zero count leaves the intercept posterior improper");
    }
    if !(expected > 0.0) {
        return invalid("expected count must be positive");
    }
    let o = count as f64;
    let mode = (o / expected).ln();
    let log_f = |b: f64| o * b - expected * b.exp();
    let scale = (2.0 / o).sqrt();
    let (mut z, mut m) = (0.0, 0.0);
    for (x, w) in gauss_hermite(grid.hermite_order.max(40)) {
        let b = mode + scale * x;
        let f = w * (x * x + log_f(b) - log_f(mode)).exp();
        z += f;
        m += f * b;
    }
    Ok(InterceptOnlyPosterior { mode, mean: m / z })
}

struct TauTerms {
    k: DMatrix<f64>,
    /// `C^{-1}1 / s`.
    beta_weights: DVector<f64>,
    /// `-log|C|/2 - log s/2`.
    log_norm: f64,
}

fn tau_terms(cu: &DMatrix<f64>, tau_u: f64, tau_v: f64) -> Result<TauTerms> {
    let n = cu.nrows();
    let c = cu / tau_u + DMatrix::identity(n, n) / tau_v;
    let chol = Cholesky::<f64, Dyn>::new(c).ok_or_else(|| Error::Numerical("oracle covariance not positive definite".into()))?;
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let c_inv = chol.inverse();
    let c1 = &c_inv * DVector::from_element(n, 1.0);
    let s = c1.sum();
    let k = &c_inv - &c1 * c1.transpose() / s;
    Ok(TauTerms {
        k,
        beta_weights: c1 / s,
        log_norm: -0.5 * log_det - 0.5 * s.ln(),
    })
}

/// Log integrand in `eta` (up to constants) and its Newton mode.
struct EtaTarget<'a> {
    counts: &'a [f64],
    expected: &'a [f64],
    k: &'a DMatrix<f64>,
}

impl EtaTarget<'_> {
    fn log_f(&self, eta: &DVector<f64>) -> f64 {
        let mut out = -0.5 * eta.dot(&(self.k * eta));
        for i in 0..eta.len() {
            out += self.counts[i] * eta[i] - self.expected[i] * eta[i].exp();
        }
        out
    }

    fn hessian(&self, eta: &DVector<f64>) -> DMatrix<f64> {
        let mut h = self.k.clone();
        for i in 0..eta.len() {
            h[(i, i)] += self.expected[i] * eta[i].exp();
        }
        h
    }

    fn mode(&self, start: &DVector<f64>) -> Result<DVector<f64>> {
        let mut eta = start.clone();
        let mut value = self.log_f(&eta);
        for _ in 0..200 {
            let mut grad = -(self.k * &eta);
            for i in 0..eta.len() {
                grad[i] += self.counts[i] - self.expected[i] * eta[i].exp();
            }
            let step = Cholesky::<f64, Dyn>::new(self.hessian(&eta))
                .ok_or_else(|| Error::Numerical("oracle Hessian not positive definite".into()))?
                .solve(&grad);
            let mut t = 1.0;
            loop {
                let trial = &eta + &step * t;
                let v = self.log_f(&trial);
                if v >= value || t < 1e-10 {
                    eta = trial;
                    value = v;
                    break;
                }
                t *= 0.5;
            }
            if step.amax() * t < 1e-12 {
                return Ok(eta);
            }
        }
        Ok(eta)
    }
}

/// Posterior means of `beta0` and `eta` by nested quadrature. Limited to
/// `I <= 4` units.
pub fn brute_force_posterior(
    counts: &[u64],
    expected: &[f64],
    model: &BymModelSpec,
    grid: &QuadratureGrid,
) -> Result<OraclePosterior> {
    let n = model.dim();
    if n > MAX_ORACLE_UNITS {
        return invalid(format!("quadrature oracle handles at most {MAX_ORACLE_UNITS} units, got {n}"));
    }
    grid.validate()?;
    check_data(counts, expected, n)?;

    // Covariance of the unit-precision spatial effect on c'u = 0: map the
    // pseudoinverse law along the null direction onto the constraint plane.
    let q = model.structure();
    let pinv = q.spectral()?.pseudoinverse();
    let null = &q.null_directions()?[0];
    let c = DVector::from_column_slice(model.constraint());
    let proj = DMatrix::identity(n, n) - null * c.transpose() / c.dot(null);
    let cu = &proj * pinv * proj.transpose();

    let o: Vec<f64> = counts.iter().map(|&x| x as f64).collect();
    let log_prior = |p: GammaPrior, log_tau: f64| p.shape * log_tau - p.rate * log_tau.exp();
    let hermite = gauss_hermite(grid.hermite_order);
    let nodes = grid.nodes();

    struct Point {
        log_weight: f64,
        terms: TauTerms,
        mode: DVector<f64>,
        /// `sqrt(2) V diag(lambda)^{-1/2}` from the Hessian eigenpairs.
        scale: DMatrix<f64>,
    }

    // Pass 1: modes and Laplace masses on the full precision grid.
    let start = DVector::from_iterator(n, (0..n).map(|i| ((o[i] + 0.5) / expected[i]).ln()));
    let mut points = Vec::with_capacity(nodes.len() * nodes.len());
    for &(lu, wu) in &nodes {
        let mut warm = start.clone();
        for &(lv, wv) in &nodes {
            let terms = tau_terms(&cu, lu.exp(), lv.exp())?;
            let target = EtaTarget { counts: &o, expected, k: &terms.k };
            let mode = target.mode(&warm)?;
            warm = mode.clone();
            let eig = SymmetricEigen::new(target.hessian(&mode));
            if eig.eigenvalues.min() <= 0.0 {
                return Err(Error::Numerical("oracle Hessian not positive definite".into()));
            }
            let log_det_h: f64 = eig.eigenvalues.iter().map(|d| d.ln()).sum();
            let mut scale = eig.eigenvectors.clone();
            for (k, mut col) in scale.column_iter_mut().enumerate() {
                col *= std::f64::consts::SQRT_2 / eig.eigenvalues[k].sqrt();
            }
            let log_weight = wu.ln()
                + wv.ln()
                + log_prior(model.prior_tau_u, lu)
                + log_prior(model.prior_tau_v, lv)
                + terms.log_norm
                + target.log_f(&mode)
                - 0.5 * log_det_h;
            points.push(Point { log_weight, terms, mode, scale });
        }
    }
    let peak = points.iter().map(|p| p.log_weight).fold(f64::NEG_INFINITY, f64::max);

    // Pass 2: Gauss–Hermite correction at every point with non-negligible mass.
    let (mut total, mut beta_sum) = (0.0, 0.0);
    let mut eta_sum = DVector::zeros(n);
    let m = hermite.len();
    let tuples = m.pow(n as u32);
    for p in points.iter().filter(|p| p.log_weight > peak - NEGLIGIBLE_LOG_MASS) {
        let target = EtaTarget { counts: &o, expected, k: &p.terms.k };
        let f_mode = target.log_f(&p.mode);
        let a = &p.scale;
        let (mut z_sum, mut b_sum) = (0.0, 0.0);
        let mut e_sum = DVector::zeros(n);
        let mut z = DVector::zeros(n);
        for t in 0..tuples {
            let (mut rest, mut log_w, mut zz) = (t, 0.0, 0.0);
            for d in 0..n {
                let (x, w) = hermite[rest % m];
                rest /= m;
                z[d] = x;
                log_w += w.ln();
                zz += x * x;
            }
            let eta = &p.mode + a * &z;
            let f = (log_w + zz + target.log_f(&eta) - f_mode).exp();
            z_sum += f;
            b_sum += f * p.terms.beta_weights.dot(&eta);
            e_sum += &eta * f;
        }
        // The Laplace weight already carries |H|^{-1/2}; GH at the Laplace
        // scale returns the ratio exact/Laplace times pi^{n/2}.
        let weight = (p.log_weight - peak).exp() * z_sum;
        total += weight;
        beta_sum += weight * b_sum / z_sum;
        eta_sum += e_sum * (weight / z_sum);
    }
    Ok(OraclePosterior {
        beta0_mean: beta_sum / total,
        eta_mean: (eta_sum / total).iter().copied().collect(),
    })
}
