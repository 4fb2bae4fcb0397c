//! Seeded random generation for simulation studies.
//!
//! Every stream comes from a [`SimRng`] (xoshiro256++) seeded through
//! `seed_from_u64`. Replicate `r` of a scenario with base seed `s` uses
//!
//! ```text
//! child_seed(s, r) = mix64(s ^ ((r + 1) * 0x9E3779B97F4A7C15))   (wrapping)
//! mix64(z): z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//!           z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//!           z ^ (z >> 31)
//! ```
//!
//! so each replicate is reproducible on its own, in any order.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Poisson, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::Serialize;

use crate::car::StructureMatrix;
use crate::error::{check_len, invalid, Error, Result};
use crate::graph::{distance_quantile, AdjacencyGraph};

pub type SimRng = Xoshiro256PlusPlus;

pub const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finaliser.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn child_seed(base: u64, index: u64) -> u64 {
    mix64(base ^ index.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA))
}

pub fn rng_from_seed(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

/// Draws from the intrinsic Gaussian `N(0, (tau Q)^-)`:
/// `theta = sum_{d_k > 0} (tau d_k)^{-1/2} z_k u_k`.
///
/// Samples lie in the span of the non-null eigenvectors, so they are
/// orthogonal to the null direction: `sum theta_i = 0` for ICAR and
/// `sum theta_i / sigma_i = 0` for HomCAR. Use [`project_onto_constraint`]
/// to move a HomCAR draw onto `sum sigma_i theta_i = 0` instead.
pub fn sample_constrained_gmrf(
    q: &StructureMatrix,
    tau: f64,
    seed: u64,
    n: usize,
) -> Result<Vec<DVector<f64>>> {
    if !(tau.is_finite() && tau > 0.0) {
        return invalid(format!("tau must be positive, got {tau}"));
    }
    q.graph().require_connected()?;
    let s = q.spectral()?;
    let mut rng = rng_from_seed(seed);
    let dim = q.dim();
    let scales: Vec<f64> = s.range_pairs().map(|(d, _)| (tau * d).powf(-0.5)).collect();
    Ok((0..n)
        .map(|_| {
            let mut theta = DVector::zeros(dim);
            for ((_, u), scale) in s.range_pairs().zip(&scales) {
                let z: f64 = rng.sample(StandardNormal);
                theta.axpy(scale * z, &u, 1.0);
            }
            theta
        })
        .collect())
}

/// Shifts `theta` along the null direction so that `c' theta = 0` for the
/// matrix's constraint vector `c`. The quadratic form `theta' Q theta` is
/// unchanged. Requires a connected graph.
pub fn project_onto_constraint(q: &StructureMatrix, theta: &[f64]) -> Result<Vec<f64>> {
    check_len(q.dim(), theta.len())?;
    let c = q
        .constraint_vector()
        .ok_or_else(|| Error::InvalidInput(format!("{} has no constraint", q.kind())))?;
    let nulls = q.null_directions()?;
    if nulls.len() != 1 {
        return Err(Error::Disconnected {
            components: nulls.len(),
        });
    }
    let n = &nulls[0];
    let ct: f64 = c.iter().zip(theta).map(|(a, b)| a * b).sum();
    let cn: f64 = c.iter().zip(n.iter()).map(|(a, b)| a * b).sum();
    Ok(theta.iter().zip(n.iter()).map(|(t, v)| t - v * ct / cn).collect())
}

/// `sd^2 exp(-3 d_ij / delta)`.
pub fn exp_cov_matrix(distances: &DMatrix<f64>, sd: f64, delta: f64) -> Result<DMatrix<f64>> {
    if !(sd.is_finite() && sd > 0.0) || !(delta.is_finite() && delta > 0.0) {
        return invalid(format!("sd and delta must be positive, got sd={sd}, delta={delta}"));
    }
    let var = sd * sd;
    Ok(distances.map(|d| var * (-3.0 * d / delta).exp()))
}

/// Lower Cholesky factor of a covariance, for repeated field draws.
#[derive(Clone, Debug)]
pub struct GaussianField {
    factor: DMatrix<f64>,
}

impl GaussianField {
    /// Factors `cov`; on failure adds `1e-10 * max(diag)` to the diagonal once.
    pub fn new(cov: &DMatrix<f64>) -> Result<Self> {
        if !cov.is_square() {
            return invalid("covariance must be square");
        }
        if let Some(c) = Cholesky::<f64, Dyn>::new(cov.clone()) {
            return Ok(Self { factor: c.l() });
        }
        let jitter = 1e-10 * cov.diagonal().max();
        let mut jittered = cov.clone();
        for i in 0..cov.nrows() {
            jittered[(i, i)] += jitter;
        }
        Cholesky::new(jittered)
            .map(|c| Self { factor: c.l() })
            .ok_or_else(|| Error::Numerical("covariance is not positive definite".into()))
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample(StandardNormal));
        &self.factor * z
    }
}

/// One mean-zero Gaussian draw with covariance `cov`.
pub fn sample_gaussian_field(cov: &DMatrix<f64>, seed: u64) -> Result<DVector<f64>> {
    Ok(GaussianField::new(cov)?.sample(&mut rng_from_seed(seed)))
}

/// Independent `Poisson(E_i exp(theta_i))` draws.
pub fn sample_poisson_counts(expected: &[f64], theta: &[f64], seed: u64) -> Result<Vec<u64>> {
    poisson_counts_with(&mut rng_from_seed(seed), expected, theta)
}

pub fn poisson_counts_with<R: Rng + ?Sized>(
    rng: &mut R,
    expected: &[f64],
    theta: &[f64],
) -> Result<Vec<u64>> {
    check_len(expected.len(), theta.len())?;
    expected
        .iter()
        .zip(theta)
        .map(|(e, t)| {
            let mean = e * t.exp();
            if mean == 0.0 {
                return Ok(0);
            }
            let dist = Poisson::new(mean)
                .map_err(|err| Error::InvalidInput(format!("Poisson mean {mean}: {err}")))?;
            Ok(dist.sample(rng) as u64)
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct SimulationScenario {
    #[serde(skip)]
    pub graph: Arc<AdjacencyGraph>,
    pub delta: f64,
    pub marginal_sd: f64,
    pub baseline_expected: f64,
    pub replicates: usize,
    pub base_seed: u64,
}

impl SimulationScenario {
    /// Scenario with `delta` set to the `range_quantile` quantile of the
    /// centroid distances.
    pub fn with_range_quantile(
        graph: Arc<AdjacencyGraph>,
        range_quantile: f64,
        marginal_sd: f64,
        baseline_expected: f64,
        replicates: usize,
        base_seed: u64,
    ) -> Result<Self> {
        let delta = distance_quantile(&graph.centroid_distances()?, range_quantile)?;
        let s = Self {
            graph,
            delta,
            marginal_sd,
            baseline_expected,
            replicates,
            base_seed,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return invalid("replicates must be at least 1");
        }
        if !(self.marginal_sd > 0.0 && self.delta > 0.0 && self.baseline_expected > 0.0) {
            return invalid("marginal_sd, delta and baseline_expected must be positive");
        }
        Ok(())
    }

    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        exp_cov_matrix(&self.graph.centroid_distances()?, self.marginal_sd, self.delta)
    }

    pub fn replicate_seed(&self, replicate: usize) -> u64 {
        child_seed(self.base_seed, replicate as u64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplicateData {
    pub replicate_index: usize,
    pub seed_used: u64,
    pub theta_true: Vec<f64>,
    pub counts: Vec<u64>,
}

impl ReplicateData {
    /// `unit_id,theta_true,count` rows with a header line.
    pub fn to_csv(&self, unit_ids: &[String]) -> String {
        let mut out = String::from("unit_id,theta_true,count\n");
        for ((id, t), o) in unit_ids.iter().zip(&self.theta_true).zip(&self.counts) {
            out.push_str(&format!("{id},{t},{o}\n"));
        }
        out
    }
}

/// Draws replicate `replicate` using an already factored field.
pub fn generate_replicate(
    scenario: &SimulationScenario,
    field: &GaussianField,
    replicate: usize,
) -> Result<ReplicateData> {
    let seed = scenario.replicate_seed(replicate);
    let mut rng = rng_from_seed(seed);
    let theta: Vec<f64> = field.sample(&mut rng).iter().copied().collect();
    let expected = vec![scenario.baseline_expected; theta.len()];
    let counts = poisson_counts_with(&mut rng, &expected, &theta)?;
    Ok(ReplicateData {
        replicate_index: replicate,
        seed_used: seed,
        theta_true: theta,
        counts,
    })
}

pub fn generate_scenario(scenario: &SimulationScenario) -> Result<Vec<ReplicateData>> {
    scenario.validate()?;
    let field = GaussianField::new(&scenario.covariance()?)?;
    (0..scenario.replicates)
        .into_par_iter()
        .map(|r| generate_replicate(scenario, &field, r))
        .collect()
}

/// Constraint check used by tests and callers: `|c' theta|`.
pub fn constraint_residual(q: &StructureMatrix, theta: &[f64]) -> Option<f64> {
    let c = q.constraint_vector()?;
    Some(c.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>().abs())
}
