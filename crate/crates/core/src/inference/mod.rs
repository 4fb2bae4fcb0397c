//! Poisson log-normal BYM model with an ICAR or HomCAR spatial effect,
//! fitted by Metropolis-within-Gibbs.
//!
//! `O_i ~ Poisson(E_i exp(eta_i))`, `eta_i = beta0 + u_i + v_i`, `u` intrinsic
//! CAR with precision `tau_u Q` restricted to `c'u = 0`, `v_i ~ N(0, 1/tau_v)`,
//! flat prior on `beta0`, gamma priors on both precisions.

mod oracle;

pub use oracle::{
    brute_force_intercept_only, brute_force_posterior, gauss_hermite, InterceptOnlyPosterior,
    OraclePosterior, QuadratureGrid,
};

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::car::{CarKind, StructureMatrix};
use crate::error::{check_len, invalid, Error, Result};
use crate::metrics::PointwiseLogLik;
use crate::sampling::{child_seed, rng_from_seed, SimRng};
use crate::stats::{mean, quantile_sorted, sample_variance};

pub const RHAT_THRESHOLD: f64 = 1.05;

/// Number of linear-predictor components monitored by split-R-hat.
pub const MONITORED_ETA: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

impl GammaPrior {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        if !(shape > 0.0 && rate > 0.0 && shape.is_finite() && rate.is_finite()) {
            return invalid(format!("gamma prior needs positive parameters, got ({shape}, {rate})"));
        }
        Ok(Self { shape, rate })
    }
}

impl Default for GammaPrior {
    fn default() -> Self {
        Self { shape: 1.0, rate: 5e-5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SpatialKind {
    Icar,
    HomCar,
}

impl SpatialKind {
    pub fn label(self) -> &'static str {
        match self {
            SpatialKind::Icar => "bym",
            SpatialKind::HomCar => "homcar",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BymModelSpec {
    spatial_kind: SpatialKind,
    structure: StructureMatrix,
    constraint: Vec<f64>,
    pub prior_tau_u: GammaPrior,
    pub prior_tau_v: GammaPrior,
}

impl BymModelSpec {
    /// Spatial kind follows the structure: ICAR gives the classical BYM model,
    /// HomCAR its homogeneous-variance variant.
    pub fn new(structure: StructureMatrix) -> Result<Self> {
        let spatial_kind = match structure.kind() {
            CarKind::Icar => SpatialKind::Icar,
            CarKind::HomCar => SpatialKind::HomCar,
            other => return invalid(format!("BYM spatial effect must be intrinsic, got {other}")),
        };
        structure.graph().require_connected()?;
        let constraint = structure.constraint_vector().expect("intrinsic kinds carry a constraint");
        Ok(Self {
            spatial_kind,
            structure,
            constraint,
            prior_tau_u: GammaPrior::default(),
            prior_tau_v: GammaPrior::default(),
        })
    }

    pub fn with_priors(mut self, tau_u: GammaPrior, tau_v: GammaPrior) -> Self {
        self.prior_tau_u = tau_u;
        self.prior_tau_v = tau_v;
        self
    }

    pub fn spatial_kind(&self) -> SpatialKind {
        self.spatial_kind
    }

    pub fn structure(&self) -> &StructureMatrix {
        &self.structure
    }

    pub fn constraint(&self) -> &[f64] {
        &self.constraint
    }

    pub fn dim(&self) -> usize {
        self.structure.dim()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct McmcConfig {
    pub chains: usize,
    pub burn_in: usize,
    /// Post-burn-in iterations per chain; every `thinning`-th one is kept.
    pub samples_per_chain: usize,
    pub thinning: usize,
    pub seed: u64,
    pub adaptation_target: f64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            burn_in: 5000,
            samples_per_chain: 5000,
            thinning: 5,
            seed: 1,
            adaptation_target: 0.44,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains < 2 {
            return invalid("at least 2 chains are needed for split R-hat");
        }
        if self.burn_in == 0 || self.samples_per_chain == 0 || self.thinning == 0 {
            return invalid("burn_in, samples_per_chain and thinning must be positive");
        }
        if self.thinning > self.samples_per_chain {
            return invalid("thinning exceeds samples_per_chain");
        }
        if !(self.adaptation_target > 0.0 && self.adaptation_target < 1.0) {
            return invalid("adaptation_target must lie in (0,1)");
        }
        Ok(())
    }

    pub fn retained_per_chain(&self) -> usize {
        self.samples_per_chain / self.thinning
    }

    pub fn retained_total(&self) -> usize {
        self.chains * self.retained_per_chain()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ParamSummary {
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
}

impl ParamSummary {
    pub fn of(values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self {
            mean: mean(values),
            sd: if values.len() > 1 { sample_variance(values).sqrt() } else { 0.0 },
            q025: quantile_sorted(&sorted, 0.025),
            q975: quantile_sorted(&sorted, 0.975),
        }
    }
}

/// Retained draws, chain-major: draw `k` of chain `c` is row `c * per_chain + k`.
#[derive(Clone, Debug, PartialEq)]
pub struct BymDraws {
    pub chains: usize,
    pub per_chain: usize,
    pub beta0: Vec<f64>,
    pub tau_u: Vec<f64>,
    pub tau_v: Vec<f64>,
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub eta: DMatrix<f64>,
}

impl BymDraws {
    pub fn len(&self) -> usize {
        self.beta0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta0.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RhatEntry {
    pub name: String,
    pub rhat: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub rhat: Vec<RhatEntry>,
    pub max_rhat: f64,
    pub converged: bool,
    /// Mean post-burn-in acceptance rate over the `u_i` and `v_i` updates.
    pub acceptance_u: f64,
    pub acceptance_v: f64,
    /// Largest `|c'u|` seen after any sweep, burn-in included.
    pub max_constraint_residual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BymFit {
    pub spatial_kind: SpatialKind,
    pub unit_ids: Vec<String>,
    pub counts: Vec<u64>,
    pub expected: Vec<f64>,
    pub beta0: ParamSummary,
    pub tau_u: ParamSummary,
    pub tau_v: ParamSummary,
    pub u: Vec<ParamSummary>,
    pub v: Vec<ParamSummary>,
    pub eta: Vec<ParamSummary>,
    pub draws: BymDraws,
    pub log_lik: PointwiseLogLik,
    pub diagnostics: ConvergenceReport,
}

impl BymFit {
    pub fn converged(&self) -> bool {
        self.diagnostics.converged
    }

    /// `unit_id,eta_mean,eta_sd,eta_q025,eta_q975`.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("unit_id,eta_mean,eta_sd,eta_q025,eta_q975\n");
        for (id, s) in self.unit_ids.iter().zip(&self.eta) {
            writeln!(out, "{id},{},{},{},{}", s.mean, s.sd, s.q025, s.q975).unwrap();
        }
        out
    }

    /// `parameter,mean,sd,q025,q975,rhat`; precisions are monitored on the log scale.
    pub fn hyperparameter_csv(&self) -> String {
        let mut out = String::from("parameter,mean,sd,q025,q975,rhat\n");
        let rhat = |name: &str| {
            self.diagnostics
                .rhat
                .iter()
                .find(|r| r.name == name)
                .map_or(f64::NAN, |r| r.rhat)
        };
        for (name, key, s) in [
            ("beta0", "beta0", &self.beta0),
            ("tau_u", "log_tau_u", &self.tau_u),
            ("tau_v", "log_tau_v", &self.tau_v),
        ] {
            writeln!(out, "{name},{},{},{},{},{}", s.mean, s.sd, s.q025, s.q975, rhat(key)).unwrap();
        }
        out
    }

    /// Draw-major raw samples: `chain,draw,beta0,tau_u,tau_v,u_<id>...,v_<id>...`.
    pub fn draws_csv(&self) -> String {
        let d = &self.draws;
        let mut out = String::from("chain,draw,beta0,tau_u,tau_v");
        for prefix in ["u", "v"] {
            for id in &self.unit_ids {
                write!(out, ",{prefix}_{id}").unwrap();
            }
        }
        out.push('\n');
        for s in 0..d.len() {
            write!(out, "{},{},{},{},{}", s / d.per_chain, s % d.per_chain, d.beta0[s], d.tau_u[s], d.tau_v[s])
                .unwrap();
            for m in [&d.u, &d.v] {
                for x in m.row(s).iter() {
                    write!(out, ",{x}").unwrap();
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Per-unit posterior mean of the linear predictor. A non-converged fit is
/// rejected unless `allow_unconverged` is set.
pub fn posterior_mean_map(fit: &BymFit, allow_unconverged: bool) -> Result<Vec<f64>> {
    if !fit.converged() && !allow_unconverged {
        return Err(Error::NotConverged {
            max_rhat: fit.diagnostics.max_rhat,
            threshold: RHAT_THRESHOLD,
        });
    }
    Ok(fit.eta.iter().map(|s| s.mean).collect())
}

/// `ln(n!)`, exact summation for small `n` and a Stirling series beyond.
pub(crate) fn ln_factorial(n: u64) -> f64 {
    if n < 256 {
        (2..=n).map(|k| (k as f64).ln()).sum()
    } else {
        let x = n as f64;
        x * x.ln() - x + 0.5 * (2.0 * std::f64::consts::PI * x).ln() + 1.0 / (12.0 * x)
            - 1.0 / (360.0 * x.powi(3))
    }
}

/// Poisson log-probability of `o` at mean `e * exp(eta)`.
pub(crate) fn poisson_log_lik(o: u64, e: f64, eta: f64, ln_fact: f64) -> f64 {
    let mu = e * eta.exp();
    o as f64 * (e.ln() + eta) - mu - ln_fact
}

/// Gamma full conditional of a precision: shape `a + rank/2`, rate `b + quad/2`.
pub fn sample_precision<R: Rng + ?Sized>(rng: &mut R, prior: GammaPrior, rank: usize, quad: f64) -> f64 {
    let shape = prior.shape + rank as f64 / 2.0;
    let rate = prior.rate + quad / 2.0;
    Gamma::new(shape, 1.0 / rate).expect("valid gamma parameters").sample(rng)
}

/// Split potential-scale-reduction factor over equal-length chains.
pub fn split_rhat(chains: &[&[f64]]) -> f64 {
    let half = chains.iter().map(|c| c.len()).min().unwrap_or(0) / 2;
    if chains.is_empty() || half < 2 {
        return f64::NAN;
    }
    let mut pieces: Vec<&[f64]> = Vec::with_capacity(2 * chains.len());
    for c in chains {
        pieces.push(&c[..half]);
        pieces.push(&c[c.len() - half..]);
    }
    let n = half as f64;
    let means: Vec<f64> = pieces.iter().map(|p| mean(p)).collect();
    let w = mean(&pieces.iter().map(|p| sample_variance(p)).collect::<Vec<_>>());
    let b_over_n = sample_variance(&means);
    if w == 0.0 {
        return if b_over_n == 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (n - 1.0) / n * w + b_over_n;
    (var_plus / w).sqrt()
}

/// Indices of the monitored linear-predictor components, evenly spread.
pub fn monitored_units(n: usize) -> Vec<usize> {
    if n <= MONITORED_ETA {
        return (0..n).collect();
    }
    (0..MONITORED_ETA)
        .map(|k| k * (n - 1) / (MONITORED_ETA - 1))
        .collect()
}

/// Precision `M = P'QP`, `P = I - 1c'/(c'1)`, of the constrained spatial
/// effect extended along the direction `1`. On `c'u = 0` it agrees with `Q`,
/// and `M 1 = 0`, so shifting `u` along `1` against `beta0` leaves the
/// posterior unchanged.
struct CenteredPrior<'a> {
    q: &'a StructureMatrix,
    c: &'a [f64],
    /// `r = Q 1`.
    r: Vec<f64>,
    /// `k = c'1`.
    k: f64,
    /// `b = 1'Q1`.
    b: f64,
    m_diag: Vec<f64>,
}

/// Number of smoothest structure eigen-directions given their own moves.
pub const SMOOTH_MODES: usize = 8;

/// A direction `w` on `c'w = 0` with cached `Qw`, `Mw`, `w'Mw` and `r'w`.
struct Mode {
    w: Vec<f64>,
    qw: Vec<f64>,
    mw: Vec<f64>,
    wmw: f64,
    rw: f64,
}

impl<'a> CenteredPrior<'a> {
    /// Projects the `SMOOTH_MODES` lowest non-null eigenvectors of `Q` onto
    /// `c'w = 0`; `Pw = w` there, so `Mw = P'Qw`.
    fn modes(&self) -> Result<Vec<Mode>> {
        let spec = self.q.spectral()?;
        let n = self.q.dim();
        let start = spec.null_count();
        let end = (start + SMOOTH_MODES).min(n);
        let mut modes = Vec::with_capacity(end - start);
        for k in start..end {
            let e = spec.eigenvectors().column(k);
            let ce: f64 = self.c.iter().zip(e.iter()).map(|(a, b)| a * b).sum();
            let mut w: Vec<f64> = e.iter().map(|x| x - ce / self.k).collect();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            w.iter_mut().for_each(|x| *x /= norm);
            let qw = self.q.mul_vec(&w);
            let one_qw: f64 = qw.iter().sum();
            let mw: Vec<f64> = (0..n).map(|i| qw[i] - self.c[i] * one_qw / self.k).collect();
            let wmw = w.iter().zip(&mw).map(|(a, b)| a * b).sum();
            let rw = self.r.iter().zip(&w).map(|(a, b)| a * b).sum();
            modes.push(Mode { w, qw, mw, wmw, rw });
        }
        Ok(modes)
    }

    fn new(q: &'a StructureMatrix, c: &'a [f64]) -> Self {
        let r = q.mul_vec(&vec![1.0; q.dim()]);
        let k: f64 = c.iter().sum();
        let b: f64 = r.iter().sum();
        let m_diag = (0..q.dim())
            .map(|i| q.diagonal()[i] - 2.0 * c[i] * r[i] / k + c[i] * c[i] * b / (k * k))
            .collect();
        Self { q, c, r, k, b, m_diag }
    }

    /// `(M u)_i` from cached `Qu`, `r'u` and `c'u`.
    fn mu(&self, i: usize, qu: &[f64], ru: f64, cu: f64) -> f64 {
        let k = self.k;
        qu[i] - self.c[i] * ru / k - self.r[i] * cu / k + self.c[i] * cu * self.b / (k * k)
    }
}

struct Data<'a> {
    counts: &'a [u64],
    expected: &'a [f64],
    total_count: f64,
}

struct ChainOutput {
    beta0: Vec<f64>,
    tau_u: Vec<f64>,
    tau_v: Vec<f64>,
    u: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    accept_u: f64,
    accept_v: f64,
    max_residual: f64,
}

struct Chain<'a> {
    data: &'a Data<'a>,
    prior: &'a CenteredPrior<'a>,
    modes: &'a [Mode],
    log_mode_step: Vec<f64>,
    model: &'a BymModelSpec,
    rng: SimRng,
    beta0: f64,
    u: Vec<f64>,
    v: Vec<f64>,
    eta: Vec<f64>,
    tau_u: f64,
    tau_v: f64,
    qu: Vec<f64>,
    ru: f64,
    cu: f64,
    log_step_u: Vec<f64>,
    log_step_v: Vec<f64>,
    /// Log step of the joint (effect, precision) scale moves for u and v.
    log_scale_step: [f64; 2],
    accepted_u: u64,
    accepted_v: u64,
    max_residual: f64,
}

impl<'a> Chain<'a> {
    fn new(
        data: &'a Data<'a>,
        prior: &'a CenteredPrior<'a>,
        modes: &'a [Mode],
        model: &'a BymModelSpec,
        seed: u64,
    ) -> Self {
        let n = data.counts.len();
        let mut rng = rng_from_seed(seed);
        let jitter = |rng: &mut SimRng, sd: f64| sd * rng.sample::<f64, _>(StandardNormal);
        let base = ((data.total_count + 0.5) / data.expected.iter().sum::<f64>()).ln();
        let beta0 = base + jitter(&mut rng, 0.1);
        let u: Vec<f64> = (0..n).map(|_| jitter(&mut rng, 0.1)).collect();
        let v: Vec<f64> = (0..n).map(|_| jitter(&mut rng, 0.1)).collect();
        let tau_u = (10f64.ln() + jitter(&mut rng, 1.0)).exp();
        let tau_v = (10f64.ln() + jitter(&mut rng, 1.0)).exp();
        let log_step_u = (0..n)
            .map(|i| -0.5 * (tau_u * prior.m_diag[i] + data.counts[i] as f64 + 1.0).ln())
            .collect();
        let log_step_v = (0..n)
            .map(|i| -0.5 * (tau_v + data.counts[i] as f64 + 1.0).ln())
            .collect();
        let mut chain = Self {
            data,
            prior,
            modes,
            log_mode_step: vec![-1.0; modes.len()],
            model,
            rng,
            beta0,
            u,
            v,
            eta: vec![0.0; n],
            tau_u,
            tau_v,
            qu: vec![],
            ru: 0.0,
            cu: 0.0,
            log_step_u,
            log_step_v,
            log_scale_step: [-1.0, -1.0],
            accepted_u: 0,
            accepted_v: 0,
            max_residual: 0.0,
        };
        chain.recenter();
        chain
    }

    fn refresh(&mut self) {
        self.qu = self.prior.q.mul_vec(&self.u);
        self.ru = self.prior.r.iter().zip(&self.u).map(|(a, b)| a * b).sum();
        self.cu = self.prior.c.iter().zip(&self.u).map(|(a, b)| a * b).sum();
        for i in 0..self.u.len() {
            self.eta[i] = self.beta0 + self.u[i] + self.v[i];
        }
    }

    /// Moves `u` onto `c'u = 0` and compensates in `beta0`.
    fn recenter(&mut self) {
        let shift = self.prior.c.iter().zip(&self.u).map(|(a, b)| a * b).sum::<f64>() / self.prior.k;
        for x in &mut self.u {
            *x -= shift;
        }
        self.beta0 += shift;
        self.refresh();
        self.max_residual = self.max_residual.max(self.cu.abs());
    }

    fn log_lik_delta(&self, i: usize, delta: f64) -> f64 {
        let mu = self.data.expected[i] * self.eta[i].exp();
        self.data.counts[i] as f64 * delta - mu * delta.exp_m1()
    }

    /// Proposes `x -> c x`, `tau -> tau / c^2` for `x = u` (`which = 0`) or
    /// `x = v`. The prior quadratic form is unchanged; what is left is the
    /// likelihood, the Jacobian and the gamma prior, which give
    /// `-2 a log c - b tau (c^-2 - 1)`.
    fn scale_move(&mut self, which: usize, adapt_gain: Option<f64>, target: f64) {
        let log_c = self.log_scale_step[which].exp() * self.rng.sample::<f64, _>(StandardNormal);
        let c = log_c.exp();
        let (x, tau, prior) = if which == 0 {
            (&self.u, self.tau_u, self.model.prior_tau_u)
        } else {
            (&self.v, self.tau_v, self.model.prior_tau_v)
        };
        let mut d_lik = 0.0;
        for i in 0..x.len() {
            let d = (c - 1.0) * x[i];
            d_lik += self.data.counts[i] as f64 * d - self.data.expected[i] * self.eta[i].exp() * d.exp_m1();
        }
        let log_ratio = d_lik - 2.0 * prior.shape * log_c - prior.rate * tau * ((-2.0 * log_c).exp() - 1.0);
        let ok = self.accept(log_ratio);
        if ok {
            let tau = tau / (c * c);
            if which == 0 {
                self.u.iter_mut().for_each(|x| *x *= c);
                self.qu.iter_mut().for_each(|x| *x *= c);
                self.ru *= c;
                self.cu *= c;
                self.tau_u = tau;
            } else {
                self.v.iter_mut().for_each(|x| *x *= c);
                self.tau_v = tau;
            }
            for i in 0..self.u.len() {
                self.eta[i] = self.beta0 + self.u[i] + self.v[i];
            }
        }
        if let Some(g) = adapt_gain {
            let s = &mut self.log_scale_step[which];
            *s = (*s + g * (f64::from(ok as u8) - target)).clamp(-10.0, 2.0);
        }
    }

    /// Random-walk move of `u` along smooth direction `k`.
    fn mode_move(&mut self, k: usize, adapt_gain: Option<f64>, target: f64) {
        let mode = &self.modes[k];
        let delta = self.log_mode_step[k].exp() * self.rng.sample::<f64, _>(StandardNormal);
        let mwu: f64 = mode.mw.iter().zip(&self.u).map(|(a, b)| a * b).sum();
        let mut d_lik = 0.0;
        for (i, w) in mode.w.iter().enumerate() {
            let d = delta * w;
            d_lik += self.data.counts[i] as f64 * d - self.data.expected[i] * self.eta[i].exp() * d.exp_m1();
        }
        let d_prior = -0.5 * self.tau_u * (2.0 * delta * mwu + delta * delta * mode.wmw);
        let ok = self.accept(d_prior + d_lik);
        if ok {
            for i in 0..self.u.len() {
                self.u[i] += delta * mode.w[i];
                self.eta[i] += delta * mode.w[i];
                self.qu[i] += delta * mode.qw[i];
            }
            self.ru += delta * mode.rw;
        }
        if let Some(g) = adapt_gain {
            let s = &mut self.log_mode_step[k];
            *s = (*s + g * (f64::from(ok as u8) - target)).clamp(-15.0, 3.0);
        }
    }

    fn accept(&mut self, log_ratio: f64) -> bool {
        log_ratio >= 0.0 || self.rng.random::<f64>().ln() < log_ratio
    }

    /// One full sweep. With `adapt_gain` set, proposal scales move towards `target` acceptance.
    fn sweep(&mut self, adapt_gain: Option<f64>, target: f64) {
        let n = self.u.len();
        for i in 0..n {
            let step = self.log_step_u[i].exp();
            let delta = step * self.rng.sample::<f64, _>(StandardNormal);
            let mu = self.prior.mu(i, &self.qu, self.ru, self.cu);
            let d_prior = -0.5 * self.tau_u * (2.0 * delta * mu + delta * delta * self.prior.m_diag[i]);
            let ok = self.accept(d_prior + self.log_lik_delta(i, delta));
            if ok {
                self.u[i] += delta;
                self.eta[i] += delta;
                self.qu[i] += self.prior.q.diagonal()[i] * delta;
                for (j, w) in self.prior.q.row(i) {
                    self.qu[j] += w * delta;
                }
                self.ru += self.prior.r[i] * delta;
                self.cu += self.prior.c[i] * delta;
                self.accepted_u += 1;
            }
            if let Some(g) = adapt_gain {
                self.log_step_u[i] = (self.log_step_u[i] + g * (f64::from(ok as u8) - target)).clamp(-20.0, 5.0);
            }
        }
        for k in 0..self.modes.len() {
            self.mode_move(k, adapt_gain, target);
        }
        for i in 0..n {
            let step = self.log_step_v[i].exp();
            let delta = step * self.rng.sample::<f64, _>(StandardNormal);
            let d_prior = -0.5 * self.tau_v * (2.0 * delta * self.v[i] + delta * delta);
            let ok = self.accept(d_prior + self.log_lik_delta(i, delta));
            if ok {
                self.v[i] += delta;
                self.eta[i] += delta;
                self.accepted_v += 1;
            }
            if let Some(g) = adapt_gain {
                self.log_step_v[i] = (self.log_step_v[i] + g * (f64::from(ok as u8) - target)).clamp(-20.0, 5.0);
            }
        }

        // exp(beta0) | rest ~ Gamma(sum O, sum E exp(u + v)).
        let rate: f64 = (0..n)
            .map(|i| self.data.expected[i] * (self.u[i] + self.v[i]).exp())
            .sum();
        let g: f64 = Gamma::new(self.data.total_count, 1.0 / rate)
            .expect("positive total count")
            .sample(&mut self.rng);
        self.beta0 = g.ln();

        self.recenter();

        let uqu: f64 = self.u.iter().zip(&self.qu).map(|(a, b)| a * b).sum();
        self.tau_u = sample_precision(&mut self.rng, self.model.prior_tau_u, n - 1, uqu.max(0.0));
        let vv: f64 = self.v.iter().map(|x| x * x).sum();
        self.tau_v = sample_precision(&mut self.rng, self.model.prior_tau_v, n, vv);

        self.scale_move(0, adapt_gain, target);
        self.scale_move(1, adapt_gain, target);
    }

    fn run(mut self, cfg: &McmcConfig) -> ChainOutput {
        for t in 1..=cfg.burn_in {
            self.sweep(Some((t as f64).powf(-0.6)), cfg.adaptation_target);
        }
        self.accepted_u = 0;
        self.accepted_v = 0;
        let keep = cfg.retained_per_chain();
        let mut out = ChainOutput {
            beta0: Vec::with_capacity(keep),
            tau_u: Vec::with_capacity(keep),
            tau_v: Vec::with_capacity(keep),
            u: Vec::with_capacity(keep),
            v: Vec::with_capacity(keep),
            accept_u: 0.0,
            accept_v: 0.0,
            max_residual: 0.0,
        };
        for t in 1..=keep * cfg.thinning {
            self.sweep(None, cfg.adaptation_target);
            if t % cfg.thinning == 0 {
                out.beta0.push(self.beta0);
                out.tau_u.push(self.tau_u);
                out.tau_v.push(self.tau_v);
                out.u.push(self.u.clone());
                out.v.push(self.v.clone());
            }
        }
        let updates = (keep * cfg.thinning * self.u.len()) as f64;
        out.accept_u = self.accepted_u as f64 / updates;
        out.accept_v = self.accepted_v as f64 / updates;
        out.max_residual = self.max_residual;
        out
    }
}

pub(crate) fn check_data(counts: &[u64], expected: &[f64], dim: usize) -> Result<()> {
    check_len(dim, counts.len())?;
    check_len(dim, expected.len())?;
    if let Some(e) = expected.iter().find(|e| !(e.is_finite() && **e > 0.0)) {
        return invalid(format!("expected counts must be positive, got {e}"));
    }
    if counts.iter().all(|&o| o == 0) {
        return invalid("all observed counts are zero; the intercept posterior is improper");
    }
    Ok(())
}

/// Fits the model with `cfg.chains` independent chains run in parallel.
pub fn fit_bym(counts: &[u64], expected: &[f64], model: &BymModelSpec, cfg: &McmcConfig) -> Result<BymFit> {
    cfg.validate()?;
    let n = model.dim();
    check_data(counts, expected, n)?;

    let data = Data {
        counts,
        expected,
        total_count: counts.iter().sum::<u64>() as f64,
    };
    let prior = CenteredPrior::new(&model.structure, &model.constraint);
    let modes = prior.modes()?;
    let outputs: Vec<ChainOutput> = (0..cfg.chains)
        .into_par_iter()
        .map(|c| Chain::new(&data, &prior, &modes, model, child_seed(cfg.seed, c as u64)).run(cfg))
        .collect();

    let per_chain = cfg.retained_per_chain();
    let total = per_chain * cfg.chains;
    let mut u = DMatrix::zeros(total, n);
    let mut v = DMatrix::zeros(total, n);
    let mut eta = DMatrix::zeros(total, n);
    let mut beta0 = Vec::with_capacity(total);
    let mut tau_u = Vec::with_capacity(total);
    let mut tau_v = Vec::with_capacity(total);
    for (c, out) in outputs.iter().enumerate() {
        for k in 0..per_chain {
            let s = c * per_chain + k;
            for i in 0..n {
                u[(s, i)] = out.u[k][i];
                v[(s, i)] = out.v[k][i];
                eta[(s, i)] = out.beta0[k] + out.u[k][i] + out.v[k][i];
            }
        }
        beta0.extend_from_slice(&out.beta0);
        tau_u.extend_from_slice(&out.tau_u);
        tau_v.extend_from_slice(&out.tau_v);
    }

    let column_summaries = |m: &DMatrix<f64>| -> Vec<ParamSummary> {
        m.column_iter()
            .map(|col| ParamSummary::of(col.as_slice()))
            .collect()
    };
    let eta_summary = column_summaries(&eta);

    let ln_fact: Vec<f64> = counts.iter().map(|&o| ln_factorial(o)).collect();
    let ll_draws = DMatrix::from_fn(total, n, |s, i| poisson_log_lik(counts[i], expected[i], eta[(s, i)], ln_fact[i]));
    let at_posterior_mean = (0..n)
        .map(|i| poisson_log_lik(counts[i], expected[i], eta_summary[i].mean, ln_fact[i]))
        .collect();

    let by_chain = |values: &[f64]| -> f64 {
        let chunks: Vec<&[f64]> = values.chunks(per_chain).collect();
        split_rhat(&chunks)
    };
    let log = |x: &[f64]| x.iter().map(|t| t.ln()).collect::<Vec<_>>();
    let mut rhat = vec![
        RhatEntry { name: "beta0".into(), rhat: by_chain(&beta0) },
        RhatEntry { name: "log_tau_u".into(), rhat: by_chain(&log(&tau_u)) },
        RhatEntry { name: "log_tau_v".into(), rhat: by_chain(&log(&tau_v)) },
    ];
    let ids = model.structure.graph().unit_ids();
    for i in monitored_units(n) {
        rhat.push(RhatEntry {
            name: format!("eta[{}]", ids[i]),
            rhat: by_chain(eta.column(i).as_slice()),
        });
    }
    let max_rhat = rhat.iter().map(|r| r.rhat).fold(f64::NEG_INFINITY, |a, b| if b.is_nan() { f64::INFINITY } else { a.max(b) });

    let diagnostics = ConvergenceReport {
        converged: max_rhat <= RHAT_THRESHOLD,
        max_rhat,
        rhat,
        acceptance_u: mean(&outputs.iter().map(|o| o.accept_u).collect::<Vec<_>>()),
        acceptance_v: mean(&outputs.iter().map(|o| o.accept_v).collect::<Vec<_>>()),
        max_constraint_residual: outputs.iter().map(|o| o.max_residual).fold(0.0, f64::max),
    };

    Ok(BymFit {
        spatial_kind: model.spatial_kind,
        unit_ids: ids.to_vec(),
        counts: counts.to_vec(),
        expected: expected.to_vec(),
        beta0: ParamSummary::of(&beta0),
        tau_u: ParamSummary::of(&tau_u),
        tau_v: ParamSummary::of(&tau_v),
        u: column_summaries(&u),
        v: column_summaries(&v),
        eta: eta_summary,
        draws: BymDraws { chains: cfg.chains, per_chain, beta0, tau_u, tau_v, u, v, eta },
        log_lik: PointwiseLogLik { draws: ll_draws, at_posterior_mean },
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::car::{build_homcar, build_icar};
    use crate::graph::AdjacencyGraph;
    use nalgebra::DVector;

    fn quick() -> McmcConfig {
        McmcConfig {
            chains: 2,
            burn_in: 300,
            samples_per_chain: 400,
            thinning: 2,
            seed: 9,
            adaptation_target: 0.44,
        }
    }

    #[test]
    fn ln_factorial_matches_sum() {
        for n in [0u64, 1, 5, 255, 256, 300, 5000] {
            let exact: f64 = (2..=n).map(|k| (k as f64).ln()).sum();
            assert!((ln_factorial(n) - exact).abs() < 1e-9 * exact.max(1.0), "{n}");
        }
    }

    #[test]
    fn split_rhat_behaviour() {
        let a: Vec<f64> = (0..200).map(|k| ((k * 37) % 101) as f64).collect();
        let b: Vec<f64> = (0..200).map(|k| ((k * 53) % 101) as f64).collect();
        assert!(split_rhat(&[&a, &b]) < 1.05);
        let shifted: Vec<f64> = b.iter().map(|x| x + 500.0).collect();
        assert!(split_rhat(&[&a, &shifted]) > 2.0);
        let trend: Vec<f64> = (0..200).map(|k| k as f64).collect();
        assert!(split_rhat(&[&trend, &trend]) > 1.5);
    }

    #[test]
    fn monitored_unit_choice() {
        assert_eq!(monitored_units(3), vec![0, 1, 2]);
        assert_eq!(monitored_units(225), vec![0, 56, 112, 168, 224]);
    }

    #[test]
    fn precision_full_conditional_moments() {
        let mut rng = rng_from_seed(3);
        let prior = GammaPrior::new(2.0, 0.5).unwrap();
        for (rank, quad) in [(8usize, 3.0f64), (9, 0.7)] {
            let draws: Vec<f64> = (0..20_000).map(|_| sample_precision(&mut rng, prior, rank, quad)).collect();
            let shape = prior.shape + rank as f64 / 2.0;
            let rate = prior.rate + quad / 2.0;
            let (m, sd) = (shape / rate, shape.sqrt() / rate);
            assert!((mean(&draws) - m).abs() < 0.02 * m);
            assert!((sample_variance(&draws).sqrt() - sd).abs() < 0.02 * sd);
        }
    }

    #[test]
    fn centered_prior_matches_dense_form() {
        let q = build_homcar(AdjacencyGraph::lattice(2, 3).unwrap()).unwrap();
        let c = q.constraint_vector().unwrap();
        let prior = CenteredPrior::new(&q, &c);
        let p = DMatrix::identity(6, 6)
            - DMatrix::from_element(6, 1, 1.0) * DMatrix::from_row_slice(1, 6, &c) / prior.k;
        let m = p.transpose() * q.to_dense() * &p;

        let u = vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.05];
        let qu = q.mul_vec(&u);
        let ru: f64 = prior.r.iter().zip(&u).map(|(a, b)| a * b).sum();
        let cu: f64 = c.iter().zip(&u).map(|(a, b)| a * b).sum();
        let dense = &m * DVector::from_column_slice(&u);
        for i in 0..6 {
            assert!((prior.mu(i, &qu, ru, cu) - dense[i]).abs() < 1e-12);
            assert!((m[(i, i)] - prior.m_diag[i]).abs() < 1e-12);
        }
        // M annihilates 1, and on c'u = 0 the energy equals u'Qu.
        assert!((&m * DVector::from_element(6, 1.0)).amax() < 1e-12);
        let shift = cu / prior.k;
        let centred: Vec<f64> = u.iter().map(|x| x - shift).collect();
        let cv = DVector::from_column_slice(&centred);
        assert!((cv.dot(&(&m * &cv)) - q.quadratic_form(&centred)).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        let model = BymModelSpec::new(build_icar(AdjacencyGraph::lattice(1, 3).unwrap()).unwrap()).unwrap();
        assert!(matches!(
            fit_bym(&[1, 2], &[1.0, 1.0], &model, &quick()),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(fit_bym(&[1, 2, 3], &[1.0, 0.0, 1.0], &model, &quick()).is_err());
        let one_chain = McmcConfig { chains: 1, ..quick() };
        assert!(fit_bym(&[1, 2, 3], &[1.0; 3], &model, &one_chain).is_err());
        assert!(GammaPrior::new(0.0, 1.0).is_err());
    }

    #[test]
    fn fit_shapes_and_identities() {
        let model = BymModelSpec::new(build_homcar(AdjacencyGraph::lattice(2, 2).unwrap()).unwrap()).unwrap();
        let cfg = quick();
        let fit = fit_bym(&[3, 6, 2, 5], &[4.0; 4], &model, &cfg).unwrap();
        assert_eq!(fit.draws.len(), cfg.retained_total());
        assert_eq!(fit.log_lik.draws.shape(), (cfg.retained_total(), 4));
        for s in 0..fit.draws.len() {
            for i in 0..4 {
                let recombined = fit.draws.beta0[s] + fit.draws.u[(s, i)] + fit.draws.v[(s, i)];
                assert!((fit.draws.eta[(s, i)] - recombined).abs() < 1e-12);
            }
        }
        for s in fit.eta.iter().chain(&fit.u).chain([&fit.beta0, &fit.tau_u]) {
            assert!(s.q025 <= s.mean.max(s.q975) && s.q025 <= s.q975);
        }
        assert!(fit.diagnostics.max_constraint_residual < 1e-9);
        let map = posterior_mean_map(&fit, true).unwrap();
        assert_eq!(map.len(), 4);
        assert!(fit.summary_csv().starts_with("unit_id,eta_mean,eta_sd,eta_q025,eta_q975\n0_0,"));
        assert_eq!(fit.draws_csv().lines().count(), 1 + cfg.retained_total());
        assert_eq!(fit.hyperparameter_csv().lines().count(), 4);
    }
}
