//! Model-comparison criteria, estimation-accuracy statistics and variance maps.

use nalgebra::{Cholesky, DMatrix, Dyn};
use serde::Serialize;

use crate::error::{check_len, invalid, Error, Result};
use crate::stats::{mean, sample_variance, SpreadSummary};

/// Per-draw, per-observation log-likelihood values plus the plug-in values
/// at the posterior mean of the linear predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct PointwiseLogLik {
    /// `draws x observations`.
    pub draws: DMatrix<f64>,
    pub at_posterior_mean: Vec<f64>,
}

impl PointwiseLogLik {
    fn check(&self) -> Result<()> {
        if self.draws.nrows() == 0 || self.draws.ncols() == 0 {
            return invalid("no log-likelihood draws");
        }
        check_len(self.draws.ncols(), self.at_posterior_mean.len())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Dic {
    pub mean_deviance: f64,
    pub effective_parameters: f64,
    pub dic: f64,
}

/// `DIC = D_bar + p_D` with `D = -2 log L` and `p_D = D_bar - D(eta_bar)`.
pub fn dic(ll: &PointwiseLogLik) -> Result<Dic> {
    ll.check()?;
    let per_draw: Vec<f64> = ll.draws.row_iter().map(|r| -2.0 * r.sum()).collect();
    let mean_deviance = mean(&per_draw);
    let plug_in = -2.0 * ll.at_posterior_mean.iter().sum::<f64>();
    let effective_parameters = mean_deviance - plug_in;
    Ok(Dic {
        mean_deviance,
        effective_parameters,
        dic: mean_deviance + effective_parameters,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Waic {
    pub lppd: f64,
    pub effective_parameters: f64,
    pub waic: f64,
}

/// `WAIC = -2 sum_i [log mean_s p_is - var_s log p_is]`, variance with divisor
/// `S - 1` (zero for a single draw).
pub fn waic(ll: &PointwiseLogLik) -> Result<Waic> {
    ll.check()?;
    let s = ll.draws.nrows();
    let mut lppd = 0.0;
    let mut penalty = 0.0;
    for col in ll.draws.column_iter() {
        let max = col.max();
        let mean_p = col.iter().map(|l| (l - max).exp()).sum::<f64>() / s as f64;
        lppd += max + mean_p.ln();
        if s > 1 {
            let values: Vec<f64> = col.iter().copied().collect();
            penalty += sample_variance(&values);
        }
    }
    Ok(Waic {
        lppd,
        effective_parameters: penalty,
        waic: -2.0 * (lppd - penalty),
    })
}

fn check_shapes(estimates: &DMatrix<f64>, truths: &DMatrix<f64>) -> Result<()> {
    if estimates.shape() != truths.shape() {
        return invalid(format!(
            "shape mismatch: estimates {:?} vs truths {:?}",
            estimates.shape(),
            truths.shape()
        ));
    }
    if estimates.is_empty() {
        return invalid("empty estimate matrix");
    }
    Ok(())
}

/// `(I J)^{-1} sum_i |sum_j (est_ij - truth_ij)|` over an `I x J`
/// (units x replicates) matrix. Errors of one unit cancel across replicates.
pub fn mab(estimates: &DMatrix<f64>, truths: &DMatrix<f64>) -> Result<f64> {
    check_shapes(estimates, truths)?;
    let diff = estimates - truths;
    let total: f64 = diff.row_iter().map(|r| r.sum().abs()).sum();
    Ok(total / diff.len() as f64)
}

pub fn rmse(estimates: &DMatrix<f64>, truths: &DMatrix<f64>) -> Result<f64> {
    check_shapes(estimates, truths)?;
    let diff = estimates - truths;
    Ok((diff.norm_squared() / diff.len() as f64).sqrt())
}

/// Interval score of a central `(1 - alpha)` interval.
pub fn interval_score(lower: f64, upper: f64, truth: f64, alpha: f64) -> Result<f64> {
    if lower > upper {
        return invalid(format!("interval lower bound {lower} exceeds upper bound {upper}"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return invalid(format!("alpha must lie in (0,1), got {alpha}"));
    }
    let mut score = upper - lower;
    if truth < lower {
        score += 2.0 / alpha * (lower - truth);
    }
    if truth > upper {
        score += 2.0 / alpha * (truth - upper);
    }
    Ok(score)
}

/// Per-unit sample variance (divisor `J - 1`) across `J` per-unit maps.
pub fn empirical_variance_map(maps: &[Vec<f64>]) -> Result<Vec<f64>> {
    if maps.len() < 2 {
        return invalid("empirical variance needs at least 2 maps");
    }
    let n = maps[0].len();
    for m in maps {
        check_len(n, m.len())?;
    }
    Ok((0..n)
        .map(|i| {
            let values: Vec<f64> = maps.iter().map(|m| m[i]).collect();
            sample_variance(&values)
        })
        .collect())
}

/// `I^{-1} sum_i (v_i - target)^2`.
pub fn variance_mse(empirical: &[f64], target: f64) -> f64 {
    empirical.iter().map(|v| (v - target).powi(2)).sum::<f64>() / empirical.len() as f64
}

pub fn mean_variance(empirical: &[f64]) -> f64 {
    mean(empirical)
}

pub fn pearson_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a.len(), b.len())?;
    if a.len() < 3 {
        return invalid("correlation needs at least 3 values");
    }
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return invalid("correlation of a constant vector is undefined");
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// `(hom_i - bym_i) / bym_i`.
pub fn relative_variance_difference(hom: &[f64], bym: &[f64]) -> Result<Vec<f64>> {
    check_len(bym.len(), hom.len())?;
    hom.iter()
        .zip(bym)
        .map(|(h, b)| {
            if *b <= 0.0 {
                invalid("reference variance must be positive")
            } else {
                Ok((h - b) / b)
            }
        })
        .collect()
}

/// Bin edges for relative variance changes: below 10% is "no change",
/// then 10-25%, 25-50%, 50-100% and above 100%.
pub const RELATIVE_CHANGE_EDGES: [f64; 4] = [0.10, 0.25, 0.50, 1.00];

/// Signed bin index in `-4..=4`; 0 means a change below 10%.
pub fn relative_change_bin(r: f64) -> i8 {
    let k = RELATIVE_CHANGE_EDGES.iter().filter(|&&e| r.abs() >= e).count() as i8;
    if r < 0.0 {
        -k
    } else {
        k
    }
}

pub fn relative_change_label(bin: i8) -> &'static str {
    match bin {
        -4 => "decrease >100%",
        -3 => "decrease 50-100%",
        -2 => "decrease 25-50%",
        -1 => "decrease 10-25%",
        0 => "change <10%",
        1 => "increase 10-25%",
        2 => "increase 25-50%",
        3 => "increase 50-100%",
        _ => "increase >100%",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrecisionProfile {
    pub precisions: Vec<f64>,
    pub summary: SpreadSummary,
}

/// Conditional precisions `diag(cov^{-1})` of a Gaussian with covariance `cov`.
pub fn conditional_precision_profile(cov: &DMatrix<f64>) -> Result<PrecisionProfile> {
    if !cov.is_square() || cov.is_empty() {
        return invalid("covariance must be a non-empty square matrix");
    }
    let chol = Cholesky::<f64, Dyn>::new(cov.clone())
        .ok_or_else(|| Error::Numerical("covariance is not positive definite".into()))?;
    let precision = chol.inverse();
    let precisions: Vec<f64> = precision.diagonal().iter().copied().collect();
    Ok(PrecisionProfile {
        summary: SpreadSummary::of(&precisions),
        precisions,
    })
}

/// One row of the model-comparison table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub dic: f64,
    pub waic: f64,
    pub mab: f64,
    pub rmse: f64,
    pub interval_score_mean: f64,
    #[serde(skip)]
    pub variance_map: Vec<f64>,
    pub variance_mse: f64,
    pub mean_variance: f64,
    pub prior_posterior_correlation: f64,
}

impl MetricsReport {
    pub const CSV_COLUMNS: [&'static str; 8] = [
        "dic",
        "waic",
        "mab",
        "rmse",
        "interval_score",
        "variance_mse",
        "mean_variance",
        "prior_posterior_correlation",
    ];

    fn values(&self) -> [f64; 8] {
        [
            self.dic,
            self.waic,
            self.mab,
            self.rmse,
            self.interval_score_mean,
            self.variance_mse,
            self.mean_variance,
            self.prior_posterior_correlation,
        ]
    }

    /// `key=value` lines in a fixed order.
    pub fn to_key_value(&self) -> String {
        Self::CSV_COLUMNS
            .iter()
            .zip(self.values())
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Comma-separated values in [`Self::CSV_COLUMNS`] order.
    pub fn csv_values(&self) -> String {
        self.values()
            .iter()
            .map(f64::to_string)
            .collect::<Vec<_>>()
            .join(",")
    }
}
