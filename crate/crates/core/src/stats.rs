//! Small descriptive-statistics helpers shared across modules.

/// Linear-interpolation quantile of an ascending sample (the "type 7" rule:
/// `h = (n - 1) q`, interpolate between ranks `floor(h)` and `floor(h) + 1`).
///
/// Panics on an empty sample.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, q)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample variance with divisor `n - 1`.
pub fn sample_variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (values.len() as f64 - 1.0)
}

/// Min, median, max and max/min ratio of a set of positive quantities.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct SpreadSummary {
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub max_min_ratio: f64,
}

impl SpreadSummary {
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let min = v[0];
        let max = v[v.len() - 1];
        Self {
            min,
            median: quantile_sorted(&v, 0.5),
            max,
            max_min_ratio: max / min,
        }
    }
}
