//! Reductions used by every estimator. Sums are pairwise so results do not
//! depend on how the samples were produced or partitioned.

use statrs::distribution::{ContinuousCDF, Normal};

/// z-quantile of the two-sided 95% normal interval.
pub const Z95: f64 = 1.96;

const PAIRWISE_BLOCK: usize = 64;

pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= PAIRWISE_BLOCK {
        values.iter().sum()
    } else {
        let mid = values.len() / 2;
        pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
    }
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(values) / values.len() as f64
}

/// Sample (n - 1) standard deviation; zero for fewer than two samples.
pub fn sample_std(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(values);
    let centered: Vec<f64> = values.iter().map(|v| (v - m) * (v - m)).collect();
    (pairwise_sum(&centered) / (n - 1) as f64).sqrt()
}

/// Mean with its standard error.
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    (mean(values), sample_std(values) / (n.max(1) as f64).sqrt())
}

/// Standard normal cumulative distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

/// Two-sided p-value of a z statistic.
pub fn two_sided_p(z: f64) -> f64 {
    if !z.is_finite() {
        return if z.is_nan() { 1.0 } else { 0.0 };
    }
    2.0 * (1.0 - normal_cdf(z.abs()))
}
