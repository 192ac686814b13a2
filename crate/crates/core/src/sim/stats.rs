//! Empirical quantiles and their standard errors.

use super::rng::stream_rng;
use super::SimError;
use rand::Rng;
use rayon::prelude::*;
use statrs::function::beta::beta_reg;

/// Order statistic `⌈αn⌉` (1-based) of `values`: the right-continuous
/// sup-quantile of the empirical law.
pub fn empirical_quantile(values: &[f64], alpha: f64) -> Result<f64, SimError> {
    let k = rank(values.len(), alpha)?;
    let mut v = values.to_vec();
    let (_, q, _) = v.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(*q)
}

fn rank(n: usize, alpha: f64) -> Result<usize, SimError> {
    if n == 0 {
        return Err(SimError::EmptyBatch);
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(SimError::InvalidLevel(alpha));
    }
    // guard against αn landing a hair above an integer
    let k = (alpha * n as f64 - 1e-9).ceil() as usize;
    Ok(k.clamp(1, n))
}

/// Empirical quantile with its bootstrap standard error.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct QuantileEstimate {
    pub value: f64,
    pub stderr: f64,
}

/// Quantile plus the exact (infinite-resample) bootstrap standard error of
/// the `⌈αn⌉`-th order statistic. A resample's `k`-th order statistic is
/// at most the `j`-th sorted value with probability `P(Bin(n, j/n) ≥ k)`,
/// which gives the resampling law in closed form.
pub fn quantile_with_stderr(values: &[f64], alpha: f64) -> Result<QuantileEstimate, SimError> {
    let n = values.len();
    let k = rank(n, alpha)?;
    let mut v = values.to_vec();
    v.sort_unstable_by(f64::total_cmp);
    let value = v[k - 1];
    if n == 1 {
        return Ok(QuantileEstimate { value, stderr: 0.0 });
    }
    let (a, b) = (k as f64, (n - k + 1) as f64);
    let spread = (n as f64 * alpha * (1.0 - alpha)).sqrt();
    let half = (14.0 * spread).ceil() as usize + 20;
    let lo = k.saturating_sub(half).max(1);
    let hi = (k + half).min(n);
    let cdf = |j: usize| -> f64 {
        if j == 0 {
            0.0
        } else if j >= n {
            1.0
        } else {
            beta_reg(a, b, j as f64 / n as f64)
        }
    };
    let mut prev = cdf(lo - 1);
    let (mut m1, mut m2) = (0.0, 0.0);
    // centre values on the point estimate to keep the variance well scaled
    for j in lo..=hi {
        let next = cdf(j);
        let w = next - prev;
        let d = v[j - 1] - value;
        m1 += w * d;
        m2 += w * d * d;
        prev = next;
    }
    Ok(QuantileEstimate {
        value,
        stderr: (m2 - m1 * m1).max(0.0).sqrt(),
    })
}

/// Bootstrap standard error of `stat` evaluated on paired samples,
/// resampling path indices jointly. Resample `r` uses stream `r` of `seed`,
/// so the result does not depend on the thread count.
pub fn paired_bootstrap_stderr<F>(
    n: usize,
    resamples: usize,
    seed: u64,
    stat: F,
) -> Result<f64, SimError>
where
    F: Fn(&[usize]) -> Result<f64, SimError> + Sync,
{
    if n == 0 {
        return Err(SimError::EmptyBatch);
    }
    if resamples < 2 {
        return Ok(0.0);
    }
    let draws = (0..resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(seed ^ 0x5eed_b007, r as u64);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            stat(&idx)
        })
        .collect::<Result<Vec<f64>, SimError>>()?;
    Ok(sample_std(&draws))
}

/// Sample standard deviation (n − 1 denominator).
pub fn sample_std(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (n - 1) as f64).sqrt()
}

/// Mean and its standard error.
pub fn mean_with_stderr(values: &[f64]) -> Result<QuantileEstimate, SimError> {
    if values.is_empty() {
        return Err(SimError::EmptyBatch);
    }
    let n = values.len() as f64;
    Ok(QuantileEstimate {
        value: values.iter().sum::<f64>() / n,
        stderr: sample_std(values) / n.sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn order_statistic_convention() {
        assert_eq!(empirical_quantile(&[4.0, 2.0, 3.0, 1.0], 0.5).unwrap(), 2.0);
        assert_eq!(empirical_quantile(&[5.0, 4.0, 3.0, 2.0, 1.0], 0.5).unwrap(), 3.0);
        assert_eq!(empirical_quantile(&[1.0, 2.0, 3.0], 0.01).unwrap(), 1.0);
        assert_eq!(empirical_quantile(&[1.0, 2.0, 3.0], 0.99).unwrap(), 3.0);
        assert_eq!(empirical_quantile(&[], 0.5), Err(SimError::EmptyBatch));
        assert_eq!(empirical_quantile(&[1.0], 1.0), Err(SimError::InvalidLevel(1.0)));
    }

    #[test]
    fn exact_bootstrap_matches_resampling() {
        let mut rng = stream_rng(3, 0);
        let values: Vec<f64> = (0..401).map(|_| rng.random::<f64>()).collect();
        let exact = quantile_with_stderr(&values, 0.5).unwrap();
        let idx_stat = |idx: &[usize]| {
            let s: Vec<f64> = idx.iter().map(|&i| values[i]).collect();
            empirical_quantile(&s, 0.5)
        };
        let mc = paired_bootstrap_stderr(values.len(), 4000, 11, idx_stat).unwrap();
        assert_relative_eq!(exact.stderr, mc, max_relative = 0.06);
        // uniform median: sd ≈ 1/(2√n)
        assert_relative_eq!(exact.stderr, 0.5 / (401f64).sqrt(), max_relative = 0.2);
    }

    #[test]
    fn mean_stderr() {
        let e = mean_with_stderr(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(e.value, 2.5);
        assert_relative_eq!(e.stderr, (5.0f64 / 3.0).sqrt() / 2.0, max_relative = 1e-14);
    }
}
