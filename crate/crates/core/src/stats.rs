//! Monte Carlo summaries: means, standard errors and effective sample sizes.

use serde::{Deserialize, Serialize};

/// A point estimate with its Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self {
            value,
            std_error: 0.0,
        }
    }

    /// True iff `|self - other| <= k * sqrt(se_a^2 + se_b^2)`.
    pub fn agrees_with(&self, other: &Estimate, k: f64) -> bool {
        (self.value - other.value).abs() <= k * combined_se(self.std_error, other.std_error)
    }
}

/// Neumaier-compensated sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub fn combined_se(a: f64, b: f64) -> f64 {
    a.hypot(b)
}

/// Effective sample size of an ordered, possibly autocorrelated series using
/// Geyer's initial positive sequence estimator. Returns `n` for constant
/// series and never more than `n`.
pub fn effective_sample_size(series: &[f64]) -> f64 {
    let n = series.len();
    if n < 4 {
        return n as f64;
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = series.iter().map(|v| v - mean).collect();
    let gamma0 = centered.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if gamma0 <= 0.0 {
        return n as f64;
    }
    let autocov = |lag: usize| -> f64 {
        centered[..n - lag]
            .iter()
            .zip(&centered[lag..])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / n as f64
    };
    // tau = -1 + 2 * sum_k (rho_{2k} + rho_{2k+1}) over the initial positive run
    let mut tau = -1.0;
    let mut lag = 0;
    let mut prev_pair = f64::INFINITY;
    while lag + 1 < n / 2 {
        let pair = (autocov(lag) + autocov(lag + 1)) / gamma0;
        if pair <= 0.0 {
            break;
        }
        // initial monotone sequence
        let pair = pair.min(prev_pair);
        tau += 2.0 * pair;
        prev_pair = pair;
        lag += 2;
    }
    let tau = tau.max(1.0 / n as f64);
    (n as f64 / tau).min(n as f64)
}

/// Weighted mean with standard error.
///
/// With `ordered = true` the samples are treated as a correlated sequence
/// (a chain run) and the variance is inflated by `n / ESS`. Weights are
/// assumed normalized to 1; Kish's effective size accounts for unequal ones.
pub fn weighted_mean(values: &[f64], weights: &[f64], ordered: bool) -> Estimate {
    debug_assert_eq!(values.len(), weights.len());
    let n = values.len();
    if n == 0 {
        return Estimate {
            value: f64::NAN,
            std_error: f64::NAN,
        };
    }
    let wsum = compensated_sum(weights.iter().copied());
    let mean = compensated_sum(values.iter().zip(weights).map(|(v, w)| v * w)) / wsum;
    if values.iter().all(|&v| v == values[0]) {
        return Estimate {
            value: values[0],
            std_error: 0.0,
        };
    }
    let var = values
        .iter()
        .zip(weights)
        .map(|(v, w)| w * (v - mean).powi(2))
        .sum::<f64>()
        / wsum;
    let kish = wsum * wsum / weights.iter().map(|w| w * w).sum::<f64>();
    let mut ess = kish;
    if ordered {
        ess = ess * effective_sample_size(values) / n as f64;
    }
    let ess = ess.max(1.0);
    // unbiased variance correction for the effective size
    let var = if ess > 1.0 {
        var * ess / (ess - 1.0)
    } else {
        var
    };
    Estimate {
        value: mean,
        std_error: (var / ess).sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn iid_series_has_ess_near_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<f64> = (0..20_000).map(|_| rng.random::<f64>()).collect();
        let ess = effective_sample_size(&xs);
        assert!(ess > 17_000.0 && ess <= 20_000.0, "{ess}");
    }

    #[test]
    fn ar1_series_ess_matches_theory() {
        // AR(1) with coefficient phi has tau = (1 + phi) / (1 - phi)
        let phi: f64 = 0.8;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut x = 0.0;
        let xs: Vec<f64> = (0..200_000)
            .map(|_| {
                x = phi * x + rng.random::<f64>() - 0.5;
                x
            })
            .collect();
        let expected = 200_000.0 * (1.0 - phi) / (1.0 + phi);
        let ess = effective_sample_size(&xs);
        assert!((ess / expected - 1.0).abs() < 0.15, "{ess} vs {expected}");
    }

    #[test]
    fn constant_series() {
        let est = weighted_mean(&[2.0; 10], &[0.1; 10], true);
        assert_eq!(est, Estimate::exact(2.0));
        assert_eq!(effective_sample_size(&[3.0; 100]), 100.0);
    }

    #[test]
    fn mean_and_se_of_two_points() {
        let est = weighted_mean(&[0.0, 1.0], &[0.5, 0.5], false);
        assert_eq!(est.value, 0.5);
        // population variance 1/4, corrected by 2/(2-1), divided by 2
        assert!((est.std_error - 0.5).abs() < 1e-15);
    }

    #[test]
    fn agreement() {
        let a = Estimate {
            value: 1.0,
            std_error: 0.3,
        };
        let b = Estimate {
            value: 2.0,
            std_error: 0.4,
        };
        assert!(a.agrees_with(&b, 2.0));
        assert!(!a.agrees_with(&b, 1.9));
    }
}
