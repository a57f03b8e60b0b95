use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BootstrapMetrics {
    /// `(1/B) Σ_b ‖ψ̂_b − ψ₀‖²`, which includes the replicate spread.
    pub bias2: f64,
    /// Trace of the sample covariance over replicates.
    pub variance: f64,
    /// `bias2 + variance`.
    pub mse: f64,
    /// `‖mean_b ψ̂_b − ψ₀‖²`.
    pub bias2_centered: f64,
    pub b: usize,
}

pub fn bootstrap_metrics(estimates: &[Vec<f64>], truth: &[f64]) -> Result<BootstrapMetrics> {
    let b = estimates.len();
    if b < 2 {
        return Err(Error::invalid(format!(
            "bootstrap metrics need B >= 2, got {b}"
        )));
    }
    let p = truth.len();
    if p == 0 {
        return Err(Error::Empty("truth vector".into()));
    }
    if let Some(e) = estimates.iter().find(|e| e.len() != p) {
        return Err(Error::LengthMismatch {
            what: "replicate estimate vs truth".into(),
            left: e.len(),
            right: p,
        });
    }
    let bf = b as f64;
    let mut mean = vec![0.0; p];
    for e in estimates {
        for (m, v) in mean.iter_mut().zip(e) {
            *m += v / bf;
        }
    }
    let bias2 = estimates
        .iter()
        .map(|e| {
            e.iter()
                .zip(truth)
                .map(|(v, t)| (v - t).powi(2))
                .sum::<f64>()
        })
        .sum::<f64>()
        / bf;
    let variance = estimates
        .iter()
        .map(|e| {
            e.iter()
                .zip(&mean)
                .map(|(v, m)| (v - m).powi(2))
                .sum::<f64>()
        })
        .sum::<f64>()
        / (bf - 1.0);
    let bias2_centered = mean.iter().zip(truth).map(|(m, t)| (m - t).powi(2)).sum();
    Ok(BootstrapMetrics {
        bias2,
        variance,
        mse: bias2 + variance,
        bias2_centered,
        b,
    })
}

/// Wilson score interval for a binomial proportion at normal quantile `z`.
pub fn wilson_interval(successes: usize, trials: usize, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / (1.0 + z2 / n);
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_example() {
        let m = bootstrap_metrics(&[vec![0.0], vec![2.0]], &[1.0]).unwrap();
        assert_eq!(
            (m.bias2, m.variance, m.mse, m.bias2_centered),
            (1.0, 2.0, 3.0, 0.0)
        );
        let m = bootstrap_metrics(&vec![vec![1.0, 2.0]; 4], &[1.0, 2.0]).unwrap();
        assert_eq!((m.bias2, m.variance, m.mse), (0.0, 0.0, 0.0));
        assert!(bootstrap_metrics(&[vec![1.0]], &[1.0]).is_err());
    }

    #[test]
    fn wilson_contains_estimate() {
        let (lo, hi) = wilson_interval(95, 100, 1.959963984540054);
        assert!(lo < 0.95 && 0.95 < hi);
        assert!((lo - 0.8883).abs() < 1e-3 && (hi - 0.9785).abs() < 1e-3);
        assert_eq!(wilson_interval(0, 0, 1.96), (0.0, 1.0));
    }
}
