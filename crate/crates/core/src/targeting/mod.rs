//! Plug-in, one-step, targeted and cross-validated estimators.

mod estimators;
pub mod nuisance;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimand::{FilterReport, ResolvedTerms};
use crate::learners::cv::Folds;
use crate::linalg::compensated_sum;

pub use estimators::{cv_ose, cv_tmle, estimate, ose, plugin, tmle};
pub use nuisance::NuisanceEval;

/// Largest `|B_n|` accepted after targeting a continuous outcome.
pub const CONTINUOUS_BIAS_TOL: f64 = 1e-8;
/// Largest `|B_n|` accepted after targeting a binary outcome.
pub const BINARY_BIAS_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Plugin,
    Ose,
    Tmle,
    Wtmle,
    CvOse,
    CvTmle,
    CvWtmle,
}

impl Estimator {
    pub const ALL: [Estimator; 7] = [
        Estimator::Plugin,
        Estimator::Ose,
        Estimator::Tmle,
        Estimator::Wtmle,
        Estimator::CvOse,
        Estimator::CvTmle,
        Estimator::CvWtmle,
    ];

    pub fn is_cv(self) -> bool {
        matches!(
            self,
            Estimator::CvOse | Estimator::CvTmle | Estimator::CvWtmle
        )
    }

    pub fn is_weighted(self) -> bool {
        matches!(self, Estimator::Wtmle | Estimator::CvWtmle)
    }

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Plugin => "plugin",
            Estimator::Ose => "ose",
            Estimator::Tmle => "tmle",
            Estimator::Wtmle => "wtmle",
            Estimator::CvOse => "cv_ose",
            Estimator::CvTmle => "cv_tmle",
            Estimator::CvWtmle => "cv_wtmle",
        }
    }

    pub fn parse(s: &str) -> Option<Estimator> {
        Estimator::ALL.into_iter().find(|e| e.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateReport {
    pub estimator: Estimator,
    pub estimate: f64,
    /// Influence-function value per frame row.
    #[serde(skip)]
    pub eif: Vec<f64>,
    /// EIF variance estimate σ̂²; the standard error is `sqrt(σ̂² / n)`.
    pub variance: f64,
    pub n: usize,
    /// Dataset row index of every EIF entry.
    #[serde(skip)]
    pub rows: Vec<usize>,
    pub epsilon: Option<f64>,
    /// Empirical mean of `H(g)(Y - Q̄)` at the reported outcome fit.
    pub residual_bias: f64,
    pub counterfactual_means: Vec<f64>,
    pub converged: bool,
    /// Whether `|B_n|` met the post-targeting tolerance (always true for
    /// estimators that do not target).
    pub bias_within_tolerance: bool,
    /// Outcome predictions clipped before a logit transform.
    pub clipped: usize,
    /// Some term level had no observed rows and was extrapolated.
    pub extrapolated: bool,
    pub filter: Option<FilterReport>,
}

impl EstimateReport {
    pub fn std_error(&self) -> f64 {
        (self.variance / self.n as f64).sqrt()
    }
}

/// Clever covariate for one row: `H = sign(s) / g` and the weighted variant
/// `H' = sign(s)` when the observed level is term `s`, otherwise zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CleverCovariate {
    pub h: f64,
    pub h_weighted: f64,
}

pub fn clever_covariate(terms: &ResolvedTerms, observed: &[u32], g: f64) -> CleverCovariate {
    match terms.matching(observed) {
        Some(s) => CleverCovariate {
            h: terms.signs[s] / g,
            h_weighted: terms.signs[s],
        },
        None => CleverCovariate {
            h: 0.0,
            h_weighted: 0.0,
        },
    }
}

/// `D(o_i) = H_i (y_i - Q̄_obs,i) + Σ_s sign(s) Q̄(a(s), w_i) - ψ`.
pub fn eif_values(
    h: &[f64],
    y: &[f64],
    q_obs: &[f64],
    signs: &[f64],
    q_cf: &[Vec<f64>],
    psi: f64,
) -> Vec<f64> {
    (0..y.len())
        .map(|i| {
            let sub = compensated_sum(signs.iter().zip(q_cf).map(|(s, q)| s * q[i]));
            h[i] * (y[i] - q_obs[i]) + sub - psi
        })
        .collect()
}

/// `(1/n) Σ D_i²`.
pub fn variance_iid(eif: &[f64]) -> Result<f64> {
    if eif.is_empty() {
        return Err(Error::Empty("influence-function vector".into()));
    }
    Ok(compensated_sum(eif.iter().map(|d| d * d)) / eif.len() as f64)
}

/// `Σ_k (n_k / n) · (1/n_k) Σ_{i∈k} D_i²`.
pub fn variance_cv(eif: &[f64], folds: &Folds) -> Result<f64> {
    if eif.is_empty() {
        return Err(Error::Empty("influence-function vector".into()));
    }
    if eif.len() != folds.len() {
        return Err(Error::LengthMismatch {
            what: "EIF vs folds".into(),
            left: eif.len(),
            right: folds.len(),
        });
    }
    let n = eif.len() as f64;
    let mut total = 0.0;
    for k in 0..folds.k() {
        let rows = folds.test_rows(k);
        if rows.is_empty() {
            return Err(Error::Empty(format!("fold {k}")));
        }
        let nk = rows.len() as f64;
        let second = compensated_sum(rows.iter().map(|&i| eif[i] * eif[i])) / nk;
        total += nk / n * second;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_by_two() -> ResolvedTerms {
        ResolvedTerms {
            signs: vec![1.0, -1.0, -1.0, 1.0],
            levels: vec![vec![0, 0], vec![1, 0], vec![0, 1], vec![1, 1]],
        }
    }

    #[test]
    fn clever_covariate_examples() {
        let t = two_by_two();
        let c = clever_covariate(&t, &[1, 1], 0.25);
        assert_eq!((c.h, c.h_weighted), (4.0, 1.0));
        assert_eq!(clever_covariate(&t, &[1, 0], 0.5).h, -2.0);
        assert_eq!(clever_covariate(&t, &[2, 0], 0.5).h, 0.0);
    }

    #[test]
    fn eif_without_match_is_substitution_term() {
        let d = eif_values(
            &[0.0],
            &[5.0],
            &[1.0],
            &[1.0, -1.0],
            &[vec![3.0], vec![1.0]],
            0.5,
        );
        assert_eq!(d, vec![1.5]);
    }

    #[test]
    fn variance_examples() {
        assert_eq!(variance_iid(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(variance_iid(&[-1.0, 1.0]).unwrap(), 1.0);
        assert!(variance_iid(&[]).is_err());
        let eif = [0.3, -1.2, 0.7, 0.2, -0.4, 0.9];
        let folds = Folds::from_assignment(vec![0, 1, 2, 0, 1, 2], 3).unwrap();
        let cv = variance_cv(&eif, &folds).unwrap();
        assert!((cv - variance_iid(&eif).unwrap()).abs() < 1e-15);
    }
}
