//! Wald intervals, joint tests, delta-method composites and FDR control.

pub mod dist;
pub mod fdr;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{compensated_sum, condition_number, numerical_rank};
use crate::targeting::EstimateReport;

pub use dist::{f_sf, norm_cdf, norm_quantile, norm_sf, t_two_sided};
pub use fdr::{bh_fdr, BhResult};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Wald {
    pub estimate: f64,
    pub std_error: f64,
    /// Absent when the variance is zero.
    pub interval: Option<(f64, f64)>,
    pub p_value: f64,
    /// Zero variance: the p-value is 1 for a zero estimate and 0 otherwise.
    pub degenerate: bool,
}

fn check_variance(variance: f64, n: usize) -> Result<()> {
    if variance.is_nan() {
        return Err(Error::NonFinite("variance".into()));
    }
    if variance < 0.0 {
        return Err(Error::NegativeVariance(variance));
    }
    if n < 2 {
        return Err(Error::invalid(format!("need n >= 2, got {n}")));
    }
    Ok(())
}

/// Two-sided p-value of `sqrt(n) ψ / σ` against the standard normal, plus the
/// degenerate-variance flag.
pub fn pvalue(estimate: f64, variance: f64, n: usize) -> Result<(f64, bool)> {
    check_variance(variance, n)?;
    if variance == 0.0 {
        return Ok((if estimate == 0.0 { 1.0 } else { 0.0 }, true));
    }
    let z = (n as f64).sqrt() * estimate / variance.sqrt();
    Ok(((2.0 * norm_sf(z.abs())).min(1.0), false))
}

/// `ψ ± z_{1-α/2} σ / sqrt(n)` with the matching two-sided p-value.
pub fn wald_ci(estimate: f64, variance: f64, n: usize, alpha: f64) -> Result<Wald> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("α must lie in (0, 1), got {alpha}")));
    }
    let (p_value, degenerate) = pvalue(estimate, variance, n)?;
    let se = (variance / n as f64).sqrt();
    let interval = if degenerate {
        None
    } else {
        let z = norm_quantile(1.0 - alpha / 2.0);
        Some((estimate - z * se, estimate + z * se))
    };
    Ok(Wald {
        estimate,
        std_error: se,
        interval,
        p_value,
        degenerate,
    })
}

/// Several estimates with the covariance of their influence functions.
#[derive(Debug, Clone, PartialEq)]
pub struct JointEstimate {
    pub estimate: Vec<f64>,
    /// `Σ̂_jk = (1/n) Σ_i D_j(o_i) D_k(o_i)`.
    pub covariance: DMatrix<f64>,
    pub n: usize,
    /// Per-component EIF vectors, when known.
    pub eif: Option<Vec<Vec<f64>>>,
}

impl JointEstimate {
    pub fn from_eifs(estimate: Vec<f64>, eif: Vec<Vec<f64>>) -> Result<JointEstimate> {
        let p = estimate.len();
        if eif.len() != p {
            return Err(Error::LengthMismatch {
                what: "estimates vs EIF vectors".into(),
                left: p,
                right: eif.len(),
            });
        }
        if p == 0 {
            return Err(Error::Empty("joint estimate".into()));
        }
        let n = eif[0].len();
        if n == 0 {
            return Err(Error::Empty("EIF vectors".into()));
        }
        if let Some(bad) = eif.iter().find(|d| d.len() != n) {
            return Err(Error::LengthMismatch {
                what: "EIF vector lengths".into(),
                left: bad.len(),
                right: n,
            });
        }
        let mut cov = DMatrix::zeros(p, p);
        for j in 0..p {
            for k in 0..=j {
                let v = compensated_sum((0..n).map(|i| eif[j][i] * eif[k][i])) / n as f64;
                cov[(j, k)] = v;
                cov[(k, j)] = v;
            }
        }
        Ok(JointEstimate {
            estimate,
            covariance: cov,
            n,
            eif: Some(eif),
        })
    }

    /// Joint estimate over reports computed on identical rows.
    pub fn from_reports(reports: &[&EstimateReport]) -> Result<JointEstimate> {
        if let Some(first) = reports.first() {
            if reports.iter().any(|r| r.rows != first.rows) {
                return Err(Error::invalid(
                    "joint inference needs estimates computed on the same rows",
                ));
            }
        }
        JointEstimate::from_eifs(
            reports.iter().map(|r| r.estimate).collect(),
            reports.iter().map(|r| r.eif.clone()).collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.estimate.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Hotelling {
    pub t2: f64,
    pub f_stat: f64,
    pub df1: usize,
    pub df2: usize,
    pub p_value: f64,
    pub condition_number: f64,
}

/// `t² = n (ψ - ψ₀)ᵀ Σ̂⁻¹ (ψ - ψ₀)`, referred to `p(n-1)/(n-p) F_{p, n-p}`.
pub fn hotelling(joint: &JointEstimate, null: &[f64]) -> Result<Hotelling> {
    let p = joint.dim();
    if null.len() != p {
        return Err(Error::LengthMismatch {
            what: "null vector".into(),
            left: null.len(),
            right: p,
        });
    }
    if joint.n <= p {
        return Err(Error::invalid(format!(
            "Hotelling test needs n > p (n = {}, p = {p})",
            joint.n
        )));
    }
    let cond = condition_number(&joint.covariance);
    let rank = numerical_rank(&joint.covariance);
    if rank < p {
        return Err(Error::Singular { rank, dim: p });
    }
    let d = DVector::from_iterator(p, joint.estimate.iter().zip(null).map(|(a, b)| a - b));
    let chol = joint
        .covariance
        .clone()
        .cholesky()
        .ok_or(Error::Singular { rank, dim: p })?;
    let sol = chol.solve(&d);
    let t2 = (joint.n as f64 * d.dot(&sol)).max(0.0);
    let n = joint.n as f64;
    let pf = p as f64;
    let f_stat = t2 * (n - pf) / (pf * (n - 1.0));
    Ok(Hotelling {
        t2,
        f_stat,
        df1: p,
        df2: joint.n - p,
        p_value: f_sf(f_stat, pf, n - pf),
        condition_number: cond,
    })
}

type MapFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
type JacobianFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;

/// A map `R^p -> R^q` for the delta method.
#[derive(Clone)]
pub enum Transform {
    /// `f(x) = A x` with `A` of shape `q × p`.
    Linear(DMatrix<f64>),
    /// General map with an optional analytic Jacobian; central finite
    /// differences are used when it is absent.
    Map {
        f: MapFn,
        jacobian: Option<JacobianFn>,
    },
}

impl std::fmt::Debug for Transform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Transform::Linear(a) => f.debug_tuple("Linear").field(a).finish(),
            Transform::Map { jacobian, .. } => f
                .debug_struct("Map")
                .field("analytic_jacobian", &jacobian.is_some())
                .finish(),
        }
    }
}

impl Transform {
    /// `f(x1, x2) = x2 - x1`.
    pub fn difference() -> Transform {
        Transform::Linear(DMatrix::from_row_slice(1, 2, &[-1.0, 1.0]))
    }

    pub fn map<F>(f: F) -> Transform
    where
        F: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        Transform::Map {
            f: Arc::new(f),
            jacobian: None,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Transform::Linear(a) => (a * DVector::from_column_slice(x))
                .iter()
                .copied()
                .collect(),
            Transform::Map { f, .. } => f(x),
        }
    }

    pub fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        match self {
            Transform::Linear(a) => a.clone(),
            Transform::Map {
                jacobian: Some(j), ..
            } => j(x),
            Transform::Map { f, jacobian: None } => {
                let q = f(x).len();
                let p = x.len();
                let mut jac = DMatrix::zeros(q, p);
                let mut xp = x.to_vec();
                for j in 0..p {
                    let h = 1e-6 * x[j].abs().max(1.0);
                    xp[j] = x[j] + h;
                    let up = f(&xp);
                    xp[j] = x[j] - h;
                    let down = f(&xp);
                    xp[j] = x[j];
                    for r in 0..q {
                        jac[(r, j)] = (up[r] - down[r]) / (2.0 * h);
                    }
                }
                jac
            }
        }
    }
}

/// New estimate `f(ψ)` with covariance `J Σ̂ Jᵀ`; EIF vectors, when present,
/// are mapped to `J D`.
pub fn delta_method(joint: &JointEstimate, transform: &Transform) -> Result<JointEstimate> {
    let p = joint.dim();
    let jac = transform.jacobian(&joint.estimate);
    if jac.ncols() != p {
        return Err(Error::LengthMismatch {
            what: "Jacobian columns".into(),
            left: jac.ncols(),
            right: p,
        });
    }
    if jac.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Jacobian".into()));
    }
    let estimate = transform.apply(&joint.estimate);
    if estimate.len() != jac.nrows() {
        return Err(Error::LengthMismatch {
            what: "transform output vs Jacobian rows".into(),
            left: estimate.len(),
            right: jac.nrows(),
        });
    }
    let covariance = &jac * &joint.covariance * jac.transpose();
    let eif = joint.eif.as_ref().map(|d| {
        (0..jac.nrows())
            .map(|r| {
                (0..joint.n)
                    .map(|i| compensated_sum((0..p).map(|j| jac[(r, j)] * d[j][i])))
                    .collect()
            })
            .collect()
    });
    Ok(JointEstimate {
        estimate,
        covariance,
        n: joint.n,
        eif,
    })
}

/// `ψ_Δ = ψ₂ - ψ₁` with per-sample EIF `D₂ - D₁`.
pub fn allelic_effect_difference(
    first: &EstimateReport,
    second: &EstimateReport,
) -> Result<EstimateReport> {
    if first.rows != second.rows || first.eif.len() != second.eif.len() {
        return Err(Error::invalid(
            "effect difference needs both estimates on the same rows",
        ));
    }
    if first.eif.is_empty() {
        return Err(Error::Empty("EIF vectors".into()));
    }
    let eif: Vec<f64> = second
        .eif
        .iter()
        .zip(&first.eif)
        .map(|(b, a)| b - a)
        .collect();
    let variance = compensated_sum(eif.iter().map(|d| d * d)) / eif.len() as f64;
    Ok(EstimateReport {
        estimator: second.estimator,
        estimate: second.estimate - first.estimate,
        n: eif.len(),
        eif,
        variance,
        rows: second.rows.clone(),
        epsilon: None,
        residual_bias: second.residual_bias - first.residual_bias,
        counterfactual_means: Vec::new(),
        converged: first.converged && second.converged,
        bias_within_tolerance: first.bias_within_tolerance && second.bias_within_tolerance,
        clipped: first.clipped + second.clipped,
        extrapolated: first.extrapolated || second.extrapolated,
        filter: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wald_examples() {
        let w = wald_ci(1.0, 4.0, 400, 0.05).unwrap();
        let (lo, hi) = w.interval.unwrap();
        assert!((lo - 0.804).abs() < 5e-4 && (hi - 1.196).abs() < 5e-4);
        assert!((lo - (1.0 - 1.959_963_984_540_054 * 0.1)).abs() < 1e-14);
        assert_eq!(pvalue(0.0, 1.0, 10).unwrap().0, 1.0);
        assert_eq!(pvalue(0.0, 0.0, 10).unwrap(), (1.0, true));
        let deg = wald_ci(0.5, 0.0, 10, 0.05).unwrap();
        assert_eq!(
            (deg.p_value, deg.degenerate, deg.interval),
            (0.0, true, None)
        );
        assert!(matches!(
            wald_ci(0.5, -1.0, 10, 0.05),
            Err(Error::NegativeVariance(_))
        ));
    }

    #[test]
    fn wider_interval_at_lower_alpha() {
        let a = wald_ci(0.3, 2.0, 100, 0.05).unwrap().interval.unwrap();
        let b = wald_ci(0.3, 2.0, 100, 0.01).unwrap().interval.unwrap();
        assert!(b.0 < a.0 && b.1 > a.1);
    }

    fn joint2() -> JointEstimate {
        let d1: Vec<f64> = (0..50).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let d2: Vec<f64> = (0..50)
            .map(|i| ((i * 3) % 7) as f64 - 3.0 + 0.2 * d1[i])
            .collect();
        JointEstimate::from_eifs(vec![0.4, 0.1], vec![d1, d2]).unwrap()
    }

    #[test]
    fn hotelling_null_and_singular() {
        let j = joint2();
        let h = hotelling(&j, &[0.4, 0.1]).unwrap();
        assert_eq!(h.t2, 0.0);
        assert_eq!(h.p_value, 1.0);
        let d: Vec<f64> = (0..20).map(|i| i as f64 - 9.5).collect();
        let sing = JointEstimate::from_eifs(vec![0.0, 0.0], vec![d.clone(), d]).unwrap();
        assert!(matches!(
            hotelling(&sing, &[1.0, 1.0]),
            Err(Error::Singular { rank: 1, dim: 2 })
        ));
    }

    #[test]
    fn hotelling_is_invariant_to_reparameterisation() {
        let j = joint2();
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, -0.5, 3.0]);
        let base = hotelling(&j, &[0.0, 0.0]).unwrap();
        let moved = delta_method(&j, &Transform::Linear(a)).unwrap();
        let h = hotelling(&moved, &[0.0, 0.0]).unwrap();
        assert!((h.t2 - base.t2).abs() < 1e-10 * base.t2);
    }

    #[test]
    fn delta_examples() {
        let j = joint2();
        let id = delta_method(&j, &Transform::Linear(DMatrix::identity(2, 2))).unwrap();
        assert_eq!(id.estimate, j.estimate);
        assert_eq!(id.covariance, j.covariance);
        let diff = delta_method(&j, &Transform::difference()).unwrap();
        let c = &j.covariance;
        let want = c[(0, 0)] - 2.0 * c[(0, 1)] + c[(1, 1)];
        assert!((diff.covariance[(0, 0)] - want).abs() < 1e-12);
        let scaled = delta_method(&j, &Transform::map(|x| vec![3.0 * x[0]])).unwrap();
        assert!((scaled.covariance[(0, 0)] - 9.0 * c[(0, 0)]).abs() < 1e-6);
    }

    #[test]
    fn delta_chain_rule() {
        let j = joint2();
        let f = Transform::map(|x| vec![x[0] * x[1], x[0].exp()]);
        let g = Transform::map(|x| vec![x[0] + x[1].ln()]);
        let composed = Transform::map(|x| vec![x[0] * x[1] + x[0]]);
        let two_step = delta_method(&delta_method(&j, &f).unwrap(), &g).unwrap();
        let one_step = delta_method(&j, &composed).unwrap();
        assert!((two_step.estimate[0] - one_step.estimate[0]).abs() < 1e-12);
        assert!((two_step.covariance[(0, 0)] - one_step.covariance[(0, 0)]).abs() < 1e-6);
    }
}
