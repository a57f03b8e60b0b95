use super::{
    eif_values, variance_cv, variance_iid, EstimateReport, Estimator, NuisanceEval,
    BINARY_BIAS_TOL, CONTINUOUS_BIAS_TOL,
};
use crate::data::OutcomeKind;
use crate::error::{Error, Result};
use crate::learners::glm::{expit, logit, PROB_CLIP};
use crate::linalg::{compensated_sum, mean};

const NEWTON_TOL: f64 = 1e-10;
const NEWTON_MAX_ITER: usize = 50;

/// Dispatches to the estimator; CV estimators need a cross-fitted evaluation.
pub fn estimate(estimator: Estimator, eval: &NuisanceEval) -> Result<EstimateReport> {
    match estimator {
        Estimator::Plugin => plugin(eval),
        Estimator::Ose => ose(eval),
        Estimator::Tmle => tmle(eval, false),
        Estimator::Wtmle => tmle(eval, true),
        Estimator::CvOse => cv_ose(eval),
        Estimator::CvTmle => cv_tmle(eval, false),
        Estimator::CvWtmle => cv_tmle(eval, true),
    }
}

fn require_canonical(eval: &NuisanceEval) -> Result<()> {
    if eval.folds.is_some() {
        return Err(Error::invalid(
            "canonical estimators need fits on the full sample, got cross-fitted predictions",
        ));
    }
    Ok(())
}

fn require_cv(eval: &NuisanceEval) -> Result<()> {
    if eval.folds.is_none() {
        return Err(Error::invalid(
            "cross-validated estimators need cross-fitted predictions",
        ));
    }
    Ok(())
}

fn term_means(q_cf: &[Vec<f64>]) -> Vec<f64> {
    q_cf.iter().map(|q| mean(q)).collect()
}

fn contrast(signs: &[f64], means: &[f64]) -> f64 {
    compensated_sum(signs.iter().zip(means).map(|(s, m)| s * m))
}

fn residual_bias(h: &[f64], y: &[f64], q_obs: &[f64]) -> f64 {
    compensated_sum((0..y.len()).map(|i| h[i] * (y[i] - q_obs[i]))) / y.len() as f64
}

struct Base<'a> {
    eval: &'a NuisanceEval,
    estimator: Estimator,
}

impl Base<'_> {
    fn report(
        &self,
        estimate: f64,
        eif: Vec<f64>,
        variance: f64,
        residual_bias: f64,
        counterfactual_means: Vec<f64>,
    ) -> EstimateReport {
        EstimateReport {
            estimator: self.estimator,
            estimate,
            n: eif.len(),
            eif,
            variance,
            rows: self.eval.rows.clone(),
            epsilon: None,
            residual_bias,
            counterfactual_means,
            converged: true,
            bias_within_tolerance: true,
            clipped: 0,
            extrapolated: !self.eval.unobserved_terms().is_empty(),
            filter: None,
        }
    }
}

/// Substitution estimator with the empirical covariate distribution. The EIF
/// is centred explicitly since its mean is `B_n`, not zero.
pub fn plugin(eval: &NuisanceEval) -> Result<EstimateReport> {
    require_canonical(eval)?;
    let means = term_means(&eval.q_cf);
    let psi = contrast(&eval.signs, &means);
    let h = eval.clever();
    let bn = residual_bias(&h, &eval.y, &eval.q_obs);
    let eif = eif_values(&h, &eval.y, &eval.q_obs, &eval.signs, &eval.q_cf, psi + bn);
    let variance = variance_iid(&eif)?;
    Ok(Base {
        eval,
        estimator: Estimator::Plugin,
    }
    .report(psi, eif, variance, bn, means))
}

/// One-step estimator: plug-in plus the empirical mean of the EIF.
pub fn ose(eval: &NuisanceEval) -> Result<EstimateReport> {
    require_canonical(eval)?;
    eval.require_observed()?;
    one_step(eval, Estimator::Ose)
}

/// Cross-validated one-step estimator over out-of-fold predictions.
pub fn cv_ose(eval: &NuisanceEval) -> Result<EstimateReport> {
    require_cv(eval)?;
    eval.require_observed()?;
    one_step(eval, Estimator::CvOse)
}

fn one_step(eval: &NuisanceEval, estimator: Estimator) -> Result<EstimateReport> {
    let h = eval.clever();
    let bn = residual_bias(&h, &eval.y, &eval.q_obs);
    let n = eval.n() as f64;
    // Per-term corrected means: mean Q̄(a(s)) + mean 1{A = a(s)}/g (Y - Q̄).
    let mut means = term_means(&eval.q_cf);
    for (s, m) in means.iter_mut().enumerate() {
        let corr = compensated_sum(
            (0..eval.n())
                .filter(|&i| eval.matched[i] == Some(s))
                .map(|i| (eval.y[i] - eval.q_obs[i]) / eval.g_cf[s][i]),
        );
        *m += corr / n;
    }
    let plug = contrast(&eval.signs, &term_means(&eval.q_cf));
    let psi = plug + bn;
    let base = Base { eval, estimator };
    match &eval.folds {
        None => {
            let eif = eif_values(&h, &eval.y, &eval.q_obs, &eval.signs, &eval.q_cf, psi);
            let variance = variance_iid(&eif)?;
            Ok(base.report(psi, eif, variance, bn, means))
        }
        Some(folds) => {
            let raw = eif_values(&h, &eval.y, &eval.q_obs, &eval.signs, &eval.q_cf, 0.0);
            let eif = center_by_fold(&raw, folds);
            let variance = variance_cv(&eif, folds)?;
            Ok(base.report(psi, eif, variance, bn, means))
        }
    }
}

/// Subtracts each fold's mean so every fold's EIF is centred at its own
/// estimate.
fn center_by_fold(raw: &[f64], folds: &crate::learners::Folds) -> Vec<f64> {
    let mut out = raw.to_vec();
    for k in 0..folds.k() {
        let rows = folds.test_rows(k);
        let m = compensated_sum(rows.iter().map(|&i| raw[i])) / rows.len() as f64;
        for i in rows {
            out[i] -= m;
        }
    }
    out
}

/// Targeted estimator with one fluctuation pass.
pub fn tmle(eval: &NuisanceEval, weighted: bool) -> Result<EstimateReport> {
    require_canonical(eval)?;
    eval.require_observed()?;
    let est = if weighted {
        Estimator::Wtmle
    } else {
        Estimator::Tmle
    };
    targeted(eval, weighted, est)
}

/// Cross-validated targeted estimator with a single pooled fluctuation.
pub fn cv_tmle(eval: &NuisanceEval, weighted: bool) -> Result<EstimateReport> {
    require_cv(eval)?;
    eval.require_observed()?;
    let est = if weighted {
        Estimator::CvWtmle
    } else {
        Estimator::CvTmle
    };
    targeted(eval, weighted, est)
}

/// Covariate and weight of the fluctuation regression for row `i` at term `s`.
fn fluct(eval: &NuisanceEval, weighted: bool, s: usize, i: usize) -> (f64, f64) {
    let g = eval.g_cf[s][i];
    if weighted {
        (eval.signs[s], 1.0 / g)
    } else {
        (eval.signs[s] / g, 1.0)
    }
}

struct Fluctuated {
    epsilon: f64,
    q_obs: Vec<f64>,
    q_cf: Vec<Vec<f64>>,
    converged: bool,
    clipped: usize,
}

fn targeted(eval: &NuisanceEval, weighted: bool, estimator: Estimator) -> Result<EstimateReport> {
    let fl = match eval.kind {
        OutcomeKind::Continuous => fluctuate_linear(eval, weighted),
        OutcomeKind::Binary => fluctuate_logistic(eval, weighted),
    };
    let h = eval.clever();
    let bn = residual_bias(&h, &eval.y, &fl.q_obs);
    let tol = match eval.kind {
        OutcomeKind::Continuous => CONTINUOUS_BIAS_TOL,
        OutcomeKind::Binary => BINARY_BIAS_TOL,
    };
    let means = term_means(&fl.q_cf);
    let psi = contrast(&eval.signs, &means);
    let (eif, variance) = match &eval.folds {
        None => {
            let eif = eif_values(&h, &eval.y, &fl.q_obs, &eval.signs, &fl.q_cf, psi);
            let v = variance_iid(&eif)?;
            (eif, v)
        }
        Some(folds) => {
            let raw = eif_values(&h, &eval.y, &fl.q_obs, &eval.signs, &fl.q_cf, 0.0);
            // Centre by the fold-specific substitution estimate.
            let mut eif = raw;
            for k in 0..folds.k() {
                let rows = folds.test_rows(k);
                let psi_k = compensated_sum(rows.iter().map(|&i| {
                    compensated_sum(eval.signs.iter().zip(&fl.q_cf).map(|(s, q)| s * q[i]))
                })) / rows.len() as f64;
                for i in rows {
                    eif[i] -= psi_k;
                }
            }
            let v = variance_cv(&eif, folds)?;
            (eif, v)
        }
    };
    let mut report = Base { eval, estimator }.report(psi, eif, variance, bn, means);
    report.epsilon = Some(fl.epsilon);
    report.converged = fl.converged;
    report.clipped = fl.clipped;
    report.bias_within_tolerance = bn.abs() <= tol;
    Ok(report)
}

/// Least-squares fluctuation `Q̄ + εH` (or `Q̄ + εH'` with weights `1/g`).
fn fluctuate_linear(eval: &NuisanceEval, weighted: bool) -> Fluctuated {
    let matched: Vec<(usize, usize)> = (0..eval.n())
        .filter_map(|i| eval.matched[i].map(|s| (i, s)))
        .collect();
    let num = compensated_sum(matched.iter().map(|&(i, s)| {
        let (x, wt) = fluct(eval, weighted, s, i);
        wt * x * (eval.y[i] - eval.q_obs[i])
    }));
    let den = compensated_sum(matched.iter().map(|&(i, s)| {
        let (x, wt) = fluct(eval, weighted, s, i);
        wt * x * x
    }));
    let epsilon = if den > 0.0 { num / den } else { 0.0 };
    let mut q_obs = eval.q_obs.clone();
    for &(i, s) in &matched {
        q_obs[i] += epsilon * fluct(eval, weighted, s, i).0;
    }
    let q_cf = (0..eval.q_cf.len())
        .map(|s| {
            (0..eval.n())
                .map(|i| eval.q_cf[s][i] + epsilon * fluct(eval, weighted, s, i).0)
                .collect()
        })
        .collect();
    Fluctuated {
        epsilon,
        q_obs,
        q_cf,
        converged: true,
        clipped: 0,
    }
}

fn clip_count(p: f64, clipped: &mut usize) -> f64 {
    if !(PROB_CLIP..=1.0 - PROB_CLIP).contains(&p) {
        *clipped += 1;
    }
    p.clamp(PROB_CLIP, 1.0 - PROB_CLIP)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic fluctuation `logit Q̄* = logit Q̄ + εH`, ε by damped Newton.
fn fluctuate_logistic(eval: &NuisanceEval, weighted: bool) -> Fluctuated {
    let mut clipped = 0;
    let offsets: Vec<f64> = eval
        .q_obs
        .iter()
        .map(|&q| logit(clip_count(q, &mut clipped)))
        .collect();
    // (offset, covariate, weight, y) for rows that carry the covariate.
    let rows: Vec<(f64, f64, f64, f64)> = (0..eval.n())
        .filter_map(|i| {
            eval.matched[i].map(|s| {
                let (x, wt) = fluct(eval, weighted, s, i);
                (offsets[i], x, wt, eval.y[i])
            })
        })
        .collect();
    let loss = |eps: f64| -> f64 {
        compensated_sum(
            rows.iter()
                .map(|&(o, x, wt, y)| wt * (softplus(o + eps * x) - y * (o + eps * x))),
        )
    };
    let mut eps = 0.0;
    let mut current = loss(eps);
    let mut converged = false;
    for _ in 0..NEWTON_MAX_ITER {
        let mut score = Vec::with_capacity(rows.len());
        let mut info = Vec::with_capacity(rows.len());
        for &(o, x, wt, y) in &rows {
            let p = expit(o + eps * x);
            score.push(wt * x * (y - p));
            info.push(wt * x * x * p * (1.0 - p));
        }
        let u = compensated_sum(score);
        let i_eps = compensated_sum(info);
        if i_eps <= 0.0 || !i_eps.is_finite() {
            converged = u == 0.0;
            break;
        }
        let step = u / i_eps;
        let mut t = 1.0;
        let mut cand = eps + step;
        let mut cand_loss = loss(cand);
        while cand_loss > current && t > 1e-12 {
            t *= 0.5;
            cand = eps + t * step;
            cand_loss = loss(cand);
        }
        let moved = (cand - eps).abs();
        eps = cand;
        current = cand_loss;
        if moved < NEWTON_TOL * (1.0 + eps.abs()) {
            converged = true;
            break;
        }
    }
    let q_obs: Vec<f64> = (0..eval.n())
        .map(|i| match eval.matched[i] {
            Some(s) => expit(offsets[i] + eps * fluct(eval, weighted, s, i).0),
            None => expit(offsets[i]),
        })
        .collect();
    let q_cf = (0..eval.q_cf.len())
        .map(|s| {
            (0..eval.n())
                .map(|i| {
                    let o = logit(clip_count(eval.q_cf[s][i], &mut clipped));
                    expit(o + eps * fluct(eval, weighted, s, i).0)
                })
                .collect()
        })
        .collect();
    Fluctuated {
        epsilon: eps,
        q_obs,
        q_cf,
        converged,
        clipped,
    }
}
