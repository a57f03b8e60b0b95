//! Ridge-penalised generalized linear models.
//!
//! All fits minimise `sum_i loss_i + (lambda / 2) * ||beta||^2` with an
//! unpenalised intercept, where the Gaussian loss is `(y - eta)^2 / 2` and the
//! binomial/multinomial losses are negative log-likelihoods. The Gaussian
//! normal equations are therefore `(Xc'Xc + lambda I) beta = Xc'(y - ybar)`
//! on centred columns.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{solve_symmetric, RowMatrix};

pub const PROB_CLIP: f64 = 1e-8;
const MAX_IRLS_ITER: usize = 100;
const GRAD_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Gaussian,
    Binomial,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Glm {
    pub family: Family,
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl Glm {
    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        self.intercept
            + self
                .coefficients
                .iter()
                .zip(x)
                .map(|(b, v)| b * v)
                .sum::<f64>()
    }

    /// Mean response: identity for Gaussian, clipped inverse logit for binomial.
    pub fn predict(&self, x: &[f64]) -> f64 {
        let eta = self.linear_predictor(x);
        match self.family {
            Family::Gaussian => eta,
            Family::Binomial => expit(eta).clamp(PROB_CLIP, 1.0 - PROB_CLIP),
        }
    }

    /// Euclidean norm of the penalised coefficients.
    pub fn slope_norm(&self) -> f64 {
        self.coefficients.iter().map(|b| b * b).sum::<f64>().sqrt()
    }
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn validate(x: &RowMatrix, y: &[f64]) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::Empty("design matrix has zero rows".into()));
    }
    if x.nrows() != y.len() {
        return Err(Error::LengthMismatch {
            what: "features vs response".into(),
            left: x.nrows(),
            right: y.len(),
        });
    }
    if !x.all_finite() {
        return Err(Error::NonFinite("feature matrix".into()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("response".into()));
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::invalid(format!(
            "ridge weight must be finite and >= 0, got {lambda}"
        )));
    }
    Ok(())
}

pub fn fit_glm(x: &RowMatrix, y: &[f64], family: Family, lambda: f64) -> Result<Glm> {
    check_lambda(lambda)?;
    validate(x, y)?;
    match family {
        Family::Gaussian => fit_gaussian(x, y, lambda),
        Family::Binomial => {
            if y.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::invalid("binomial response must be 0 or 1"));
            }
            fit_binomial(x, y, lambda)
        }
    }
}

fn column_means(x: &RowMatrix) -> Vec<f64> {
    let n = x.nrows() as f64;
    let mut m = vec![0.0; x.ncols()];
    for i in 0..x.nrows() {
        for (mj, v) in m.iter_mut().zip(x.row(i)) {
            *mj += v;
        }
    }
    m.iter_mut().for_each(|v| *v /= n);
    m
}

fn fit_gaussian(x: &RowMatrix, y: &[f64], lambda: f64) -> Result<Glm> {
    let n = x.nrows();
    let p = x.ncols();
    let xm = column_means(x);
    let ym = y.iter().sum::<f64>() / n as f64;
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut b = DVector::<f64>::zeros(p);
    let mut xc = vec![0.0; p];
    for i in 0..n {
        for (j, v) in x.row(i).iter().enumerate() {
            xc[j] = v - xm[j];
        }
        let yc = y[i] - ym;
        for j in 0..p {
            b[j] += xc[j] * yc;
            for k in 0..=j {
                a[(j, k)] += xc[j] * xc[k];
            }
        }
    }
    for j in 0..p {
        for k in 0..j {
            a[(k, j)] = a[(j, k)];
        }
        a[(j, j)] += lambda;
    }
    let beta = solve_symmetric(&a, &b)?;
    let intercept = ym - beta.iter().zip(&xm).map(|(b, m)| b * m).sum::<f64>();
    Ok(Glm {
        family: Family::Gaussian,
        intercept,
        coefficients: beta.iter().copied().collect(),
        iterations: 1,
        converged: true,
    })
}

fn binomial_objective(x: &RowMatrix, y: &[f64], b0: f64, beta: &[f64], lambda: f64) -> f64 {
    let mut loss = 0.0;
    for i in 0..x.nrows() {
        let eta = b0 + beta.iter().zip(x.row(i)).map(|(b, v)| b * v).sum::<f64>();
        // log(1 + e^eta) - y * eta, evaluated stably
        let softplus = if eta > 0.0 {
            eta + (-eta).exp().ln_1p()
        } else {
            eta.exp().ln_1p()
        };
        loss += softplus - y[i] * eta;
    }
    loss + 0.5 * lambda * beta.iter().map(|b| b * b).sum::<f64>()
}

fn fit_binomial(x: &RowMatrix, y: &[f64], lambda: f64) -> Result<Glm> {
    let n = x.nrows();
    let p = x.ncols();
    let ybar = y.iter().sum::<f64>() / n as f64;
    let clipped_mean = ybar.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
    if ybar == 0.0 || ybar == 1.0 {
        // Separated in the intercept: the penalised optimum lies at infinity.
        return Ok(Glm {
            family: Family::Binomial,
            intercept: logit(clipped_mean),
            coefficients: vec![0.0; p],
            iterations: 0,
            converged: true,
        });
    }
    let dim = p + 1;
    let mut theta = DVector::<f64>::zeros(dim);
    theta[0] = logit(clipped_mean);
    let mut obj = binomial_objective(x, y, theta[0], &theta.as_slice()[1..], lambda);
    let mut converged = false;
    let mut iterations = 0;
    let mut z = vec![1.0; dim];
    for it in 0..MAX_IRLS_ITER {
        iterations = it + 1;
        let mut grad = DVector::<f64>::zeros(dim);
        let mut hess = DMatrix::<f64>::zeros(dim, dim);
        for i in 0..n {
            z[1..].copy_from_slice(x.row(i));
            let eta: f64 = z.iter().zip(theta.iter()).map(|(a, b)| a * b).sum();
            let mu = expit(eta);
            let w = (mu * (1.0 - mu)).max(1e-12);
            let r = mu - y[i];
            for j in 0..dim {
                grad[j] += z[j] * r;
                for k in 0..=j {
                    hess[(j, k)] += w * z[j] * z[k];
                }
            }
        }
        for j in 0..dim {
            for k in 0..j {
                hess[(k, j)] = hess[(j, k)];
            }
        }
        for j in 1..dim {
            grad[j] += lambda * theta[j];
            hess[(j, j)] += lambda;
        }
        if grad.norm() / n as f64 <= GRAD_TOL {
            converged = true;
            break;
        }
        let step = solve_symmetric(&hess, &grad)?;
        let mut t = 1.0;
        loop {
            let cand = &theta - &step * t;
            let cand_obj = binomial_objective(x, y, cand[0], &cand.as_slice()[1..], lambda);
            if cand_obj <= obj + 1e-12 * obj.abs().max(1.0) || t < 1e-10 {
                theta = cand;
                obj = cand_obj;
                break;
            }
            t *= 0.5;
        }
    }
    Ok(Glm {
        family: Family::Binomial,
        intercept: theta[0],
        coefficients: theta.as_slice()[1..].to_vec(),
        iterations,
        converged,
    })
}

/// Multinomial logit with class 0 as reference. Classes never observed in the
/// training labels are excluded from the fit and predicted with probability 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Multinomial {
    pub n_classes: usize,
    /// One `(intercept, slopes)` row per non-reference fitted class.
    pub coefficients: Vec<(f64, Vec<f64>)>,
    /// Fitted class ids; index 0 of this list is the reference.
    pub classes: Vec<u32>,
    pub iterations: usize,
    pub converged: bool,
}

impl Multinomial {
    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_classes];
        if self.classes.len() == 1 {
            out[self.classes[0] as usize] = 1.0;
            return out;
        }
        let etas: Vec<f64> = self
            .coefficients
            .iter()
            .map(|(b0, b)| b0 + b.iter().zip(x).map(|(c, v)| c * v).sum::<f64>())
            .collect();
        let m = etas.iter().cloned().fold(0.0_f64, f64::max);
        let ref_term = (-m).exp();
        let denom = ref_term + etas.iter().map(|e| (e - m).exp()).sum::<f64>();
        out[self.classes[0] as usize] = ref_term / denom;
        for (c, e) in self.classes[1..].iter().zip(&etas) {
            out[*c as usize] = (e - m).exp() / denom;
        }
        out
    }
}

fn multinomial_objective(
    x: &RowMatrix,
    labels: &[usize],
    theta: &DVector<f64>,
    k: usize,
    lambda: f64,
) -> f64 {
    let p1 = x.ncols() + 1;
    let mut loss = 0.0;
    let mut etas = vec![0.0; k];
    for i in 0..x.nrows() {
        let row = x.row(i);
        for (c, e) in etas.iter_mut().enumerate() {
            let o = c * p1;
            *e = theta[o]
                + row
                    .iter()
                    .enumerate()
                    .map(|(j, v)| theta[o + 1 + j] * v)
                    .sum::<f64>();
        }
        let m = etas.iter().cloned().fold(0.0_f64, f64::max);
        let lse = m + ((-m).exp() + etas.iter().map(|e| (e - m).exp()).sum::<f64>()).ln();
        let own = if labels[i] == 0 {
            0.0
        } else {
            etas[labels[i] - 1]
        };
        loss += lse - own;
    }
    let mut pen = 0.0;
    for c in 0..k {
        for j in 0..x.ncols() {
            pen += theta[c * p1 + 1 + j].powi(2);
        }
    }
    loss + 0.5 * lambda * pen
}

pub fn fit_multinomial(
    x: &RowMatrix,
    labels: &[u32],
    n_classes: usize,
    lambda: f64,
) -> Result<Multinomial> {
    check_lambda(lambda)?;
    let yf: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
    validate(x, &yf)?;
    if labels.iter().any(|&l| l as usize >= n_classes) {
        return Err(Error::invalid("class label outside the declared level set"));
    }
    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        counts[l as usize] += 1;
    }
    let classes: Vec<u32> = (0..n_classes as u32)
        .filter(|&c| counts[c as usize] > 0)
        .collect();
    let n = x.nrows();
    let p = x.ncols();
    if classes.len() == 1 {
        return Ok(Multinomial {
            n_classes,
            coefficients: vec![],
            classes,
            iterations: 0,
            converged: true,
        });
    }
    // Relabel to 0..fitted.
    let idx: Vec<usize> = labels
        .iter()
        .map(|&l| classes.iter().position(|&c| c == l).unwrap())
        .collect();
    let k = classes.len() - 1;
    let p1 = p + 1;
    let dim = k * p1;
    let mut theta = DVector::<f64>::zeros(dim);
    let ref_count = counts[classes[0] as usize] as f64;
    for c in 0..k {
        theta[c * p1] = (counts[classes[c + 1] as usize] as f64 / ref_count).ln();
    }
    let mut obj = multinomial_objective(x, &idx, &theta, k, lambda);
    let mut converged = false;
    let mut iterations = 0;
    let mut z = vec![1.0; p1];
    let mut probs = vec![0.0; k];
    for it in 0..MAX_IRLS_ITER {
        iterations = it + 1;
        let mut grad = DVector::<f64>::zeros(dim);
        let mut hess = DMatrix::<f64>::zeros(dim, dim);
        for i in 0..n {
            z[1..].copy_from_slice(x.row(i));
            for (c, pc) in probs.iter_mut().enumerate() {
                *pc = z
                    .iter()
                    .enumerate()
                    .map(|(j, v)| theta[c * p1 + j] * v)
                    .sum();
            }
            let m = probs.iter().cloned().fold(0.0_f64, f64::max);
            let denom = (-m).exp() + probs.iter().map(|e| (e - m).exp()).sum::<f64>();
            for pc in probs.iter_mut() {
                *pc = (*pc - m).exp() / denom;
            }
            for c in 0..k {
                let r = probs[c] - if idx[i] == c + 1 { 1.0 } else { 0.0 };
                for a in 0..p1 {
                    grad[c * p1 + a] += r * z[a];
                }
                for d in 0..=c {
                    let w = if c == d {
                        probs[c] * (1.0 - probs[c])
                    } else {
                        -probs[c] * probs[d]
                    };
                    for a in 0..p1 {
                        for b in 0..p1 {
                            hess[(c * p1 + a, d * p1 + b)] += w * z[a] * z[b];
                        }
                    }
                }
            }
        }
        for r in 0..dim {
            for s in 0..r {
                hess[(s, r)] = hess[(r, s)];
            }
        }
        for c in 0..k {
            for j in 0..p {
                let o = c * p1 + 1 + j;
                grad[o] += lambda * theta[o];
                hess[(o, o)] += lambda;
            }
            hess[(c * p1, c * p1)] += 1e-12 * n as f64;
        }
        if grad.norm() / n as f64 <= GRAD_TOL {
            converged = true;
            break;
        }
        let step = solve_symmetric(&hess, &grad)?;
        let mut t = 1.0;
        loop {
            let cand = &theta - &step * t;
            let cand_obj = multinomial_objective(x, &idx, &cand, k, lambda);
            if cand_obj <= obj + 1e-12 * obj.abs().max(1.0) || t < 1e-10 {
                theta = cand;
                obj = cand_obj;
                break;
            }
            t *= 0.5;
        }
    }
    Ok(Multinomial {
        n_classes,
        coefficients: (0..k)
            .map(|c| {
                (
                    theta[c * p1],
                    theta.as_slice()[c * p1 + 1..(c + 1) * p1].to_vec(),
                )
            })
            .collect(),
        classes,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn design(rows: &[Vec<f64>]) -> RowMatrix {
        RowMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn noiseless_line_is_recovered() {
        let xs: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 * 0.3 - 2.0]).collect();
        let y: Vec<f64> = xs.iter().map(|x| 1.0 + 2.0 * x[0]).collect();
        let fit = fit_glm(&design(&xs), &y, Family::Gaussian, 0.0).unwrap();
        assert!((fit.intercept - 1.0).abs() < 1e-8);
        assert!((fit.coefficients[0] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn constant_response_has_zero_slopes() {
        let xs: Vec<Vec<f64>> = (0..30).map(|i| vec![(i as f64).sin(), i as f64]).collect();
        for lambda in [0.0, 1.0, 10.0] {
            let y = vec![3.5; 30];
            let fit = fit_glm(&design(&xs), &y, Family::Gaussian, lambda).unwrap();
            assert!(fit.coefficients.iter().all(|b| b.abs() < 1e-10));
            assert!((fit.intercept - 3.5).abs() < 1e-10);
        }
        let zeros = vec![0.0; 30];
        let fit = fit_glm(&design(&xs), &zeros, Family::Binomial, 1.0).unwrap();
        assert!(fit.coefficients.iter().all(|b| *b == 0.0));
        assert_eq!(fit.intercept, logit(PROB_CLIP));
    }

    #[test]
    fn all_ones_binomial_stays_finite() {
        let xs: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64 / 10.0]).collect();
        let y = vec![1.0; 30];
        let fit = fit_glm(&design(&xs), &y, Family::Binomial, 1.0).unwrap();
        assert!(fit.intercept.is_finite());
        assert!(fit.coefficients.iter().all(|b| b.is_finite()));
        for x in &xs {
            assert!(fit.predict(x) < 1.0);
        }
    }

    #[test]
    fn logistic_gradient_vanishes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<Vec<f64>> = (0..500)
            .map(|_| vec![rng.random::<f64>() * 2.0 - 1.0, rng.random::<f64>()])
            .collect();
        let y: Vec<f64> = xs
            .iter()
            .map(|x| {
                let p = expit(0.3 + 1.5 * x[0] - x[1]);
                if rng.random::<f64>() < p {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let lambda = 0.7;
        let fit = fit_glm(&design(&xs), &y, Family::Binomial, lambda).unwrap();
        assert!(fit.converged);
        let mut g = [0.0; 3];
        for (x, yi) in xs.iter().zip(&y) {
            let r = expit(fit.linear_predictor(x)) - yi;
            g[0] += r;
            g[1] += r * x[0];
            g[2] += r * x[1];
        }
        g[1] += lambda * fit.coefficients[0];
        g[2] += lambda * fit.coefficients[1];
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm / 500.0 < 1e-8, "gradient norm {norm}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = RowMatrix::zeros(0, 1);
        assert!(matches!(
            fit_glm(&x, &[], Family::Gaussian, 0.0),
            Err(Error::Empty(_))
        ));
        let x = design(&[vec![f64::NAN], vec![1.0]]);
        assert!(matches!(
            fit_glm(&x, &[0.0, 1.0], Family::Gaussian, 0.0),
            Err(Error::NonFinite(_))
        ));
        let x = design(&[vec![0.0], vec![1.0]]);
        assert!(fit_glm(&x, &[0.0, 2.0], Family::Binomial, 0.0).is_err());
        assert!(fit_glm(&x, &[0.0, 1.0], Family::Gaussian, -1.0).is_err());
    }

    #[test]
    fn multinomial_probabilities_sum_to_one() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let xs: Vec<Vec<f64>> = (0..400).map(|_| vec![rng.random::<f64>() - 0.5]).collect();
        let labels: Vec<u32> = xs
            .iter()
            .map(|x| {
                let u: f64 = rng.random();
                if u < 0.3 + 0.2 * x[0] {
                    0
                } else if u < 0.8 {
                    1
                } else {
                    2
                }
            })
            .collect();
        let m = fit_multinomial(&design(&xs), &labels, 4, 0.1).unwrap();
        assert!(m.converged);
        for x in &xs {
            let p = m.predict_proba(x);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(p[3], 0.0);
        }
    }

    #[test]
    fn multinomial_without_covariate_signal_matches_frequencies() {
        let xs: Vec<Vec<f64>> = (0..1000)
            .map(|i| vec![((i * 7919) % 1000) as f64 / 1000.0])
            .collect();
        let labels: Vec<u32> = (0..1000).map(|i| if i % 10 < 3 { 1 } else { 0 }).collect();
        let m = fit_multinomial(&design(&xs), &labels, 2, 0.0).unwrap();
        let p = m.predict_proba(&[0.5]);
        assert!((p[1] - 0.3).abs() < 0.02);
    }
}
