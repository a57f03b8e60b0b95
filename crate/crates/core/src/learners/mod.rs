//! Nuisance learners: outcome regressions and propensity models.

pub mod cv;
pub mod features;
pub mod glm;
pub mod propensity;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{Frame, OutcomeKind};
use crate::error::{Error, Result};

pub use cv::{cv_select_by, CvSelection, Folds};
pub use features::OutcomeFeatures;
pub use glm::{fit_glm, fit_multinomial, Family, Glm, Multinomial, PROB_CLIP};
pub use propensity::{fit_propensity, PropensityFit, PropensityMode};

/// Conditional outcome mean `E[Y | A = levels, W = w, C = c]`.
pub trait OutcomeModel: Send + Sync {
    fn predict(&self, w: &[f64], c: &[f64], levels: &[u32]) -> f64;
}

/// Probability of a joint treatment level given confounders.
pub trait PropensityModel: Send + Sync {
    fn prob(&self, w: &[f64], levels: &[u32]) -> Result<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    Constant,
    RidgeLinear,
    RidgeLogistic,
    RidgeMultinomial,
    /// Cell means over distinct feature rows; for discrete data only.
    Saturated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerSpec {
    pub kind: LearnerKind,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub interactions: bool,
}

impl LearnerSpec {
    pub fn new(kind: LearnerKind, lambda: f64, interactions: bool) -> Self {
        LearnerSpec {
            kind,
            lambda,
            interactions,
        }
    }

    pub fn constant() -> Self {
        LearnerSpec::new(LearnerKind::Constant, 0.0, false)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::invalid(format!(
                "learner λ must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        let kind = match self.kind {
            LearnerKind::Constant => return "constant".into(),
            LearnerKind::Saturated => return "saturated".into(),
            LearnerKind::RidgeLinear => "ridge_linear",
            LearnerKind::RidgeLogistic => "ridge_logistic",
            LearnerKind::RidgeMultinomial => "ridge_multinomial",
        };
        let inter = if self.interactions {
            ",interactions"
        } else {
            ""
        };
        format!("{kind}(λ={}{inter})", self.lambda)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Regressor {
    Constant(f64),
    Glm(Glm),
    Saturated {
        cells: HashMap<Vec<u64>, f64>,
        fallback: f64,
    },
}

impl Regressor {
    /// Fits a regressor for `y`. Predictions of a binary outcome are clipped to
    /// `[1e-8, 1 - 1e-8]` by [`Regressor::predict`].
    pub fn fit(
        spec: &LearnerSpec,
        x: &crate::linalg::RowMatrix,
        y: &[f64],
        kind: OutcomeKind,
    ) -> Result<Regressor> {
        spec.validate()?;
        if y.is_empty() {
            return Err(Error::Empty("training rows".into()));
        }
        let mean = crate::linalg::mean(y);
        Ok(match spec.kind {
            LearnerKind::Constant => Regressor::Constant(mean),
            LearnerKind::RidgeLinear => {
                Regressor::Glm(fit_glm(x, y, Family::Gaussian, spec.lambda)?)
            }
            LearnerKind::RidgeLogistic => {
                if kind != OutcomeKind::Binary {
                    return Err(Error::invalid("ridge_logistic requires a binary outcome"));
                }
                Regressor::Glm(fit_glm(x, y, Family::Binomial, spec.lambda)?)
            }
            LearnerKind::RidgeMultinomial => {
                return Err(Error::invalid(
                    "ridge_multinomial is a propensity learner, not an outcome regression",
                ))
            }
            LearnerKind::Saturated => {
                let mut sums: HashMap<Vec<u64>, (f64, usize)> = HashMap::new();
                for (i, &yi) in y.iter().enumerate() {
                    let e = sums.entry(key(x.row(i))).or_insert((0.0, 0));
                    e.0 += yi;
                    e.1 += 1;
                }
                Regressor::Saturated {
                    cells: sums
                        .into_iter()
                        .map(|(k, (s, c))| (k, s / c as f64))
                        .collect(),
                    fallback: mean,
                }
            }
        })
    }

    pub fn predict_raw(&self, x: &[f64]) -> f64 {
        match self {
            Regressor::Constant(m) => *m,
            Regressor::Glm(g) => g.predict(x),
            Regressor::Saturated { cells, fallback } => {
                cells.get(&key(x)).copied().unwrap_or(*fallback)
            }
        }
    }

    /// Whether `x` falls in a cell seen during fitting (always true for
    /// parametric fits).
    pub fn covers(&self, x: &[f64]) -> bool {
        match self {
            Regressor::Saturated { cells, .. } => cells.contains_key(&key(x)),
            _ => true,
        }
    }
}

fn key(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| v.to_bits()).collect()
}

/// Fitted outcome regression over a frame's feature layout.
#[derive(Debug, Clone)]
pub struct OutcomeFit {
    pub spec: LearnerSpec,
    pub features: OutcomeFeatures,
    pub regressor: Regressor,
    pub kind: OutcomeKind,
}

impl OutcomeFit {
    pub fn covers(&self, w: &[f64], c: &[f64], levels: &[u32]) -> bool {
        let mut buf = Vec::with_capacity(self.features.width());
        self.features.encode(w, c, levels, &mut buf);
        self.regressor.covers(&buf)
    }
}

impl OutcomeModel for OutcomeFit {
    fn predict(&self, w: &[f64], c: &[f64], levels: &[u32]) -> f64 {
        let mut buf = Vec::with_capacity(self.features.width());
        self.features.encode(w, c, levels, &mut buf);
        let p = self.regressor.predict_raw(&buf);
        match self.kind {
            OutcomeKind::Binary => p.clamp(PROB_CLIP, 1.0 - PROB_CLIP),
            OutcomeKind::Continuous => p,
        }
    }
}

/// Fits the outcome regression on the given frame rows (all rows if `None`).
pub fn fit_outcome(
    spec: &LearnerSpec,
    frame: &Frame,
    rows: Option<&[usize]>,
) -> Result<OutcomeFit> {
    let kind = frame
        .outcome_kind()
        .ok_or_else(|| Error::invalid("frame has no outcome"))?;
    let all: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all = (0..frame.n()).collect();
            &all
        }
    };
    let features = OutcomeFeatures::for_frame(frame, spec.interactions);
    let x = features.design(frame, rows);
    let y: Vec<f64> = rows.iter().map(|&i| frame.y[i]).collect();
    let regressor = Regressor::fit(spec, &x, &y, kind)?;
    Ok(OutcomeFit {
        spec: spec.clone(),
        features,
        regressor,
        kind,
    })
}

/// Summed held-out loss: squared error, or log-loss for binary outcomes.
pub fn outcome_loss(fit: &OutcomeFit, frame: &Frame, rows: &[usize]) -> f64 {
    rows.iter()
        .map(|&i| {
            let p = fit.predict(frame.w.row(i), frame.c.row(i), &frame.joint_level(i));
            let y = frame.y[i];
            match fit.kind {
                OutcomeKind::Continuous => (y - p).powi(2),
                OutcomeKind::Binary => -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()),
            }
        })
        .sum()
}

/// Stratum per frame row for learner-selection folds: joint treatment level,
/// crossed with the outcome class for binary outcomes.
pub fn outcome_strata(frame: &Frame) -> Vec<u64> {
    let binary = frame.outcome_kind() == Some(OutcomeKind::Binary);
    (0..frame.n())
        .map(|i| {
            let mut s = 0u64;
            for t in &frame.treatments {
                s = s
                    .wrapping_mul(t.levels.len() as u64)
                    .wrapping_add(u64::from(t.codes[i]));
            }
            if binary {
                s = s.wrapping_mul(2).wrapping_add(frame.y[i] as u64);
            }
            s
        })
        .collect()
}

/// Picks the outcome learner with the lowest cross-validated loss.
pub fn cv_select(
    candidates: &[LearnerSpec],
    frame: &Frame,
    folds: &Folds,
) -> Result<(LearnerSpec, CvSelection)> {
    if folds.len() != frame.n() {
        return Err(Error::LengthMismatch {
            what: "folds vs frame rows".into(),
            left: folds.len(),
            right: frame.n(),
        });
    }
    let sel = cv_select_by(candidates.len(), folds, |c, train, test| {
        let fit = fit_outcome(&candidates[c], frame, Some(train))?;
        Ok(outcome_loss(&fit, frame, test))
    })?;
    Ok((candidates[sel.index].clone(), sel))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, NumericColumn, OutcomeColumn, TreatmentColumn};
    use crate::linalg::RowMatrix;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linear_frame(n: usize, seed: u64) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let a: Vec<Option<u32>> = (0..n).map(|_| Some(rng.random_range(0..2))).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| 1.0 + 2.0 * w[i] + f64::from(a[i].unwrap()) + rng.random::<f64>() - 0.5)
            .collect();
        let ds = Dataset::new(
            vec![OutcomeColumn {
                name: "y".into(),
                kind: OutcomeKind::Continuous,
                values: y,
            }],
            vec![TreatmentColumn {
                name: "A".into(),
                levels: vec!["0".into(), "1".into()],
                codes: a,
            }],
            vec![NumericColumn {
                name: "w".into(),
                values: w,
            }],
            vec![],
        )
        .unwrap();
        Frame::build(&ds, Some("y"), &["A".to_string()]).unwrap()
    }

    #[test]
    fn selects_linear_over_constant() {
        let frame = linear_frame(5000, 1);
        let folds = Folds::stratified(&outcome_strata(&frame), 3, 0).unwrap();
        let cands = [
            LearnerSpec::constant(),
            LearnerSpec::new(LearnerKind::RidgeLinear, 1.0, false),
        ];
        let (spec, sel) = cv_select(&cands, &frame, &folds).unwrap();
        assert_eq!(spec.kind, LearnerKind::RidgeLinear);
        assert_eq!(sel.losses.len(), 2);
        assert_eq!(sel.losses[0].len(), 3);
    }

    #[test]
    fn single_and_duplicate_candidates() {
        let frame = linear_frame(300, 2);
        let folds = Folds::stratified(&outcome_strata(&frame), 3, 0).unwrap();
        let one = [LearnerSpec::constant()];
        let (_, sel) = cv_select(&one, &frame, &folds).unwrap();
        assert_eq!(sel.index, 0);
        assert!(sel.mean_losses[0] > 0.0);
        let r = LearnerSpec::new(LearnerKind::RidgeLinear, 1.0, false);
        let (_, sel) = cv_select(&[r.clone(), r], &frame, &folds).unwrap();
        assert_eq!(sel.index, 0);
        assert!(cv_select(&[], &frame, &folds).is_err());
    }

    #[test]
    fn unpenalised_ridge_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 200;
        let p = 4;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..p).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect())
            .collect();
        let y: Vec<f64> = rows
            .iter()
            .map(|r| {
                0.5 + r
                    .iter()
                    .enumerate()
                    .map(|(j, v)| (j as f64 - 1.5) * v)
                    .sum::<f64>()
                    + rng.random::<f64>()
            })
            .collect();
        let x = RowMatrix::from_rows(&rows).unwrap();
        let fit = fit_glm(&x, &y, Family::Gaussian, 0.0).unwrap();
        // Oracle: uncentred normal equations with an explicit intercept column.
        let mut z = DMatrix::<f64>::zeros(n, p + 1);
        for i in 0..n {
            z[(i, 0)] = 1.0;
            for j in 0..p {
                z[(i, j + 1)] = rows[i][j];
            }
        }
        let zy = z.transpose() * DVector::from_vec(y.clone());
        let beta = (z.transpose() * &z).lu().solve(&zy).unwrap();
        assert!((fit.intercept - beta[0]).abs() < 1e-8);
        for j in 0..p {
            assert!((fit.coefficients[j] - beta[j + 1]).abs() < 1e-8);
        }
    }

    #[test]
    fn shrinkage_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let rows: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..3).map(|_| rng.random::<f64>()).collect())
            .collect();
        let x = RowMatrix::from_rows(&rows).unwrap();
        let y: Vec<f64> = rows
            .iter()
            .map(|r| 3.0 * r[0] - r[1] + rng.random::<f64>())
            .collect();
        let yb: Vec<f64> = y.iter().map(|v| if *v > 0.8 { 1.0 } else { 0.0 }).collect();
        for (family, resp) in [(Family::Gaussian, &y), (Family::Binomial, &yb)] {
            let mut last = f64::INFINITY;
            for lambda in [0.0, 0.1, 1.0, 3.0, 10.0, 100.0, 1000.0] {
                let norm = fit_glm(&x, resp, family, lambda).unwrap().slope_norm();
                assert!(
                    norm <= last + 1e-10,
                    "{family:?} λ={lambda}: {norm} > {last}"
                );
                last = norm;
            }
        }
    }

    #[test]
    fn logistic_learner_rejects_continuous_outcome() {
        let frame = linear_frame(50, 3);
        let spec = LearnerSpec::new(LearnerKind::RidgeLogistic, 1.0, false);
        assert!(fit_outcome(&spec, &frame, None).is_err());
    }
}
