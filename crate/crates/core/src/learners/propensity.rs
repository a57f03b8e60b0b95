//! Propensity models for joint treatment levels given confounders `W`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::cv::{cv_select_by, CvSelection, Folds};
use super::glm::{fit_multinomial, Multinomial};
use super::{LearnerKind, LearnerSpec, PropensityModel};
use crate::data::Frame;
use crate::error::{Error, Result};

pub const PROPENSITY_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropensityMode {
    /// Product of independent per-treatment models.
    #[default]
    Factorized,
    /// One model over the observed joint levels.
    Joint,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClassModel {
    Frequencies(Vec<f64>),
    Multinomial(Multinomial),
    /// Class frequencies within each distinct `W` row; unseen rows fall back
    /// to the marginal frequencies.
    Cells {
        cells: HashMap<Vec<u64>, Vec<f64>>,
        fallback: Vec<f64>,
    },
}

fn frequencies(labels: impl Iterator<Item = u32>, n: usize) -> Vec<f64> {
    let mut f = vec![0.0; n];
    let mut total = 0.0;
    for l in labels {
        f[l as usize] += 1.0;
        total += 1.0;
    }
    f.iter_mut().for_each(|v| *v /= total);
    f
}

fn key(w: &[f64]) -> Vec<u64> {
    w.iter().map(|v| v.to_bits()).collect()
}

impl ClassModel {
    fn fit(
        spec: &LearnerSpec,
        frame: &Frame,
        rows: &[usize],
        labels: &[u32],
        n: usize,
    ) -> Result<Self> {
        match spec.kind {
            LearnerKind::Constant => Ok(ClassModel::Frequencies(frequencies(
                labels.iter().copied(),
                n,
            ))),
            LearnerKind::Saturated => {
                let mut groups: HashMap<Vec<u64>, Vec<u32>> = HashMap::new();
                for (&i, &l) in rows.iter().zip(labels) {
                    groups.entry(key(frame.w.row(i))).or_default().push(l);
                }
                Ok(ClassModel::Cells {
                    cells: groups
                        .into_iter()
                        .map(|(k, ls)| (k, frequencies(ls.into_iter(), n)))
                        .collect(),
                    fallback: frequencies(labels.iter().copied(), n),
                })
            }
            LearnerKind::RidgeMultinomial => {
                let x = frame.w.select_rows(rows);
                Ok(ClassModel::Multinomial(fit_multinomial(
                    &x,
                    labels,
                    n,
                    spec.lambda,
                )?))
            }
            other => Err(Error::invalid(format!(
                "{other:?} cannot model a propensity; use constant, ridge_multinomial or saturated"
            ))),
        }
    }

    fn proba(&self, w: &[f64], class: usize) -> f64 {
        match self {
            ClassModel::Frequencies(f) => f[class],
            ClassModel::Multinomial(m) => m.predict_proba(w)[class],
            ClassModel::Cells { cells, fallback } => cells.get(&key(w)).unwrap_or(fallback)[class],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropensityFit {
    pub mode: PropensityMode,
    pub spec: LearnerSpec,
    pub treatments: Vec<String>,
    pub n_levels: Vec<usize>,
    factors: Vec<ClassModel>,
    /// Observed joint levels (joint mode), indexed by the class id.
    joint_levels: Vec<Vec<u32>>,
}

impl PropensityFit {
    /// Model probability before flooring.
    pub fn raw_prob(&self, w: &[f64], levels: &[u32]) -> Result<f64> {
        if levels.len() != self.n_levels.len() {
            return Err(Error::LengthMismatch {
                what: "joint level vs modelled treatments".into(),
                left: levels.len(),
                right: self.n_levels.len(),
            });
        }
        for (j, (&l, &n)) in levels.iter().zip(&self.n_levels).enumerate() {
            if l as usize >= n {
                return Err(Error::UnknownLevel {
                    treatment: self.treatments[j].clone(),
                    level: l.to_string(),
                });
            }
        }
        match self.mode {
            PropensityMode::Factorized => Ok(self
                .factors
                .iter()
                .zip(levels)
                .map(|(m, &l)| m.proba(w, l as usize))
                .product()),
            PropensityMode::Joint => {
                let class = self
                    .joint_levels
                    .iter()
                    .position(|l| l.as_slice() == levels)
                    .ok_or_else(|| Error::UnobservedLevel(format!("{levels:?}")))?;
                Ok(self.factors[0].proba(w, class))
            }
        }
    }
}

impl PropensityModel for PropensityFit {
    fn prob(&self, w: &[f64], levels: &[u32]) -> Result<f64> {
        Ok(self.raw_prob(w, levels)?.max(PROPENSITY_FLOOR))
    }
}

/// Fits `P(A = a | W)` for the frame's treatments on the given rows (all rows
/// if `None`). A treatment with a single observed level gets probability one
/// for that level.
pub fn fit_propensity(
    frame: &Frame,
    rows: Option<&[usize]>,
    mode: PropensityMode,
    spec: &LearnerSpec,
) -> Result<PropensityFit> {
    spec.validate()?;
    let all: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all = (0..frame.n()).collect();
            &all
        }
    };
    if rows.is_empty() {
        return Err(Error::Empty("propensity training rows".into()));
    }
    if frame.treatments.is_empty() {
        return Err(Error::invalid(
            "propensity model needs at least one treatment",
        ));
    }
    let n_levels: Vec<usize> = frame.treatments.iter().map(|t| t.levels.len()).collect();
    let (factors, joint_levels) = match mode {
        PropensityMode::Factorized => {
            let mut factors = Vec::with_capacity(frame.treatments.len());
            for t in &frame.treatments {
                let labels: Vec<u32> = rows.iter().map(|&i| t.codes[i]).collect();
                factors.push(ClassModel::fit(spec, frame, rows, &labels, t.levels.len())?);
            }
            (factors, Vec::new())
        }
        PropensityMode::Joint => {
            let mut observed: Vec<Vec<u32>> = rows.iter().map(|&i| frame.joint_level(i)).collect();
            observed.sort();
            observed.dedup();
            let labels: Vec<u32> = rows
                .iter()
                .map(|&i| {
                    let l = frame.joint_level(i);
                    observed.binary_search(&l).unwrap() as u32
                })
                .collect();
            let model = ClassModel::fit(spec, frame, rows, &labels, observed.len())?;
            (vec![model], observed)
        }
    };
    Ok(PropensityFit {
        mode,
        spec: spec.clone(),
        treatments: frame.treatment_names(),
        n_levels,
        factors,
        joint_levels,
    })
}

/// Summed held-out negative log-probability of the observed joint levels.
pub fn propensity_loss(fit: &PropensityFit, frame: &Frame, rows: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for &i in rows {
        let p = match fit.raw_prob(frame.w.row(i), &frame.joint_level(i)) {
            Ok(p) => p,
            Err(Error::UnobservedLevel(_)) => 0.0,
            Err(e) => return Err(e),
        };
        total -= p.max(PROPENSITY_FLOOR).ln();
    }
    Ok(total)
}

/// Discrete CV selection among propensity learners.
pub fn select_propensity(
    candidates: &[LearnerSpec],
    frame: &Frame,
    folds: &Folds,
    mode: PropensityMode,
) -> Result<(LearnerSpec, CvSelection)> {
    let sel = cv_select_by(candidates.len(), folds, |c, train, test| {
        let fit = fit_propensity(frame, Some(train), mode, &candidates[c])?;
        propensity_loss(&fit, frame, test)
    })?;
    Ok((candidates[sel.index].clone(), sel))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, NumericColumn, TreatmentColumn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frame(n: usize, seed: u64) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        let a: Vec<Option<u32>> = (0..n)
            .map(|_| Some(if rng.random::<f64>() < 0.3 { 1 } else { 0 }))
            .collect();
        let b: Vec<Option<u32>> = (0..n)
            .map(|i| {
                let u: f64 = rng.random();
                let p0 = 0.5 + 0.4 * w[i];
                Some(if u < p0 {
                    0
                } else if u < 0.9 {
                    1
                } else {
                    2
                })
            })
            .collect();
        let ds = Dataset::new(
            vec![],
            vec![
                TreatmentColumn {
                    name: "A".into(),
                    levels: vec!["0".into(), "1".into()],
                    codes: a,
                },
                TreatmentColumn {
                    name: "B".into(),
                    levels: vec!["x".into(), "y".into(), "z".into()],
                    codes: b,
                },
            ],
            vec![NumericColumn {
                name: "w".into(),
                values: w,
            }],
            vec![],
        )
        .unwrap();
        Frame::build(&ds, None, &["A".to_string(), "B".to_string()]).unwrap()
    }

    fn ridge(lambda: f64) -> LearnerSpec {
        LearnerSpec::new(LearnerKind::RidgeMultinomial, lambda, false)
    }

    #[test]
    fn independent_treatment_recovers_marginal() {
        let f = frame(10_000, 1);
        let fit = fit_propensity(&f, None, PropensityMode::Factorized, &ridge(1.0)).unwrap();
        for i in 0..f.n() {
            let p = fit.factors[0].proba(f.w.row(i), 1);
            assert!((p - 0.3).abs() < 0.02, "row {i}: {p}");
        }
    }

    #[test]
    fn factorized_joint_is_product_and_sums_to_one() {
        let f = frame(2000, 2);
        let fit = fit_propensity(&f, None, PropensityMode::Factorized, &ridge(0.5)).unwrap();
        for i in (0..f.n()).step_by(97) {
            let w = f.w.row(i);
            let mut total = 0.0;
            for a in 0..2 {
                for b in 0..3 {
                    let p = fit.raw_prob(w, &[a, b]).unwrap();
                    let prod =
                        fit.factors[0].proba(w, a as usize) * fit.factors[1].proba(w, b as usize);
                    assert_eq!(p, prod);
                    total += p;
                }
            }
            assert!((total - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn undeclared_and_unobserved_levels_error() {
        let f = frame(500, 3);
        let fit = fit_propensity(&f, None, PropensityMode::Factorized, &ridge(1.0)).unwrap();
        assert!(fit.prob(f.w.row(0), &[0, 3]).is_err());
        // Restrict training to rows without level B = z so joint mode never sees it.
        let rows: Vec<usize> = (0..f.n())
            .filter(|&i| f.treatments[1].codes[i] != 2)
            .collect();
        let joint = fit_propensity(&f, Some(&rows), PropensityMode::Joint, &ridge(1.0)).unwrap();
        assert!(matches!(
            joint.prob(f.w.row(0), &[0, 2]),
            Err(Error::UnobservedLevel(_))
        ));
        assert!(joint.prob(f.w.row(0), &[1, 1]).unwrap() > 0.0);
    }

    #[test]
    fn selection_prefers_informative_model() {
        let f = frame(3000, 4);
        let strata: Vec<u64> = (0..f.n())
            .map(|i| u64::from(f.treatments[1].codes[i]))
            .collect();
        let folds = Folds::stratified(&strata, 3, 0).unwrap();
        let (spec, _) = select_propensity(
            &[LearnerSpec::constant(), ridge(0.1)],
            &f,
            &folds,
            PropensityMode::Factorized,
        )
        .unwrap();
        assert_eq!(spec.kind, LearnerKind::RidgeMultinomial);
    }
}
