//! Nuisance predictions evaluated once per (frame, estimand) and shared by all
//! estimators.

use crate::data::{Frame, OutcomeKind};
use crate::error::{Error, Result};
use crate::estimand::ResolvedTerms;
use crate::learners::cv::Folds;
use crate::learners::{OutcomeModel, PropensityModel};

/// Outcome and propensity predictions for every frame row at the observed
/// joint level and at every term level of the expanded estimand.
///
/// When `folds` is set, row `i` was evaluated with the fits trained without
/// fold `folds.fold_of(i)`.
#[derive(Debug, Clone)]
pub struct NuisanceEval {
    pub kind: OutcomeKind,
    pub signs: Vec<f64>,
    pub y: Vec<f64>,
    /// Dataset row index of each frame row.
    pub rows: Vec<usize>,
    pub q_obs: Vec<f64>,
    /// `q_cf[s][i]`: outcome prediction at term `s` for row `i`.
    pub q_cf: Vec<Vec<f64>>,
    /// `g_cf[s][i]`: floored propensity of term `s` for row `i`.
    pub g_cf: Vec<Vec<f64>>,
    /// Term matched by the observed joint level of each row.
    pub matched: Vec<Option<usize>>,
    /// Rows observed at each term level.
    pub term_counts: Vec<usize>,
    pub folds: Option<Folds>,
}

impl NuisanceEval {
    /// Evaluates canonical fits (one outcome and one propensity model) or
    /// cross-fitted ones (one per fold, with `folds` over the frame rows).
    pub fn new(
        frame: &Frame,
        terms: &ResolvedTerms,
        outcome: &[&dyn OutcomeModel],
        propensity: &[&dyn PropensityModel],
        folds: Option<&Folds>,
    ) -> Result<NuisanceEval> {
        let kind = frame
            .outcome_kind()
            .ok_or_else(|| Error::invalid("frame has no outcome"))?;
        let n_fits = folds.map_or(1, Folds::k);
        if outcome.len() != n_fits || propensity.len() != n_fits {
            return Err(Error::LengthMismatch {
                what: "nuisance fits vs folds".into(),
                left: outcome.len().min(propensity.len()),
                right: n_fits,
            });
        }
        if let Some(f) = folds {
            if f.len() != frame.n() {
                return Err(Error::LengthMismatch {
                    what: "folds vs frame rows".into(),
                    left: f.len(),
                    right: frame.n(),
                });
            }
        }
        if frame.n() == 0 {
            return Err(Error::Empty("no complete rows for this estimand".into()));
        }
        let n = frame.n();
        let n_terms = terms.len();
        let mut q_obs = Vec::with_capacity(n);
        let mut q_cf = vec![Vec::with_capacity(n); n_terms];
        let mut g_cf = vec![Vec::with_capacity(n); n_terms];
        let mut matched = Vec::with_capacity(n);
        let mut term_counts = vec![0usize; n_terms];
        for i in 0..n {
            let fit = folds.map_or(0, |f| f.fold_of(i));
            let (q, g) = (outcome[fit], propensity[fit]);
            let w = frame.w.row(i);
            let c = frame.c.row(i);
            let observed = frame.joint_level(i);
            q_obs.push(q.predict(w, c, &observed));
            let m = terms.matching(&observed);
            if let Some(s) = m {
                term_counts[s] += 1;
            }
            matched.push(m);
            for s in 0..n_terms {
                q_cf[s].push(q.predict(w, c, &terms.levels[s]));
                g_cf[s].push(g.prob(w, &terms.levels[s])?);
            }
        }
        for v in q_obs
            .iter()
            .chain(q_cf.iter().flatten())
            .chain(g_cf.iter().flatten())
        {
            if !v.is_finite() {
                return Err(Error::NonFinite("nuisance predictions".into()));
            }
        }
        Ok(NuisanceEval {
            kind,
            signs: terms.signs.clone(),
            y: frame.y.clone(),
            rows: frame.rows.clone(),
            q_obs,
            q_cf,
            g_cf,
            matched,
            term_counts,
            folds: folds.cloned(),
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Clever covariate `H(g)` at each row's observed level.
    pub fn clever(&self) -> Vec<f64> {
        (0..self.n())
            .map(|i| match self.matched[i] {
                Some(s) => self.signs[s] / self.g_cf[s][i],
                None => 0.0,
            })
            .collect()
    }

    /// Terms without any observed row; estimation past the plug-in refuses these.
    pub fn unobserved_terms(&self) -> Vec<usize> {
        (0..self.term_counts.len())
            .filter(|&s| self.term_counts[s] == 0)
            .collect()
    }

    pub(crate) fn require_observed(&self) -> Result<()> {
        let missing = self.unobserved_terms();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::UnobservedLevel(format!(
                "estimand terms {missing:?} have no observed rows"
            )))
        }
    }
}
