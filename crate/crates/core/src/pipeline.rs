//! Nuisance fitting shared by the batch runner and the simulation grid.
//!
//! Propensity fits depend only on the treatment set, so one
//! [`PropensityBundle`] serves every outcome. Cross-validation folds for the
//! CV estimators are assigned per treatment set at the dataset-row level and
//! inherited by each outcome's complete cases.

use sha2::{Digest, Sha256};

use crate::data::{Dataset, Frame, OutcomeKind};
use crate::error::{Error, Result};
use crate::estimand::{Estimand, ResolvedTerms};
use crate::learners::propensity::select_propensity;
use crate::learners::{
    cv_select, fit_outcome, fit_propensity, outcome_strata, CvSelection, Folds, LearnerKind,
    LearnerSpec, OutcomeFit, OutcomeModel, PropensityFit, PropensityMode, PropensityModel,
};
use crate::targeting::{estimate, EstimateReport, Estimator, NuisanceEval};

#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceSettings {
    /// Outcome candidates; `None` picks a default menu by outcome kind.
    pub outcome_learners: Option<Vec<LearnerSpec>>,
    pub propensity_learners: Vec<LearnerSpec>,
    pub propensity_mode: PropensityMode,
    pub folds: usize,
    pub seed: u64,
}

impl Default for NuisanceSettings {
    fn default() -> Self {
        NuisanceSettings {
            outcome_learners: None,
            propensity_learners: vec![LearnerSpec::new(LearnerKind::RidgeMultinomial, 1.0, false)],
            propensity_mode: PropensityMode::Factorized,
            folds: 3,
            seed: 0,
        }
    }
}

impl NuisanceSettings {
    pub fn outcome_menu(&self, kind: OutcomeKind) -> Vec<LearnerSpec> {
        match &self.outcome_learners {
            Some(menu) => menu.clone(),
            None => {
                let glm = match kind {
                    OutcomeKind::Continuous => LearnerKind::RidgeLinear,
                    OutcomeKind::Binary => LearnerKind::RidgeLogistic,
                };
                vec![LearnerSpec::constant(), LearnerSpec::new(glm, 1.0, true)]
            }
        }
    }
}

/// Stable 64-bit tag for seeding per-group fold assignments.
pub fn stable_tag(parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0xff]);
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

fn joint_strata(frame: &Frame) -> Vec<u64> {
    (0..frame.n())
        .map(|i| {
            frame.treatments.iter().fold(0u64, |s, t| {
                s.wrapping_mul(t.levels.len() as u64)
                    .wrapping_add(u64::from(t.codes[i]))
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct PropensityBundle {
    pub treatments: Vec<String>,
    /// Dataset rows with complete treatments and confounders.
    pub rows: Vec<usize>,
    pub spec: LearnerSpec,
    pub selection: Option<CvSelection>,
    pub canonical: PropensityFit,
    /// Fold id per dataset row (`usize::MAX` outside `rows`) and one fit per
    /// fold, present when CV estimators are requested.
    pub cv: Option<(Vec<usize>, Vec<PropensityFit>)>,
}

pub fn fit_propensity_bundle(
    ds: &Dataset,
    treatments: &[String],
    settings: &NuisanceSettings,
    with_cv: bool,
) -> Result<PropensityBundle> {
    let frame = Frame::build(ds, None, treatments)?;
    if frame.n() == 0 {
        return Err(Error::Empty(format!(
            "no complete rows for treatments {treatments:?}"
        )));
    }
    let names: Vec<&str> = treatments.iter().map(String::as_str).collect();
    let seed = settings.seed ^ stable_tag(&names);
    let needs_folds = with_cv || settings.propensity_learners.len() > 1;
    let folds = if needs_folds {
        Some(Folds::stratified(
            &joint_strata(&frame),
            settings.folds,
            seed,
        )?)
    } else {
        None
    };
    let (spec, selection) = match (&folds, settings.propensity_learners.len()) {
        (_, 0) => return Err(Error::invalid("empty propensity learner menu")),
        (Some(f), m) if m > 1 => {
            let (spec, sel) = select_propensity(
                &settings.propensity_learners,
                &frame,
                f,
                settings.propensity_mode,
            )?;
            (spec, Some(sel))
        }
        _ => (settings.propensity_learners[0].clone(), None),
    };
    let canonical = fit_propensity(&frame, None, settings.propensity_mode, &spec)?;
    let cv = match (&folds, with_cv) {
        (Some(f), true) => {
            let mut fits = Vec::with_capacity(f.k());
            for k in 0..f.k() {
                fits.push(fit_propensity(
                    &frame,
                    Some(&f.train_rows(k)),
                    settings.propensity_mode,
                    &spec,
                )?);
            }
            let mut assignment = vec![usize::MAX; ds.n_rows()];
            for (i, &r) in frame.rows.iter().enumerate() {
                assignment[r] = f.fold_of(i);
            }
            Some((assignment, fits))
        }
        _ => None,
    };
    Ok(PropensityBundle {
        treatments: treatments.to_vec(),
        rows: frame.rows,
        spec,
        selection,
        canonical,
        cv,
    })
}

#[derive(Debug, Clone)]
pub struct OutcomeBundle {
    pub frame: Frame,
    pub spec: LearnerSpec,
    pub selection: Option<CvSelection>,
    pub canonical: OutcomeFit,
    pub cv: Option<(Folds, Vec<OutcomeFit>)>,
}

pub fn fit_outcome_bundle(
    ds: &Dataset,
    outcome: &str,
    propensity: &PropensityBundle,
    settings: &NuisanceSettings,
) -> Result<OutcomeBundle> {
    let frame = Frame::build(ds, Some(outcome), &propensity.treatments)?;
    if frame.n() == 0 {
        return Err(Error::Empty(format!(
            "no complete rows for outcome `{outcome}`"
        )));
    }
    let kind = frame.outcome_kind().expect("frame built with an outcome");
    let menu = settings.outcome_menu(kind);
    let (spec, selection) = match menu.len() {
        0 => return Err(Error::invalid("empty outcome learner menu")),
        1 => (menu[0].clone(), None),
        _ => {
            let mut names: Vec<&str> = propensity.treatments.iter().map(String::as_str).collect();
            names.push(outcome);
            let folds = Folds::stratified(
                &outcome_strata(&frame),
                settings.folds,
                settings.seed ^ stable_tag(&names),
            )?;
            let (spec, sel) = cv_select(&menu, &frame, &folds)?;
            (spec, Some(sel))
        }
    };
    let canonical = fit_outcome(&spec, &frame, None)?;
    let cv = match &propensity.cv {
        Some((assignment, _)) => {
            let folds = Folds::from_assignment(
                frame.rows.iter().map(|&r| assignment[r]).collect(),
                settings.folds,
            )?;
            let mut fits = Vec::with_capacity(folds.k());
            for k in 0..folds.k() {
                fits.push(fit_outcome(&spec, &frame, Some(&folds.train_rows(k)))?);
            }
            Some((folds, fits))
        }
        None => None,
    };
    Ok(OutcomeBundle {
        frame,
        spec,
        selection,
        canonical,
        cv,
    })
}

/// Runs every requested estimator for one estimand; errors are per estimator.
pub fn estimate_estimand(
    outcome: &OutcomeBundle,
    propensity: &PropensityBundle,
    estimand: &Estimand,
    estimators: &[Estimator],
) -> Result<Vec<Result<EstimateReport>>> {
    let terms = ResolvedTerms::resolve(estimand, &outcome.frame)?;
    let canonical = if estimators.iter().any(|e| !e.is_cv()) {
        let q: [&dyn OutcomeModel; 1] = [&outcome.canonical];
        let g: [&dyn PropensityModel; 1] = [&propensity.canonical];
        Some(NuisanceEval::new(&outcome.frame, &terms, &q, &g, None))
    } else {
        None
    };
    let cross = if estimators.iter().any(|e| e.is_cv()) {
        match (&outcome.cv, &propensity.cv) {
            (Some((folds, qs)), Some((_, gs))) => {
                let q: Vec<&dyn OutcomeModel> = qs.iter().map(|f| f as &dyn OutcomeModel).collect();
                let g: Vec<&dyn PropensityModel> =
                    gs.iter().map(|f| f as &dyn PropensityModel).collect();
                Some(NuisanceEval::new(
                    &outcome.frame,
                    &terms,
                    &q,
                    &g,
                    Some(folds),
                ))
            }
            _ => Some(Err(Error::invalid(
                "cross-fitted nuisances were not prepared",
            ))),
        }
    } else {
        None
    };
    Ok(estimators
        .iter()
        .map(|&e| {
            let eval = if e.is_cv() { &cross } else { &canonical };
            match eval.as_ref().expect("prepared above") {
                Ok(ev) => estimate(e, ev),
                Err(err) => Err(clone_err(err)),
            }
        })
        .collect())
}

fn clone_err(e: &Error) -> Error {
    match e {
        Error::UnobservedLevel(s) => Error::UnobservedLevel(s.clone()),
        Error::Empty(s) => Error::Empty(s.clone()),
        Error::NonFinite(s) => Error::NonFinite(s.clone()),
        other => Error::Invalid(other.to_string()),
    }
}
