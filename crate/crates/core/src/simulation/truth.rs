use serde::Serialize;

use super::spec::Simulator;
use super::task_rng;
use crate::data::Frame;
use crate::error::{Error, Result};
use crate::estimand::{expand_estimand, Estimand, ResolvedTerms};
use crate::learners::{OutcomeModel, PropensityModel};

/// Smallest number of draws accepted by [`monte_carlo_truth`].
pub const MIN_TRUTH_DRAWS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanSe {
    pub mean: f64,
    pub std_error: f64,
}

impl MeanSe {
    fn of(values: &[f64]) -> MeanSe {
        let m = values.len() as f64;
        let mean = values.iter().sum::<f64>() / m;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)
        } else {
            0.0
        };
        MeanSe {
            mean,
            std_error: (var / m).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruthEstimate {
    pub value: f64,
    pub std_error: f64,
    pub draws: usize,
    /// Counterfactual mean of each expanded term.
    pub counterfactual_means: Vec<f64>,
}

/// Joint level index per expanded term of `estimand` in the simulator's
/// coding, plus signs.
fn term_levels(
    sim: &Simulator,
    estimand: &Estimand,
) -> Result<(Vec<usize>, Vec<f64>, Vec<Vec<u32>>)> {
    let subset: Vec<usize> = estimand
        .treatments
        .iter()
        .map(|t| sim.treatment_index(t))
        .collect::<Result<_>>()?;
    let terms = expand_estimand(estimand)?;
    let mut signs = Vec::with_capacity(terms.len());
    let mut levels = Vec::with_capacity(terms.len());
    for term in terms {
        signs.push(f64::from(term.sign));
        levels.push(
            subset
                .iter()
                .zip(&term.levels)
                .map(|(&j, l)| sim.level_index(j, l))
                .collect::<Result<Vec<u32>>>()?,
        );
    }
    Ok((subset, signs, levels))
}

/// `Ψ(P₀) ≈ (1/M) Σ_m Σ_s sign(s) Q̄₀(a(s), W_m, C_m)` over `M` covariate
/// draws, with standard error `sd/√M`.
pub fn monte_carlo_truth(
    sim: &Simulator,
    estimand: &Estimand,
    draws: usize,
    seed: u64,
) -> Result<TruthEstimate> {
    if draws < MIN_TRUTH_DRAWS {
        return Err(Error::invalid(format!(
            "Monte-Carlo truth needs at least {MIN_TRUTH_DRAWS} draws, got {draws}"
        )));
    }
    if estimand.outcome != sim.spec().outcome.name {
        return Err(Error::UnknownColumn(estimand.outcome.clone()));
    }
    let (subset, signs, levels) = term_levels(sim, estimand)?;
    let mut rng = task_rng(seed, u64::MAX, 0);
    let (mut w, mut c) = (Vec::new(), Vec::new());
    let mut contrast = Vec::with_capacity(draws);
    let mut cf = vec![0.0; signs.len()];
    for _ in 0..draws {
        sim.draw_covariates(&mut rng, &mut w, &mut c);
        let mut acc = 0.0;
        for (s, l) in levels.iter().enumerate() {
            let q = sim.mean_outcome_subset(&w, &c, &subset, l);
            cf[s] += q;
            acc += signs[s] * q;
        }
        contrast.push(acc);
    }
    let summary = MeanSe::of(&contrast);
    Ok(TruthEstimate {
        value: summary.mean,
        std_error: summary.std_error,
        draws,
        counterfactual_means: cf.iter().map(|v| v / draws as f64).collect(),
    })
}

/// Monte-Carlo terms of `Ψ(P) − Ψ(P₀) = (P − P₀)D*(P) + R(P, P₀)`, where `P`
/// carries the fitted `(Q̄, g)` and the true covariate law.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VonMises {
    pub psi: MeanSe,
    pub psi0: MeanSe,
    pub lhs: MeanSe,
    /// `(P − P₀)D*(P) = −P₀D*(P)`.
    pub linear: MeanSe,
    pub remainder: MeanSe,
    /// `lhs − linear − remainder`, zero in expectation.
    pub residual: MeanSe,
    pub draws: usize,
}

pub fn von_mises_check(
    sim: &Simulator,
    q: &dyn OutcomeModel,
    g: &dyn PropensityModel,
    estimand: &Estimand,
    draws: usize,
    seed: u64,
) -> Result<VonMises> {
    if draws < 2 {
        return Err(Error::invalid("Von Mises check needs at least two draws"));
    }
    let ds = sim.sample(draws, &mut task_rng(seed, u64::MAX - 1, 0))?;
    let frame = Frame::build(&ds, Some(&estimand.outcome), &estimand.treatments)?;
    let terms = ResolvedTerms::resolve(estimand, &frame)?;
    let q0 = sim.outcome_model(&estimand.treatments)?;
    let g0 = sim.propensity_model(&estimand.treatments)?;
    let n = frame.n();
    let mut cols: [Vec<f64>; 6] = Default::default();
    let mut observed = vec![0u32; frame.treatments.len()];
    for i in 0..n {
        let (w, c) = (frame.w.row(i), frame.c.row(i));
        let (mut psi, mut psi0, mut rem) = (0.0, 0.0, 0.0);
        for (s, l) in terms.levels.iter().enumerate() {
            let sign = terms.signs[s];
            let (qs, q0s) = (q.predict(w, c, l), q0.predict(w, c, l));
            let (gs, g0s) = (g.prob(w, l)?, g0.prob(w, l)?);
            psi += sign * qs;
            psi0 += sign * q0s;
            rem += sign * (qs - q0s) * (gs - g0s) / gs;
        }
        for (j, t) in frame.treatments.iter().enumerate() {
            observed[j] = t.codes[i];
        }
        let linear = match terms.matching(&observed) {
            Some(s) => {
                let h = terms.signs[s] / g.prob(w, &observed)?;
                -h * (frame.y[i] - q.predict(w, c, &observed))
            }
            None => 0.0,
        };
        let lhs = psi - psi0;
        for (col, v) in cols
            .iter_mut()
            .zip([psi, psi0, lhs, linear, rem, lhs - linear - rem])
        {
            col.push(v);
        }
    }
    Ok(VonMises {
        psi: MeanSe::of(&cols[0]),
        psi0: MeanSe::of(&cols[1]),
        lhs: MeanSe::of(&cols[2]),
        linear: MeanSe::of(&cols[3]),
        remainder: MeanSe::of(&cols[4]),
        residual: MeanSe::of(&cols[5]),
        draws: n,
    })
}
