use rand::Rng;

use super::spec::{GenerativeSpec, Simulator};
use super::task_rng;
use crate::data::{Dataset, ExtraColumn, NumericColumn, OutcomeColumn, TreatmentColumn};
use crate::error::{Error, Result};

/// Resamples each outcome and each treatment independently from its own
/// marginal, and `(W, C)` jointly as rows, so every estimand has truth 0.
pub fn null_sample(source: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    null_sample_with(source, n, &mut task_rng(seed, 0, 0))
}

pub fn null_sample_with<R: Rng + ?Sized>(
    source: &Dataset,
    n: usize,
    rng: &mut R,
) -> Result<Dataset> {
    let m = source.n_rows();
    if m == 0 {
        return Err(Error::Empty("null-sampler source".into()));
    }
    let draw = |rng: &mut R| -> Vec<usize> { (0..n).map(|_| rng.random_range(0..m)).collect() };
    let outcomes = source
        .outcomes()
        .iter()
        .map(|o| {
            let idx = draw(rng);
            OutcomeColumn {
                name: o.name.clone(),
                kind: o.kind,
                values: idx.iter().map(|&i| o.values[i]).collect(),
            }
        })
        .collect();
    let treatments = source
        .treatments()
        .iter()
        .map(|t| {
            let idx = draw(rng);
            TreatmentColumn {
                name: t.name.clone(),
                levels: t.levels.clone(),
                codes: idx.iter().map(|&i| t.codes[i]).collect(),
            }
        })
        .collect();
    let rows = draw(rng);
    let covariates = source
        .covariates()
        .iter()
        .map(|c| NumericColumn {
            name: c.name.clone(),
            values: rows.iter().map(|&i| c.values[i]).collect(),
        })
        .collect();
    let extra = source
        .extra_covariates()
        .iter()
        .map(|e| match e {
            ExtraColumn::Numeric(c) => ExtraColumn::Numeric(NumericColumn {
                name: c.name.clone(),
                values: rows.iter().map(|&i| c.values[i]).collect(),
            }),
            ExtraColumn::Categorical {
                name,
                levels,
                codes,
            } => ExtraColumn::Categorical {
                name: name.clone(),
                levels: levels.clone(),
                codes: rows.iter().map(|&i| codes[i]).collect(),
            },
        })
        .collect();
    Dataset::new(outcomes, treatments, covariates, extra)
}

/// `n` rows drawn by ancestral sampling from `spec`.
pub fn ancestral_sample(spec: &GenerativeSpec, n: usize, seed: u64) -> Result<Dataset> {
    Simulator::new(spec.clone())?.sample(n, &mut task_rng(seed, 0, 0))
}
