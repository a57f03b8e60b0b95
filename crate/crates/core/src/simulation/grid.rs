use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::metrics::{bootstrap_metrics, wilson_interval};
use super::samplers::null_sample_with;
use super::spec::Simulator;
use super::task_rng;
use super::truth::{monte_carlo_truth, TruthEstimate};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimand::{frequency_filter_frame, Estimand, ResolvedTerms};
use crate::inference::{dist::norm_quantile, wald_ci};
use crate::pipeline::{
    estimate_estimand, fit_outcome_bundle, fit_propensity_bundle, NuisanceSettings,
};
use crate::targeting::Estimator;

#[derive(Debug, Clone)]
pub struct ReplicateGrid {
    pub sizes: Vec<usize>,
    pub estimators: Vec<Estimator>,
    pub estimands: Vec<Estimand>,
    pub replicates: usize,
    /// Positivity thresholds; each replicate's estimands are kept at `t` when
    /// every term's observed frequency is at least `t`.
    pub thresholds: Vec<f64>,
    pub alpha: f64,
    pub seed: u64,
    pub nuisance: NuisanceSettings,
    /// Monte-Carlo draws per estimand truth under a generative spec.
    pub truth_draws: usize,
}

impl ReplicateGrid {
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if self.sizes.is_empty() || self.sizes.contains(&0) {
            errors.push("sizes: need at least one positive sample size".to_string());
        }
        if self.estimators.is_empty() {
            errors.push("estimators: empty".into());
        }
        if self.estimands.is_empty() {
            errors.push("estimands: empty".into());
        }
        for (i, e) in self.estimands.iter().enumerate() {
            if let Err(err) = e.validate() {
                errors.push(format!("estimands[{i}]: {err}"));
            }
        }
        if self.replicates == 0 {
            errors.push("replicates: must be positive".into());
        }
        if self.thresholds.iter().any(|t| !(0.0..1.0).contains(t)) {
            errors.push("thresholds: values must lie in [0, 1)".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            errors.push("alpha: must lie in (0, 1)".into());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }
}

#[derive(Clone, Copy)]
pub enum GridSource<'a> {
    /// Null sampler over an observed table; every truth is 0.
    Null(&'a Dataset),
    Spec(&'a Simulator),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "reason")]
pub enum RecordStatus {
    Ok,
    /// Some term's joint level never occurs in the replicate.
    Unobserved,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateRecord {
    pub n: usize,
    pub replicate: usize,
    pub estimand: usize,
    pub estimator: Estimator,
    /// Smallest observed term frequency in the replicate.
    pub min_frequency: f64,
    #[serde(flatten)]
    pub status: RecordStatus,
    pub estimate: f64,
    pub std_error: f64,
    pub covered: bool,
    pub rejected: bool,
}

impl ReplicateRecord {
    fn passes(&self, threshold: f64) -> bool {
        self.status != RecordStatus::Unobserved && self.min_frequency >= threshold
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRow {
    pub estimator: String,
    /// Estimand description, or `ALL` (pooled over components) or
    /// `ALL_GROUPS` (averaged over estimand groups).
    pub estimand: String,
    pub n: usize,
    pub threshold: f64,
    pub coverage: f64,
    pub coverage_interval: (f64, f64),
    pub power: f64,
    pub bias2: f64,
    pub variance: f64,
    pub mse: f64,
    pub bias2_centered: f64,
    /// Mean influence-curve variance `σ̂²/n`, to compare with `variance`.
    pub ic_variance: f64,
    pub b: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridResult {
    pub truths: Vec<TruthEstimate>,
    pub records: Vec<ReplicateRecord>,
    pub rows: Vec<GridRow>,
}

impl GridResult {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(e) => Error::io(path, e),
            other => Error::Invalid(format!("{other:?}")),
        })?;
        w.write_record([
            "estimator",
            "estimand",
            "n",
            "threshold",
            "coverage",
            "power",
            "bias2",
            "variance",
            "mse",
            "b",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.estimator.clone(),
                r.estimand.clone(),
                r.n.to_string(),
                r.threshold.to_string(),
                r.coverage.to_string(),
                r.power.to_string(),
                r.bias2.to_string(),
                r.variance.to_string(),
                r.mse.to_string(),
                r.b.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Runs every `(n, replicate)` task on the current rayon pool and aggregates
/// coverage, power and bootstrap metrics per threshold. Output is identical
/// for any pool size.
pub fn evaluate_grid(grid: &ReplicateGrid, source: GridSource<'_>) -> Result<GridResult> {
    grid.validate()?;
    let truths: Vec<TruthEstimate> = match source {
        GridSource::Null(ds) => {
            if ds.n_rows() == 0 {
                return Err(Error::Empty("null-sampler source".into()));
            }
            grid.estimands
                .iter()
                .map(|_| TruthEstimate {
                    value: 0.0,
                    std_error: 0.0,
                    draws: 0,
                    counterfactual_means: Vec::new(),
                })
                .collect()
        }
        GridSource::Spec(sim) => grid
            .estimands
            .par_iter()
            .map(|e| monte_carlo_truth(sim, e, grid.truth_draws, grid.seed))
            .collect::<Result<_>>()?,
    };
    let tasks: Vec<(usize, usize)> = (0..grid.sizes.len())
        .flat_map(|s| (0..grid.replicates).map(move |b| (s, b)))
        .collect();
    let records: Vec<ReplicateRecord> = tasks
        .par_iter()
        .map(|&(s, b)| run_replicate(grid, source, &truths, s, b))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let rows = aggregate(grid, &truths, &records);
    Ok(GridResult {
        truths,
        records,
        rows,
    })
}

/// Estimand indices grouped by treatment set, then by outcome, in first
/// appearance order.
fn groups(estimands: &[Estimand]) -> Vec<(Vec<String>, Vec<(String, Vec<usize>)>)> {
    let mut out: Vec<(Vec<String>, Vec<(String, Vec<usize>)>)> = Vec::new();
    for (i, e) in estimands.iter().enumerate() {
        let pos = match out.iter().position(|(t, _)| *t == e.treatments) {
            Some(p) => p,
            None => {
                out.push((e.treatments.clone(), Vec::new()));
                out.len() - 1
            }
        };
        let outcomes = &mut out[pos].1;
        match outcomes.iter_mut().find(|(o, _)| *o == e.outcome) {
            Some((_, idx)) => idx.push(i),
            None => outcomes.push((e.outcome.clone(), vec![i])),
        }
    }
    out
}

fn run_replicate(
    grid: &ReplicateGrid,
    source: GridSource<'_>,
    truths: &[TruthEstimate],
    size: usize,
    b: usize,
) -> Result<Vec<ReplicateRecord>> {
    let n = grid.sizes[size];
    let mut rng = task_rng(grid.seed, size as u64, b as u64);
    let ds = match source {
        GridSource::Null(src) => null_sample_with(src, n, &mut rng)?,
        GridSource::Spec(sim) => sim.sample(n, &mut rng)?,
    };
    let settings = NuisanceSettings {
        seed: grid
            .nuisance
            .seed
            .wrapping_add((size as u64) << 32)
            .wrapping_add(b as u64),
        ..grid.nuisance.clone()
    };
    let with_cv = grid.estimators.iter().any(|e| e.is_cv());
    let mut records = Vec::new();
    let blank =
        |estimand: usize, estimator: Estimator, min_frequency: f64, status: RecordStatus| {
            ReplicateRecord {
                n,
                replicate: b,
                estimand,
                estimator,
                min_frequency,
                status,
                estimate: f64::NAN,
                std_error: f64::NAN,
                covered: false,
                rejected: false,
            }
        };
    for (treatments, outcomes) in groups(&grid.estimands) {
        let propensity = fit_propensity_bundle(&ds, &treatments, &settings, with_cv);
        for (outcome, members) in outcomes {
            let fitted = propensity
                .as_ref()
                .map_err(|e| e.to_string())
                .and_then(|p| {
                    fit_outcome_bundle(&ds, &outcome, p, &settings)
                        .map(|o| (p, o))
                        .map_err(|e| e.to_string())
                });
            for i in members {
                let estimand = &grid.estimands[i];
                let (p, o) = match &fitted {
                    Ok(pair) => pair,
                    Err(msg) => {
                        for &e in &grid.estimators {
                            records.push(blank(i, e, 0.0, RecordStatus::Failed(msg.clone())));
                        }
                        continue;
                    }
                };
                let terms = ResolvedTerms::resolve(estimand, &o.frame)?;
                let filter = frequency_filter_frame(&o.frame, &terms, 0.0)?;
                let min_frequency = filter
                    .frequencies
                    .iter()
                    .cloned()
                    .fold(f64::INFINITY, f64::min);
                if filter.counts.contains(&0) {
                    for &e in &grid.estimators {
                        records.push(blank(i, e, min_frequency, RecordStatus::Unobserved));
                    }
                    continue;
                }
                let reports = estimate_estimand(o, p, estimand, &grid.estimators)?;
                for (&e, report) in grid.estimators.iter().zip(reports) {
                    let outcome = report.and_then(|r| {
                        let w = wald_ci(r.estimate, r.variance, r.n, grid.alpha)?;
                        Ok((r, w))
                    });
                    records.push(match outcome {
                        Ok((r, w)) => {
                            let truth = truths[i].value;
                            let covered = match w.interval {
                                Some((lo, hi)) => lo <= truth && truth <= hi,
                                None => r.estimate == truth,
                            };
                            ReplicateRecord {
                                estimate: r.estimate,
                                std_error: w.std_error,
                                covered,
                                rejected: w.p_value < grid.alpha,
                                ..blank(i, e, min_frequency, RecordStatus::Ok)
                            }
                        }
                        Err(err) => {
                            blank(i, e, min_frequency, RecordStatus::Failed(err.to_string()))
                        }
                    });
                }
            }
        }
    }
    Ok(records)
}

#[derive(Default)]
struct Tally {
    covered: usize,
    rejected: usize,
    ok: usize,
    failures: usize,
    estimates: Vec<Vec<f64>>,
    ic: f64,
}

fn tally<'a>(records: impl Iterator<Item = &'a ReplicateRecord>) -> Tally {
    let mut t = Tally::default();
    for r in records {
        match r.status {
            RecordStatus::Ok => {
                t.ok += 1;
                t.covered += usize::from(r.covered);
                t.rejected += usize::from(r.rejected);
                t.estimates.push(vec![r.estimate]);
                t.ic += r.std_error * r.std_error;
            }
            RecordStatus::Failed(_) => t.failures += 1,
            RecordStatus::Unobserved => {}
        }
    }
    t
}

fn mean_finite(values: impl Iterator<Item = f64>) -> f64 {
    let (s, c) = values
        .filter(|v| v.is_finite())
        .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if c == 0 {
        f64::NAN
    } else {
        s / c as f64
    }
}

fn aggregate(
    grid: &ReplicateGrid,
    truths: &[TruthEstimate],
    records: &[ReplicateRecord],
) -> Vec<GridRow> {
    let z = norm_quantile(0.975);
    let group_of: Vec<usize> = {
        let gs = groups(&grid.estimands);
        let mut g = vec![0; grid.estimands.len()];
        let mut k = 0;
        for (_, outcomes) in gs {
            for (_, members) in outcomes {
                for i in members {
                    g[i] = k;
                }
                k += 1;
            }
        }
        g
    };
    let n_groups = group_of.iter().max().map_or(0, |m| m + 1);
    let mut rows = Vec::new();
    for &threshold in &grid.thresholds {
        for &n in &grid.sizes {
            for &estimator in &grid.estimators {
                let mut component_rows = Vec::new();
                for (i, estimand) in grid.estimands.iter().enumerate() {
                    let t = tally(records.iter().filter(|r| {
                        r.n == n
                            && r.estimator == estimator
                            && r.estimand == i
                            && r.passes(threshold)
                    }));
                    if t.ok == 0 && t.failures == 0 {
                        continue;
                    }
                    let metrics = bootstrap_metrics(&t.estimates, &[truths[i].value]).ok();
                    let row =
                        component_row(estimator, estimand.describe(), n, threshold, &t, metrics, z);
                    component_rows.push((i, t, row));
                }
                if component_rows.is_empty() {
                    continue;
                }
                let pooled = {
                    let mut t = Tally::default();
                    for (_, c, _) in &component_rows {
                        t.ok += c.ok;
                        t.covered += c.covered;
                        t.rejected += c.rejected;
                        t.failures += c.failures;
                        t.ic += c.ic;
                    }
                    t
                };
                let frac = |a: usize, b: usize| {
                    if b == 0 {
                        f64::NAN
                    } else {
                        a as f64 / b as f64
                    }
                };
                let metric_mean =
                    |f: fn(&GridRow) -> f64, it: &mut dyn Iterator<Item = &GridRow>| {
                        mean_finite(it.map(f))
                    };
                let all = GridRow {
                    estimator: estimator.name().into(),
                    estimand: "ALL".into(),
                    n,
                    threshold,
                    coverage: frac(pooled.covered, pooled.ok),
                    coverage_interval: wilson_interval(pooled.covered, pooled.ok, z),
                    power: frac(pooled.rejected, pooled.ok),
                    bias2: metric_mean(|r| r.bias2, &mut component_rows.iter().map(|c| &c.2)),
                    variance: metric_mean(|r| r.variance, &mut component_rows.iter().map(|c| &c.2)),
                    mse: metric_mean(|r| r.mse, &mut component_rows.iter().map(|c| &c.2)),
                    bias2_centered: metric_mean(
                        |r| r.bias2_centered,
                        &mut component_rows.iter().map(|c| &c.2),
                    ),
                    ic_variance: if pooled.ok == 0 {
                        f64::NAN
                    } else {
                        pooled.ic / pooled.ok as f64
                    },
                    b: pooled.ok,
                    failures: pooled.failures,
                };
                let mut group_cov = Vec::new();
                let mut group_pow = Vec::new();
                let mut group_rows: Vec<Vec<&GridRow>> = vec![Vec::new(); n_groups];
                for g in 0..n_groups {
                    let (mut cov, mut rej, mut ok) = (0, 0, 0);
                    for (i, c, row) in &component_rows {
                        if group_of[*i] == g {
                            cov += c.covered;
                            rej += c.rejected;
                            ok += c.ok;
                            group_rows[g].push(row);
                        }
                    }
                    if ok > 0 {
                        group_cov.push(frac(cov, ok));
                        group_pow.push(frac(rej, ok));
                    }
                }
                let group_metric = |f: fn(&GridRow) -> f64| {
                    mean_finite(
                        group_rows
                            .iter()
                            .filter(|g| !g.is_empty())
                            .map(|g| mean_finite(g.iter().map(|r| f(r)))),
                    )
                };
                let groups_row = GridRow {
                    estimand: "ALL_GROUPS".into(),
                    coverage: mean_finite(group_cov.iter().cloned()),
                    power: mean_finite(group_pow.iter().cloned()),
                    bias2: group_metric(|r| r.bias2),
                    variance: group_metric(|r| r.variance),
                    mse: group_metric(|r| r.mse),
                    bias2_centered: group_metric(|r| r.bias2_centered),
                    ..all.clone()
                };
                rows.extend(component_rows.into_iter().map(|c| c.2));
                rows.push(all);
                rows.push(groups_row);
            }
        }
    }
    rows
}

fn component_row(
    estimator: Estimator,
    estimand: String,
    n: usize,
    threshold: f64,
    t: &Tally,
    metrics: Option<super::BootstrapMetrics>,
    z: f64,
) -> GridRow {
    let frac = |a: usize| {
        if t.ok == 0 {
            f64::NAN
        } else {
            a as f64 / t.ok as f64
        }
    };
    GridRow {
        estimator: estimator.name().into(),
        estimand,
        n,
        threshold,
        coverage: frac(t.covered),
        coverage_interval: wilson_interval(t.covered, t.ok, z),
        power: frac(t.rejected),
        bias2: metrics.map_or(f64::NAN, |m| m.bias2),
        variance: metrics.map_or(f64::NAN, |m| m.variance),
        mse: metrics.map_or(f64::NAN, |m| m.mse),
        bias2_centered: metrics.map_or(f64::NAN, |m| m.bias2_centered),
        ic_variance: if t.ok == 0 {
            f64::NAN
        } else {
            t.ic / t.ok as f64
        },
        b: t.ok,
        failures: t.failures,
    }
}
