//! Batch estimation and dependence correction driven by a [`Normalized`]
//! configuration.
//!
//! Output directory layout:
//! - `results.jsonl`: one record per (estimand, estimator)
//! - `composites.jsonl`, `joint_tests.jsonl`: configured derived quantities
//! - `eif/*.f64`: influence values per dataset row, little-endian, NaN for
//!   rows outside the estimate
//! - `manifest.json`: hashes, seed, fit counts and exclusions
//! - `svp.jsonl`: written by [`run_svp`]

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{
    FdrScope, LoadedSource, NamedEstimand, Normalized, NormalizedEvaluate, TransformSpec,
};
use crate::error::{Error, Result};
use crate::estimand::{frequency_filter_frame, ResolvedTerms};
use crate::inference::{
    bh_fdr, delta_method, hotelling, wald_ci, Hotelling, JointEstimate, Transform,
};
use crate::pipeline::{
    estimate_estimand, fit_outcome_bundle, fit_propensity_bundle, OutcomeBundle, PropensityBundle,
};
use crate::relatedness::{default_grid, svp_ci, svp_curve, Distance, Grm, SvpCurve};
use crate::simulation::{evaluate_grid, GridResult, GridSource, RecordStatus};
use crate::targeting::{EstimateReport, Estimator};

pub const RESULTS_FILE: &str = "results.jsonl";
pub const COMPOSITES_FILE: &str = "composites.jsonl";
pub const JOINT_FILE: &str = "joint_tests.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SVP_FILE: &str = "svp.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Filtered,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdrEntry {
    pub adjusted: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub name: String,
    pub description: String,
    pub outcome: String,
    pub treatments: Vec<String>,
    pub estimator: Estimator,
    pub status: Status,
    pub estimate: Option<f64>,
    pub std_error: Option<f64>,
    pub variance: Option<f64>,
    pub n: Option<usize>,
    pub epsilon: Option<f64>,
    pub residual_bias: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
    pub p_value: Option<f64>,
    pub degenerate: Option<bool>,
    pub converged: Option<bool>,
    pub bias_within_tolerance: Option<bool>,
    pub clipped: Option<usize>,
    pub extrapolated: Option<bool>,
    pub counterfactual_means: Vec<f64>,
    pub threshold: f64,
    pub frequencies: Vec<f64>,
    pub counts: Vec<usize>,
    pub excluded_rows: usize,
    pub fdr: BTreeMap<String, FdrEntry>,
    pub eif_file: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeRecord {
    pub name: String,
    pub component: usize,
    pub of: Vec<String>,
    pub estimator: Estimator,
    pub status: Status,
    pub estimate: Option<f64>,
    pub variance: Option<f64>,
    pub n: Option<usize>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
    pub p_value: Option<f64>,
    pub eif_file: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JointTestRecord {
    pub name: String,
    pub of: Vec<String>,
    pub estimator: Estimator,
    pub status: Status,
    pub test: Option<Hotelling>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LearnerChoice {
    pub treatments: Vec<String>,
    pub outcome: Option<String>,
    pub learner: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub dataset_hash: String,
    pub dataset_rows: usize,
    pub records: usize,
    pub ok: usize,
    pub filtered: usize,
    pub failed: usize,
    /// Canonical propensity fits, one per distinct treatment set.
    pub propensity_fits: usize,
    pub outcome_fits: usize,
    /// CV folds are assigned per treatment set and shared by every outcome
    /// and estimand on that set.
    pub shared_cv_folds: bool,
    pub exclusions: BTreeMap<String, usize>,
    pub learners: Vec<LearnerChoice>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<ResultRecord>,
    pub composites: Vec<CompositeRecord>,
    pub joint_tests: Vec<JointTestRecord>,
    pub manifest: Manifest,
}

impl RunOutput {
    /// True when no record, composite or joint test failed.
    pub fn is_clean(&self) -> bool {
        self.records.iter().all(|r| r.status != Status::Failed)
            && self.composites.iter().all(|r| r.status != Status::Failed)
            && self.joint_tests.iter().all(|r| r.status != Status::Failed)
    }
}

struct Estimated {
    record: ResultRecord,
    report: Option<EstimateReport>,
}

fn base_record(e: &NamedEstimand, estimator: Estimator, threshold: f64) -> ResultRecord {
    ResultRecord {
        name: e.name.clone(),
        description: e.estimand.describe(),
        outcome: e.estimand.outcome.clone(),
        treatments: e.estimand.treatments.clone(),
        estimator,
        status: Status::Failed,
        estimate: None,
        std_error: None,
        variance: None,
        n: None,
        epsilon: None,
        residual_bias: None,
        ci_lower: None,
        ci_upper: None,
        p_value: None,
        degenerate: None,
        converged: None,
        bias_within_tolerance: None,
        clipped: None,
        extrapolated: None,
        counterfactual_means: Vec::new(),
        threshold,
        frequencies: Vec::new(),
        counts: Vec::new(),
        excluded_rows: 0,
        fdr: BTreeMap::new(),
        eif_file: None,
        error: None,
    }
}

/// Estimand indices grouped by treatment set, then outcome.
fn groups(estimands: &[NamedEstimand]) -> Vec<(Vec<String>, Vec<(String, Vec<usize>)>)> {
    let mut out: Vec<(Vec<String>, Vec<(String, Vec<usize>)>)> = Vec::new();
    for (i, e) in estimands.iter().enumerate() {
        let t = &e.estimand.treatments;
        let pos = out.iter().position(|(s, _)| s == t).unwrap_or_else(|| {
            out.push((t.clone(), Vec::new()));
            out.len() - 1
        });
        let outcomes = &mut out[pos].1;
        match outcomes.iter_mut().find(|(o, _)| *o == e.estimand.outcome) {
            Some((_, idx)) => idx.push(i),
            None => outcomes.push((e.estimand.outcome.clone(), vec![i])),
        }
    }
    out
}

fn estimate_members(
    cfg: &Normalized,
    members: &[usize],
    fitted: std::result::Result<(&PropensityBundle, &OutcomeBundle), String>,
) -> Vec<(usize, Vec<Estimated>)> {
    let threshold = cfg.config.threshold;
    let alpha = cfg.config.inference.alpha;
    members
        .par_iter()
        .map(|&i| {
            let e = &cfg.estimands[i];
            let base = |est| base_record(e, est, threshold);
            let failed = |msg: String| -> Vec<Estimated> {
                cfg.estimators
                    .iter()
                    .map(|&est| Estimated {
                        record: ResultRecord {
                            error: Some(msg.clone()),
                            ..base(est)
                        },
                        report: None,
                    })
                    .collect()
            };
            let (p, o) = match fitted {
                Ok(pair) => pair,
                Err(ref msg) => return (i, failed(msg.clone())),
            };
            let filter = match ResolvedTerms::resolve(&e.estimand, &o.frame)
                .and_then(|terms| frequency_filter_frame(&o.frame, &terms, threshold))
            {
                Ok(f) => f,
                Err(err) => return (i, failed(err.to_string())),
            };
            let excluded = o.frame.excluded;
            let with_filter = |r: ResultRecord| ResultRecord {
                frequencies: filter.frequencies.clone(),
                counts: filter.counts.clone(),
                excluded_rows: excluded,
                ..r
            };
            if !filter.keep {
                let out = cfg
                    .estimators
                    .iter()
                    .map(|&est| Estimated {
                        record: with_filter(ResultRecord {
                            status: Status::Filtered,
                            ..base(est)
                        }),
                        report: None,
                    })
                    .collect();
                return (i, out);
            }
            let reports = match estimate_estimand(o, p, &e.estimand, &cfg.estimators) {
                Ok(r) => r,
                Err(err) => return (i, failed(err.to_string())),
            };
            let out = cfg
                .estimators
                .iter()
                .zip(reports)
                .map(|(&est, report)| {
                    let report = report
                        .and_then(|r| wald_ci(r.estimate, r.variance, r.n, alpha).map(|w| (r, w)));
                    match report {
                        Ok((r, w)) => Estimated {
                            record: with_filter(ResultRecord {
                                status: Status::Ok,
                                estimate: Some(r.estimate),
                                std_error: Some(w.std_error),
                                variance: Some(r.variance),
                                n: Some(r.n),
                                epsilon: r.epsilon,
                                residual_bias: Some(r.residual_bias),
                                ci_lower: w.interval.map(|c| c.0),
                                ci_upper: w.interval.map(|c| c.1),
                                p_value: Some(w.p_value),
                                degenerate: Some(w.degenerate),
                                converged: Some(r.converged),
                                bias_within_tolerance: Some(r.bias_within_tolerance),
                                clipped: Some(r.clipped),
                                extrapolated: Some(r.extrapolated),
                                counterfactual_means: r.counterfactual_means.clone(),
                                eif_file: Some(format!("eif/{i:05}_{}.f64", est.name())),
                                ..base(est)
                            }),
                            report: Some(r),
                        },
                        Err(err) => Estimated {
                            record: with_filter(ResultRecord {
                                error: Some(err.to_string()),
                                ..base(est)
                            }),
                            report: None,
                        },
                    }
                })
                .collect();
            (i, out)
        })
        .collect()
}

/// Fits nuisances once per treatment set and outcome, runs every estimator,
/// and writes the output directory. Failures are isolated per record.
pub fn run_estimation(cfg: &Normalized) -> Result<RunOutput> {
    let with_cv = cfg.estimators.iter().any(|e| e.is_cv());
    let settings = cfg.config.learners.settings(cfg.config.seed);
    let ds = &cfg.dataset;
    let groups = groups(&cfg.estimands);
    type GroupOut = (Vec<(usize, Vec<Estimated>)>, Vec<LearnerChoice>, usize);
    let per_group: Vec<GroupOut> = groups
        .par_iter()
        .map(|(treatments, outcomes)| {
            let mut choices = Vec::new();
            let propensity = fit_propensity_bundle(ds, treatments, &settings, with_cv);
            if let Ok(p) = &propensity {
                choices.push(LearnerChoice {
                    treatments: treatments.clone(),
                    outcome: None,
                    learner: p.spec.label(),
                });
            }
            let per_outcome: Vec<(Vec<(usize, Vec<Estimated>)>, Option<LearnerChoice>)> = outcomes
                .par_iter()
                .map(|(outcome, members)| {
                    let bundle = propensity
                        .as_ref()
                        .map_err(|e| e.to_string())
                        .and_then(|p| {
                            fit_outcome_bundle(ds, outcome, p, &settings)
                                .map(|o| (p, o))
                                .map_err(|e| e.to_string())
                        });
                    let choice = bundle.as_ref().ok().map(|(_, o)| LearnerChoice {
                        treatments: treatments.clone(),
                        outcome: Some(outcome.clone()),
                        learner: o.spec.label(),
                    });
                    let fitted = match &bundle {
                        Ok((p, o)) => Ok((*p, o)),
                        Err(msg) => Err(msg.clone()),
                    };
                    (estimate_members(cfg, members, fitted), choice)
                })
                .collect();
            let mut out = Vec::new();
            let mut fits = 0;
            for (records, choice) in per_outcome {
                out.extend(records);
                if let Some(c) = choice {
                    choices.push(c);
                    fits += 1;
                }
            }
            (out, choices, fits)
        })
        .collect();
    let mut by_index: Vec<Option<Vec<Estimated>>> =
        (0..cfg.estimands.len()).map(|_| None).collect();
    let mut learners = Vec::new();
    let mut outcome_fits = 0;
    for (records, choices, fits) in per_group {
        for (i, r) in records {
            by_index[i] = Some(r);
        }
        learners.extend(choices);
        outcome_fits += fits;
    }
    let mut estimated: Vec<Estimated> = by_index.into_iter().flatten().flatten().collect();
    apply_fdr(cfg, &mut estimated)?;
    let composites = run_composites(cfg, &estimated);
    let joint_tests = run_joint_tests(cfg, &estimated);
    let mut exclusions = BTreeMap::new();
    for e in &estimated {
        exclusions.insert(e.record.name.clone(), e.record.excluded_rows);
    }
    let count = |s: Status| estimated.iter().filter(|e| e.record.status == s).count();
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").into(),
        config_hash: cfg.config_hash.clone(),
        seed: cfg.config.seed,
        dataset_hash: ds.content_hash(),
        dataset_rows: ds.n_rows(),
        records: estimated.len(),
        ok: count(Status::Ok),
        filtered: count(Status::Filtered),
        failed: count(Status::Failed),
        propensity_fits: groups.len(),
        outcome_fits,
        shared_cv_folds: with_cv,
        exclusions,
        learners,
    };
    let out_dir = &cfg.config.output;
    fs::create_dir_all(out_dir.join("eif")).map_err(|e| Error::io(out_dir, e))?;
    for e in &estimated {
        if let (Some(file), Some(report)) = (&e.record.eif_file, &e.report) {
            write_eif(&out_dir.join(file), ds.n_rows(), &report.rows, &report.eif)?;
        }
    }
    for (c, eif) in &composites {
        if let (Some(file), Some((rows, values))) = (&c.eif_file, eif) {
            write_eif(&out_dir.join(file), ds.n_rows(), rows, values)?;
        }
    }
    let records: Vec<ResultRecord> = estimated.into_iter().map(|e| e.record).collect();
    let composites: Vec<CompositeRecord> = composites.into_iter().map(|c| c.0).collect();
    write_jsonl(&out_dir.join(RESULTS_FILE), &records)?;
    write_jsonl(&out_dir.join(COMPOSITES_FILE), &composites)?;
    write_jsonl(&out_dir.join(JOINT_FILE), &joint_tests)?;
    let path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(RunOutput {
        records,
        composites,
        joint_tests,
        manifest,
    })
}

fn apply_fdr(cfg: &Normalized, estimated: &mut [Estimated]) -> Result<()> {
    let alpha = cfg
        .config
        .inference
        .fdr_alpha
        .unwrap_or(cfg.config.inference.alpha);
    for scope in &cfg.config.inference.fdr_scope {
        let key = match scope {
            FdrScope::Study => "study",
            FdrScope::PerOutcome => "per_outcome",
        };
        let mut families: BTreeMap<(Estimator, String), Vec<usize>> = BTreeMap::new();
        for (i, e) in estimated.iter().enumerate() {
            if e.record.p_value.is_some() {
                let outcome = match scope {
                    FdrScope::Study => String::new(),
                    FdrScope::PerOutcome => e.record.outcome.clone(),
                };
                families
                    .entry((e.record.estimator, outcome))
                    .or_default()
                    .push(i);
            }
        }
        for members in families.values() {
            let p: Vec<f64> = members
                .iter()
                .map(|&i| estimated[i].record.p_value.unwrap())
                .collect();
            let bh = bh_fdr(&p, alpha)?;
            for (k, &i) in members.iter().enumerate() {
                estimated[i].record.fdr.insert(
                    key.into(),
                    FdrEntry {
                        adjusted: bh.adjusted[k],
                        significant: bh.significant[k],
                    },
                );
            }
        }
    }
    Ok(())
}

fn lookup<'a>(
    estimated: &'a [Estimated],
    of: &[String],
    estimator: Estimator,
) -> std::result::Result<Vec<&'a EstimateReport>, String> {
    of.iter()
        .map(|name| {
            estimated
                .iter()
                .find(|e| e.record.name == *name && e.record.estimator == estimator)
                .and_then(|e| e.report.as_ref())
                .ok_or_else(|| format!("estimand `{name}` has no estimate"))
        })
        .collect()
}

type CompositeOut = (CompositeRecord, Option<(Vec<usize>, Vec<f64>)>);

fn run_composites(cfg: &Normalized, estimated: &[Estimated]) -> Vec<CompositeOut> {
    let alpha = cfg.config.inference.alpha;
    let mut out = Vec::new();
    for (ci, c) in cfg.config.inference.composites.iter().enumerate() {
        let transform = match &c.transform {
            TransformSpec::Named(_) => Transform::difference(),
            TransformSpec::Matrix(rows) => Transform::Linear(DMatrix::from_row_iterator(
                rows.len(),
                c.of.len(),
                rows.iter().flatten().copied(),
            )),
        };
        let q = match &c.transform {
            TransformSpec::Named(_) => 1,
            TransformSpec::Matrix(rows) => rows.len(),
        };
        for &estimator in &cfg.estimators {
            let record = |component: usize| CompositeRecord {
                name: c.name.clone(),
                component,
                of: c.of.clone(),
                estimator,
                status: Status::Failed,
                estimate: None,
                variance: None,
                n: None,
                ci_lower: None,
                ci_upper: None,
                p_value: None,
                eif_file: None,
                error: None,
            };
            let result = lookup(estimated, &c.of, estimator).and_then(|reports| {
                let joint = JointEstimate::from_reports(&reports).map_err(|e| e.to_string())?;
                let mapped = delta_method(&joint, &transform).map_err(|e| e.to_string())?;
                Ok((reports[0].rows.clone(), mapped))
            });
            match result {
                Ok((rows, mapped)) => {
                    for r in 0..q {
                        let variance = mapped.covariance[(r, r)];
                        let eif = mapped.eif.as_ref().map(|d| d[r].clone());
                        let rec = match wald_ci(mapped.estimate[r], variance, mapped.n, alpha) {
                            Ok(w) => CompositeRecord {
                                status: Status::Ok,
                                estimate: Some(mapped.estimate[r]),
                                variance: Some(variance),
                                n: Some(mapped.n),
                                ci_lower: w.interval.map(|c| c.0),
                                ci_upper: w.interval.map(|c| c.1),
                                p_value: Some(w.p_value),
                                eif_file: eif.as_ref().map(|_| {
                                    format!("eif/composite_{ci:03}_{r}_{}.f64", estimator.name())
                                }),
                                ..record(r)
                            },
                            Err(e) => CompositeRecord {
                                error: Some(e.to_string()),
                                ..record(r)
                            },
                        };
                        let payload = if rec.status == Status::Ok {
                            eif.map(|e| (rows.clone(), e))
                        } else {
                            None
                        };
                        out.push((rec, payload));
                    }
                }
                Err(msg) => out.push((
                    CompositeRecord {
                        error: Some(msg),
                        ..record(0)
                    },
                    None,
                )),
            }
        }
    }
    out
}

fn run_joint_tests(cfg: &Normalized, estimated: &[Estimated]) -> Vec<JointTestRecord> {
    let mut out = Vec::new();
    for t in &cfg.config.inference.joint_tests {
        let null = t.null.clone().unwrap_or_else(|| vec![0.0; t.of.len()]);
        for &estimator in &cfg.estimators {
            let result = lookup(estimated, &t.of, estimator).and_then(|reports| {
                let joint = JointEstimate::from_reports(&reports).map_err(|e| e.to_string())?;
                hotelling(&joint, &null).map_err(|e| e.to_string())
            });
            out.push(JointTestRecord {
                name: t.name.clone(),
                of: t.of.clone(),
                estimator,
                status: if result.is_ok() {
                    Status::Ok
                } else {
                    Status::Failed
                },
                error: result.as_ref().err().cloned(),
                test: result.ok(),
            });
        }
    }
    out
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `values` at dataset positions `rows`, NaN elsewhere.
pub fn write_eif(path: &Path, n_rows: usize, rows: &[usize], values: &[f64]) -> Result<()> {
    let mut full = vec![f64::NAN; n_rows];
    for (&r, &v) in rows.iter().zip(values) {
        full[r] = v;
    }
    let bytes: Vec<u8> = full.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_eif(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "length is not a multiple of 8 bytes".into(),
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Distance restricted to a subset of individuals.
struct Subset<'a> {
    grm: &'a Grm,
    rows: Vec<usize>,
}

impl Distance for Subset<'_> {
    fn n(&self) -> usize {
        self.rows.len()
    }

    fn distance(&self, i: usize, j: usize) -> f64 {
        1.0 - self.grm.get(self.rows[i], self.rows[j])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SvpRecord {
    pub name: String,
    /// `record` or `composite`.
    pub source: String,
    pub component: usize,
    pub estimator: Estimator,
    pub estimate: f64,
    pub variance_iid: f64,
    pub p_value_iid: f64,
    pub n: usize,
    pub curve: SvpCurve,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
    pub p_value: f64,
    pub degenerate: bool,
}

/// Sieve-plateau correction for every estimate with uncorrected p below the
/// configured cutoff. Requires a prior [`run_estimation`] in the same output
/// directory on the same dataset.
pub fn run_svp(cfg: &Normalized) -> Result<Vec<SvpRecord>> {
    let svp = cfg
        .config
        .svp
        .as_ref()
        .ok_or_else(|| Error::Config(vec!["svp: section missing".into()]))?;
    let out_dir = &cfg.config.output;
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let manifest: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?,
    )?;
    let hash = cfg.dataset.content_hash();
    if manifest["dataset_hash"].as_str() != Some(hash.as_str()) {
        return Err(Error::invalid(
            "results were produced from a different dataset; rerun estimation",
        ));
    }
    let grm = Grm::read(&svp.grm)?;
    if grm.n() != cfg.dataset.n_rows() {
        return Err(Error::LengthMismatch {
            what: "GRM individuals vs dataset rows".into(),
            left: grm.n(),
            right: cfg.dataset.n_rows(),
        });
    }
    let records: Vec<ResultRecord> = read_jsonl(&out_dir.join(RESULTS_FILE))?;
    let composites: Vec<CompositeRecord> = read_jsonl(&out_dir.join(COMPOSITES_FILE))?;
    struct Job {
        name: String,
        source: &'static str,
        component: usize,
        estimator: Estimator,
        estimate: f64,
        variance: f64,
        p_value: f64,
        eif_file: String,
    }
    let mut jobs = Vec::new();
    for r in &records {
        if let (Status::Ok, Some(p), Some(file)) = (r.status, r.p_value, &r.eif_file) {
            if p < svp.p_cutoff {
                jobs.push(Job {
                    name: r.name.clone(),
                    source: "record",
                    component: 0,
                    estimator: r.estimator,
                    estimate: r.estimate.unwrap_or(f64::NAN),
                    variance: r.variance.unwrap_or(f64::NAN),
                    p_value: p,
                    eif_file: file.clone(),
                });
            }
        }
    }
    for c in &composites {
        if let (Status::Ok, Some(p), Some(file)) = (c.status, c.p_value, &c.eif_file) {
            if p < svp.p_cutoff {
                jobs.push(Job {
                    name: c.name.clone(),
                    source: "composite",
                    component: c.component,
                    estimator: c.estimator,
                    estimate: c.estimate.unwrap_or(f64::NAN),
                    variance: c.variance.unwrap_or(f64::NAN),
                    p_value: p,
                    eif_file: file.clone(),
                });
            }
        }
    }
    let taus = default_grid(svp.tau_points, svp.tau_max);
    let alpha = cfg.config.inference.alpha;
    let out: Vec<SvpRecord> = jobs
        .par_iter()
        .map(|job| {
            let full = read_eif(&out_dir.join(&job.eif_file))?;
            if full.len() != grm.n() {
                return Err(Error::LengthMismatch {
                    what: format!("EIF sidecar {} vs GRM", job.eif_file),
                    left: full.len(),
                    right: grm.n(),
                });
            }
            let rows: Vec<usize> = (0..full.len()).filter(|&i| full[i].is_finite()).collect();
            let eif: Vec<f64> = rows.iter().map(|&i| full[i]).collect();
            let n = eif.len();
            let curve = svp_curve(&eif, &Subset { grm: &grm, rows }, &taus, svp.rule)?;
            let w = svp_ci(job.estimate, curve.variance0, n, alpha)?;
            Ok(SvpRecord {
                name: job.name.clone(),
                source: job.source.into(),
                component: job.component,
                estimator: job.estimator,
                estimate: job.estimate,
                variance_iid: job.variance,
                p_value_iid: job.p_value,
                n,
                ci_lower: w.interval.map(|c| c.0),
                ci_upper: w.interval.map(|c| c.1),
                p_value: w.p_value,
                degenerate: w.degenerate,
                curve,
            })
        })
        .collect::<Result<_>>()?;
    write_jsonl(&out_dir.join(SVP_FILE), &out)?;
    Ok(out)
}

pub const GRID_FILE: &str = "grid.csv";
pub const GRID_RECORDS_FILE: &str = "records.jsonl";
pub const TRUTHS_FILE: &str = "truths.json";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluateManifest {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub source: String,
    pub estimands: Vec<String>,
    pub replicates: usize,
    pub sizes: Vec<usize>,
    pub failures: usize,
    pub unobserved: usize,
}

/// Runs the replicate grid on the current rayon pool and writes `grid.csv`,
/// `records.jsonl`, `truths.json` and `manifest.json` to the output directory.
pub fn run_evaluate(cfg: &NormalizedEvaluate) -> Result<GridResult> {
    let grid = cfg.grid();
    let (result, source) = match &cfg.source {
        LoadedSource::Null(ds) => (
            evaluate_grid(&grid, GridSource::Null(ds))?,
            format!("null:{}", ds.content_hash()),
        ),
        LoadedSource::Spec(sim) => {
            let text = serde_json::to_string(sim.spec())?;
            (
                evaluate_grid(&grid, GridSource::Spec(sim))?,
                format!("spec:{}", crate::config::sha256_hex(text.as_bytes())),
            )
        }
    };
    let out = &cfg.config.output;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    result.write_csv(&out.join(GRID_FILE))?;
    write_jsonl(&out.join(GRID_RECORDS_FILE), &result.records)?;
    let named: Vec<_> = cfg
        .estimands
        .iter()
        .zip(&result.truths)
        .map(|(e, t)| serde_json::json!({ "name": e.name, "truth": t }))
        .collect();
    let path = out.join(TRUTHS_FILE);
    fs::write(&path, serde_json::to_string_pretty(&named)? + "\n")
        .map_err(|e| Error::io(&path, e))?;
    let manifest = EvaluateManifest {
        version: env!("CARGO_PKG_VERSION").into(),
        config_hash: cfg.config_hash.clone(),
        seed: cfg.config.seed,
        source,
        estimands: cfg.estimands.iter().map(|e| e.name.clone()).collect(),
        replicates: cfg.config.replicates,
        sizes: cfg.config.sizes.clone(),
        failures: result
            .records
            .iter()
            .filter(|r| matches!(r.status, RecordStatus::Failed(_)))
            .count(),
        unobserved: result
            .records
            .iter()
            .filter(|r| r.status == RecordStatus::Unobserved)
            .count(),
    };
    let path = out.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
        .map_err(|e| Error::io(&path, e))?;
    Ok(result)
}
