//! TOML run configuration: schema, defaults and validation.
//!
//! Every violation is reported with a path into the document, e.g.
//! `estimands[2].to[0]: unknown level `7` of `A1``. Relative paths resolve
//! against the configuration file's directory.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{ColumnRoles, Dataset, OutcomeKind};
use crate::error::{Error, Result};
use crate::estimand::{Estimand, EstimandKind};
use crate::learners::{LearnerKind, LearnerSpec, PropensityMode};
use crate::pipeline::NuisanceSettings;
use crate::relatedness::PlateauRule;
use crate::simulation::{GenerativeSpec, ReplicateGrid, Simulator, MIN_TRUTH_DRAWS};
use crate::targeting::Estimator;

pub const DEFAULT_THRESHOLD: f64 = 0.01;
pub const DEFAULT_FOLDS: usize = 3;
pub const DEFAULT_TAU_POINTS: usize = 101;
pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_P_CUTOFF: f64 = 0.07;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub estimands: Vec<EstimandConfig>,
    #[serde(default)]
    pub generators: Vec<GeneratorConfig>,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<String>,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub learners: LearnersConfig,
    #[serde(default)]
    pub inference: InferenceConfig,
    #[serde(default)]
    pub svp: Option<SvpConfig>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_estimators() -> Vec<String> {
    vec!["tmle".into()]
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub path: PathBuf,
    pub outcomes: Vec<OutcomeDecl>,
    pub treatments: Vec<TreatmentDecl>,
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub extra: Vec<ExtraDecl>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeDecl {
    pub name: String,
    pub kind: OutcomeKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TreatmentDecl {
    Name(String),
    Levels { name: String, levels: Vec<String> },
}

impl TreatmentDecl {
    pub fn name(&self) -> &str {
        match self {
            TreatmentDecl::Name(n) | TreatmentDecl::Levels { name: n, .. } => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtraDecl {
    pub name: String,
    #[serde(default)]
    pub categorical: bool,
}

impl DataConfig {
    pub fn roles(&self) -> ColumnRoles {
        ColumnRoles {
            outcomes: self
                .outcomes
                .iter()
                .map(|o| (o.name.clone(), o.kind))
                .collect(),
            treatments: self
                .treatments
                .iter()
                .map(|t| match t {
                    TreatmentDecl::Name(n) => (n.clone(), None),
                    TreatmentDecl::Levels { name, levels } => (name.clone(), Some(levels.clone())),
                })
                .collect(),
            covariates: self.covariates.clone(),
            extra: self
                .extra
                .iter()
                .map(|e| (e.name.clone(), e.categorical))
                .collect(),
        }
    }

    /// Loads the table after checking that every declared column exists.
    pub fn load(&self, errors: &mut Vec<String>) -> Option<Dataset> {
        let header = match csv::Reader::from_path(&self.path) {
            Ok(mut r) => match r.headers() {
                Ok(h) => h.iter().map(str::to_string).collect::<HashSet<_>>(),
                Err(e) => {
                    errors.push(format!("data.path: {e}"));
                    return None;
                }
            },
            Err(e) => {
                errors.push(format!(
                    "data.path: cannot read {}: {e}",
                    self.path.display()
                ));
                return None;
            }
        };
        let mut missing = |section: &str, i: usize, name: &str| {
            if !header.contains(name) {
                errors.push(format!("data.{section}[{i}]: column `{name}` not found"));
            }
        };
        for (i, o) in self.outcomes.iter().enumerate() {
            missing("outcomes", i, &o.name);
        }
        for (i, t) in self.treatments.iter().enumerate() {
            missing("treatments", i, t.name());
        }
        for (i, c) in self.covariates.iter().enumerate() {
            missing("covariates", i, c);
        }
        for (i, e) in self.extra.iter().enumerate() {
            missing("extra", i, &e.name);
        }
        if !errors.is_empty() {
            return None;
        }
        match Dataset::from_csv(&self.path, &self.roles()) {
            Ok(ds) => Some(ds),
            Err(e) => {
                errors.push(format!("data: {e}"));
                None
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimandConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub kind: EstimandKind,
    pub treatments: Vec<String>,
    #[serde(default)]
    pub from: Vec<String>,
    pub to: Vec<String>,
    /// Defaults to every declared outcome.
    #[serde(default)]
    pub outcomes: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorConfig {
    /// Every contrast `l -> m` (`l < m`) of each listed treatment.
    SingleVariantContrasts {
        treatments: Vec<String>,
        #[serde(default)]
        outcomes: Option<Vec<String>>,
    },
    /// Every two-point interaction from the reference levels `(0, 0)` to
    /// `(l1, l2)` for each pair of listed treatments.
    PairwiseInteractions {
        treatments: Vec<String>,
        #[serde(default)]
        outcomes: Option<Vec<String>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnersConfig {
    #[serde(default = "default_folds")]
    pub folds: usize,
    /// Outcome candidates; absent means a menu chosen by outcome kind.
    #[serde(default)]
    pub outcome: Option<Vec<LearnerSpec>>,
    #[serde(default = "default_propensity_menu")]
    pub propensity: Vec<LearnerSpec>,
    #[serde(default)]
    pub propensity_mode: PropensityMode,
}

fn default_folds() -> usize {
    DEFAULT_FOLDS
}

fn default_propensity_menu() -> Vec<LearnerSpec> {
    vec![LearnerSpec::new(LearnerKind::RidgeMultinomial, 1.0, false)]
}

impl Default for LearnersConfig {
    fn default() -> Self {
        LearnersConfig {
            folds: DEFAULT_FOLDS,
            outcome: None,
            propensity: default_propensity_menu(),
            propensity_mode: PropensityMode::Factorized,
        }
    }
}

impl LearnersConfig {
    pub fn settings(&self, seed: u64) -> NuisanceSettings {
        NuisanceSettings {
            outcome_learners: self.outcome.clone(),
            propensity_learners: self.propensity.clone(),
            propensity_mode: self.propensity_mode,
            folds: self.folds,
            seed,
        }
    }

    fn check(&self, errors: &mut Vec<String>) {
        if self.folds < 2 {
            errors.push(format!(
                "learners.folds: need at least 2, got {}",
                self.folds
            ));
        }
        for (i, l) in self.outcome.iter().flatten().enumerate() {
            if let Err(e) = l.validate() {
                errors.push(format!("learners.outcome[{i}]: {e}"));
            }
            if l.kind == LearnerKind::RidgeMultinomial {
                errors.push(format!(
                    "learners.outcome[{i}]: multinomial is a propensity learner"
                ));
            }
        }
        if self.outcome.as_ref().is_some_and(Vec::is_empty) {
            errors.push("learners.outcome: empty menu".into());
        }
        if self.propensity.is_empty() {
            errors.push("learners.propensity: empty menu".into());
        }
        for (i, l) in self.propensity.iter().enumerate() {
            if let Err(e) = l.validate() {
                errors.push(format!("learners.propensity[{i}]: {e}"));
            }
            if !matches!(
                l.kind,
                LearnerKind::Constant | LearnerKind::RidgeMultinomial
            ) {
                errors.push(format!(
                    "learners.propensity[{i}]: only `constant` and `ridge_multinomial` model treatments"
                ));
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FdrScope {
    /// All records of one estimator together.
    Study,
    /// Records of one estimator and one outcome together.
    PerOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// FDR level; defaults to `alpha`.
    #[serde(default)]
    pub fdr_alpha: Option<f64>,
    #[serde(default = "default_scopes")]
    pub fdr_scope: Vec<FdrScope>,
    #[serde(default)]
    pub composites: Vec<CompositeConfig>,
    #[serde(default)]
    pub joint_tests: Vec<JointTestConfig>,
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

fn default_scopes() -> Vec<FdrScope> {
    vec![FdrScope::Study, FdrScope::PerOutcome]
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            alpha: DEFAULT_ALPHA,
            fdr_alpha: None,
            fdr_scope: default_scopes(),
            composites: Vec::new(),
            joint_tests: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositeConfig {
    pub name: String,
    pub of: Vec<String>,
    pub transform: TransformSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TransformSpec {
    /// `"difference"`: second minus first.
    Named(String),
    /// Rows of a linear map, each as long as `of`.
    Matrix(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointTestConfig {
    pub name: String,
    pub of: Vec<String>,
    /// Null vector; zeros when absent.
    #[serde(default)]
    pub null: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SvpConfig {
    pub grm: PathBuf,
    #[serde(default = "default_tau_points")]
    pub tau_points: usize,
    /// Upper end of the τ grid. Distances range over `[0, 2]`, so pairs
    /// beyond 1 are only reached with a larger bound.
    #[serde(default = "default_tau_max")]
    pub tau_max: f64,
    #[serde(default)]
    pub rule: PlateauRule,
    #[serde(default = "default_p_cutoff")]
    pub p_cutoff: f64,
}

fn default_tau_points() -> usize {
    DEFAULT_TAU_POINTS
}

fn default_tau_max() -> f64 {
    1.0
}

fn default_p_cutoff() -> f64 {
    DEFAULT_P_CUTOFF
}

/// An estimand with its record name.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NamedEstimand {
    pub name: String,
    pub estimand: Estimand,
}

/// Validated configuration with resolved paths, the loaded dataset and the
/// expanded estimand list.
#[derive(Debug, Clone)]
pub struct Normalized {
    pub config: RunConfig,
    pub config_hash: String,
    pub dataset: Dataset,
    pub estimands: Vec<NamedEstimand>,
    pub estimators: Vec<Estimator>,
}

/// Scalar overrides applied after parsing.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threshold: Option<f64>,
    pub output: Option<PathBuf>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_relative() {
        base.join(p)
    } else {
        p.to_path_buf()
    }
}

/// Parses a TOML document, mapping syntax and schema errors to a one-item
/// error list.
pub fn parse_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<(T, String)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value = toml::from_str(&text).map_err(|e| {
        let msg = e.message().to_string();
        let at = e
            .span()
            .map(|s| format!(" (line {})", text[..s.start].lines().count().max(1)))
            .unwrap_or_default();
        Error::Config(vec![format!("{}{at}: {msg}", path.display())])
    })?;
    Ok((value, sha256_hex(text.as_bytes())))
}

pub fn validate_config(path: &Path) -> Result<Normalized> {
    validate_config_with(path, &Overrides::default())
}

pub fn validate_config_with(path: &Path, overrides: &Overrides) -> Result<Normalized> {
    let (mut config, config_hash): (RunConfig, String) = parse_toml(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    if let Some(s) = overrides.seed {
        config.seed = s;
    }
    if let Some(t) = overrides.threshold {
        config.threshold = t;
    }
    if let Some(o) = &overrides.output {
        config.output = o.clone();
    }
    config.data.path = resolve(base, &config.data.path);
    config.output = resolve(base, &config.output);
    if let Some(svp) = &mut config.svp {
        svp.grm = resolve(base, &svp.grm);
    }
    let mut errors = Vec::new();
    let dataset = config.data.load(&mut errors);
    let estimators = parse_estimators(&config.estimators, &mut errors);
    if !(0.0..1.0).contains(&config.threshold) {
        errors.push(format!(
            "threshold: must lie in [0, 1), got {}",
            config.threshold
        ));
    }
    config.learners.check(&mut errors);
    let inf = &config.inference;
    if !(inf.alpha > 0.0 && inf.alpha < 1.0) {
        errors.push(format!(
            "inference.alpha: must lie in (0, 1), got {}",
            inf.alpha
        ));
    }
    if let Some(a) = inf.fdr_alpha {
        if !(a > 0.0 && a < 1.0) {
            errors.push(format!("inference.fdr_alpha: must lie in (0, 1), got {a}"));
        }
    }
    if let Some(svp) = &config.svp {
        if svp.tau_points == 0 {
            errors.push("svp.tau_points: must be positive".into());
        }
        if !(svp.tau_max.is_finite() && svp.tau_max > 0.0) {
            errors.push("svp.tau_max: must be positive".into());
        }
        if !(0.0..=1.0).contains(&svp.p_cutoff) {
            errors.push("svp.p_cutoff: must lie in [0, 1]".into());
        }
        if !svp.grm.exists() {
            errors.push(format!("svp.grm: {} not found", svp.grm.display()));
        }
    }
    let estimands = match &dataset {
        Some(ds) => expand_estimands(&config.estimands, &config.generators, ds, &mut errors),
        None => Vec::new(),
    };
    if estimands.is_empty() && dataset.is_some() && errors.is_empty() {
        errors.push("estimands: nothing to estimate".into());
    }
    check_references(&config.inference, &estimands, &mut errors);
    match dataset {
        Some(dataset) if errors.is_empty() => Ok(Normalized {
            config,
            config_hash,
            dataset,
            estimands,
            estimators,
        }),
        _ => Err(Error::Config(errors)),
    }
}

/// Explicit estimands followed by generated ones; `ds` supplies outcome
/// names and treatment levels.
pub fn expand_estimands(
    estimands: &[EstimandConfig],
    generators: &[GeneratorConfig],
    ds: &Dataset,
    errors: &mut Vec<String>,
) -> Vec<NamedEstimand> {
    let all_outcomes: Vec<String> = ds.outcomes().iter().map(|o| o.name.clone()).collect();
    let outcomes_at =
        |at: &str, list: &Option<Vec<String>>, errors: &mut Vec<String>| -> Vec<String> {
            match list {
                None => all_outcomes.clone(),
                Some(list) => {
                    for (i, o) in list.iter().enumerate() {
                        if !all_outcomes.contains(o) {
                            errors.push(format!("{at}.outcomes[{i}]: unknown outcome `{o}`"));
                        }
                    }
                    list.clone()
                }
            }
        };
    let mut out = Vec::new();
    for (i, e) in estimands.iter().enumerate() {
        let at = format!("estimands[{i}]");
        let outcomes = outcomes_at(&at, &e.outcomes, errors);
        let mut ok = true;
        for (j, t) in e.treatments.iter().enumerate() {
            match ds.treatment(t) {
                Err(_) => {
                    errors.push(format!("{at}.treatments[{j}]: unknown treatment `{t}`"));
                    ok = false;
                }
                Ok(col) => {
                    for (field, levels) in [("from", &e.from), ("to", &e.to)] {
                        if let Some(l) = levels.get(j) {
                            if col.level_index(l).is_err() {
                                errors.push(format!(
                                    "{at}.{field}[{j}]: unknown level `{l}` of `{t}`"
                                ));
                                ok = false;
                            }
                        }
                    }
                }
            }
        }
        for outcome in &outcomes {
            let estimand = Estimand {
                kind: e.kind,
                treatments: e.treatments.clone(),
                from: e.from.clone(),
                to: e.to.clone(),
                outcome: outcome.clone(),
            };
            if let Err(err) = estimand.validate() {
                errors.push(format!("{at}: {err}"));
                break;
            }
            if ok {
                let name = match (&e.name, outcomes.len()) {
                    (Some(n), 1) => n.clone(),
                    (Some(n), _) => format!("{n}:{outcome}"),
                    (None, _) => estimand.describe(),
                };
                out.push(NamedEstimand { name, estimand });
            }
        }
    }
    for (i, g) in generators.iter().enumerate() {
        let at = format!("generators[{i}]");
        let (treatments, outcomes) = match g {
            GeneratorConfig::SingleVariantContrasts {
                treatments,
                outcomes,
            }
            | GeneratorConfig::PairwiseInteractions {
                treatments,
                outcomes,
            } => (treatments, outcomes),
        };
        let outcomes = outcomes_at(&at, outcomes, errors);
        let mut levels = Vec::new();
        for (j, t) in treatments.iter().enumerate() {
            match ds.treatment(t) {
                Ok(col) => levels.push(col.levels.clone()),
                Err(_) => errors.push(format!("{at}.treatments[{j}]: unknown treatment `{t}`")),
            }
        }
        if levels.len() != treatments.len() {
            continue;
        }
        for outcome in &outcomes {
            match g {
                GeneratorConfig::SingleVariantContrasts { .. } => {
                    for (t, lv) in treatments.iter().zip(&levels) {
                        for a in 0..lv.len() {
                            for b in a + 1..lv.len() {
                                let e = Estimand::ate(t, &lv[a], &lv[b], outcome);
                                out.push(NamedEstimand {
                                    name: e.describe(),
                                    estimand: e,
                                });
                            }
                        }
                    }
                }
                GeneratorConfig::PairwiseInteractions { .. } => {
                    for x in 0..treatments.len() {
                        for y in x + 1..treatments.len() {
                            for lx in 1..levels[x].len() {
                                for ly in 1..levels[y].len() {
                                    let e = Estimand::aie(
                                        &[&treatments[x], &treatments[y]],
                                        &[&levels[x][0], &levels[y][0]],
                                        &[&levels[x][lx], &levels[y][ly]],
                                        outcome,
                                    );
                                    out.push(NamedEstimand {
                                        name: e.describe(),
                                        estimand: e,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let mut seen = BTreeMap::new();
    out.retain(|e| {
        let dup = seen.insert(e.name.clone(), ()).is_some();
        if dup {
            errors.push(format!("estimands: duplicate name `{}`", e.name));
        }
        !dup
    });
    out
}

fn check_references(inf: &InferenceConfig, estimands: &[NamedEstimand], errors: &mut Vec<String>) {
    let names: HashSet<&str> = estimands.iter().map(|e| e.name.as_str()).collect();
    let mut own = HashSet::new();
    let mut check_of = |at: &str, name: &str, of: &[String], errors: &mut Vec<String>| {
        if !own.insert(name.to_string()) || names.contains(name) {
            errors.push(format!("{at}.name: `{name}` is already used"));
        }
        if of.is_empty() {
            errors.push(format!("{at}.of: empty"));
        }
        for (j, e) in of.iter().enumerate() {
            if !names.contains(e.as_str()) {
                errors.push(format!("{at}.of[{j}]: unknown estimand `{e}`"));
            }
        }
    };
    for (i, c) in inf.composites.iter().enumerate() {
        let at = format!("inference.composites[{i}]");
        check_of(&at, &c.name, &c.of, errors);
        match &c.transform {
            TransformSpec::Named(n) if n == "difference" => {
                if c.of.len() != 2 {
                    errors.push(format!("{at}.of: `difference` takes exactly two estimands"));
                }
            }
            TransformSpec::Named(n) => {
                errors.push(format!("{at}.transform: unknown transform `{n}`"));
            }
            TransformSpec::Matrix(rows) => {
                if rows.is_empty() {
                    errors.push(format!("{at}.transform: empty matrix"));
                }
                for (r, row) in rows.iter().enumerate() {
                    if row.len() != c.of.len() {
                        errors.push(format!(
                            "{at}.transform[{r}]: expected {} entries, got {}",
                            c.of.len(),
                            row.len()
                        ));
                    }
                    if row.iter().any(|v| !v.is_finite()) {
                        errors.push(format!("{at}.transform[{r}]: non-finite entry"));
                    }
                }
            }
        }
    }
    for (i, t) in inf.joint_tests.iter().enumerate() {
        let at = format!("inference.joint_tests[{i}]");
        check_of(&at, &t.name, &t.of, errors);
        if let Some(null) = &t.null {
            if null.len() != t.of.len() {
                errors.push(format!(
                    "{at}.null: expected {} entries, got {}",
                    t.of.len(),
                    null.len()
                ));
            }
        }
    }
}

/// Configuration of a replicate grid for `evaluate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    pub source: SourceConfig,
    pub sizes: Vec<usize>,
    pub replicates: usize,
    #[serde(default)]
    pub estimands: Vec<EstimandConfig>,
    #[serde(default)]
    pub generators: Vec<GeneratorConfig>,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<String>,
    #[serde(default = "default_thresholds")]
    pub thresholds: Vec<f64>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_truth_draws")]
    pub truth_draws: usize,
    #[serde(default)]
    pub learners: LearnersConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_evaluate_output")]
    pub output: PathBuf,
}

fn default_thresholds() -> Vec<f64> {
    vec![0.0, DEFAULT_THRESHOLD]
}

fn default_truth_draws() -> usize {
    100_000
}

fn default_evaluate_output() -> PathBuf {
    PathBuf::from("evaluation")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceConfig {
    /// Null sampler over an observed table.
    Null { data: DataConfig },
    /// Generative spec file.
    Spec { path: PathBuf },
}

/// Loaded grid source.
#[derive(Debug, Clone)]
pub enum LoadedSource {
    Null(Dataset),
    Spec(Simulator),
}

#[derive(Debug, Clone)]
pub struct NormalizedEvaluate {
    pub config: EvaluateConfig,
    pub config_hash: String,
    pub source: LoadedSource,
    pub estimands: Vec<NamedEstimand>,
    pub estimators: Vec<Estimator>,
}

impl NormalizedEvaluate {
    pub fn grid(&self) -> ReplicateGrid {
        ReplicateGrid {
            sizes: self.config.sizes.clone(),
            estimators: self.estimators.clone(),
            estimands: self.estimands.iter().map(|e| e.estimand.clone()).collect(),
            replicates: self.config.replicates,
            thresholds: self.config.thresholds.clone(),
            alpha: self.config.alpha,
            seed: self.config.seed,
            nuisance: self.config.learners.settings(self.config.seed),
            truth_draws: self.config.truth_draws,
        }
    }
}

fn parse_estimators(names: &[String], errors: &mut Vec<String>) -> Vec<Estimator> {
    let mut out = Vec::new();
    for (i, name) in names.iter().enumerate() {
        match Estimator::parse(name) {
            Some(e) if out.contains(&e) => {
                errors.push(format!("estimators[{i}]: `{name}` listed twice"))
            }
            Some(e) => out.push(e),
            None => errors.push(format!(
                "estimators[{i}]: unknown estimator `{name}` (expected one of {})",
                Estimator::ALL.map(Estimator::name).join(", ")
            )),
        }
    }
    if names.is_empty() {
        errors.push("estimators: empty".into());
    }
    out
}

pub fn validate_evaluate(path: &Path, overrides: &Overrides) -> Result<NormalizedEvaluate> {
    let (mut config, config_hash): (EvaluateConfig, String) = parse_toml(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    if let Some(s) = overrides.seed {
        config.seed = s;
    }
    if let Some(o) = &overrides.output {
        config.output = o.clone();
    }
    config.output = resolve(base, &config.output);
    let mut errors = Vec::new();
    let source = match &mut config.source {
        SourceConfig::Null { data } => {
            data.path = resolve(base, &data.path);
            data.load(&mut errors).map(LoadedSource::Null)
        }
        SourceConfig::Spec { path: p } => {
            *p = resolve(base, p);
            match GenerativeSpec::from_toml_file(p).and_then(Simulator::new) {
                Ok(sim) => Some(LoadedSource::Spec(sim)),
                Err(Error::Config(list)) => {
                    errors.extend(list.into_iter().map(|e| format!("source.path: {e}")));
                    None
                }
                Err(e) => {
                    errors.push(format!("source.path: {e}"));
                    None
                }
            }
        }
    };
    let estimators = parse_estimators(&config.estimators, &mut errors);
    config.learners.check(&mut errors);
    if config.sizes.is_empty() || config.sizes.contains(&0) {
        errors.push("sizes: need at least one positive sample size".into());
    }
    if config.replicates < 2 {
        errors.push("replicates: need at least 2".into());
    }
    for (i, t) in config.thresholds.iter().enumerate() {
        if !(0.0..1.0).contains(t) {
            errors.push(format!("thresholds[{i}]: must lie in [0, 1), got {t}"));
        }
    }
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        errors.push(format!("alpha: must lie in (0, 1), got {}", config.alpha));
    }
    let estimands = match &source {
        Some(LoadedSource::Null(ds)) => {
            expand_estimands(&config.estimands, &config.generators, ds, &mut errors)
        }
        Some(LoadedSource::Spec(sim)) => {
            if config.truth_draws < MIN_TRUTH_DRAWS {
                errors.push(format!("truth_draws: need at least {MIN_TRUTH_DRAWS}"));
            }
            let schema = sim.sample(0, &mut crate::simulation::task_rng(0, 0, 0))?;
            expand_estimands(&config.estimands, &config.generators, &schema, &mut errors)
        }
        None => Vec::new(),
    };
    if estimands.is_empty() && source.is_some() && errors.is_empty() {
        errors.push("estimands: nothing to evaluate".into());
    }
    match source {
        Some(source) if errors.is_empty() => Ok(NormalizedEvaluate {
            config,
            config_hash,
            source,
            estimands,
            estimators,
        }),
        _ => Err(Error::Config(errors)),
    }
}
