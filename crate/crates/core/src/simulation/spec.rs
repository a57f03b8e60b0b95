//! Parametric generative specifications with known conditionals.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{
    ColumnRoles, Dataset, ExtraColumn, NumericColumn, OutcomeColumn, OutcomeKind, TreatmentColumn,
};
use crate::error::{Error, Result};
use crate::learners::glm::expit;
use crate::learners::{OutcomeModel, PropensityModel};
use crate::linalg::RowMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerativeSpec {
    pub covariates: CovariateSource,
    pub treatments: Vec<TreatmentSpec>,
    pub outcome: OutcomeSpec,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CovariateSource {
    /// Independent standard normals: `w_dim` confounders `PC1..`, `c_dim`
    /// outcome-only covariates `C1..`.
    Normal {
        w_dim: usize,
        #[serde(default)]
        c_dim: usize,
    },
    /// Rows of a CSV table resampled with replacement.
    Empirical {
        path: PathBuf,
        w_columns: Vec<String>,
        #[serde(default)]
        c_columns: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreatmentSpec {
    pub name: String,
    pub levels: Vec<String>,
    /// One row per non-reference level: `[intercept, w_1, .., w_d]`.
    pub logit_coefficients: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeSpec {
    #[serde(default = "default_outcome_name")]
    pub name: String,
    pub formula_terms: Vec<FormulaTerm>,
    pub noise: Noise,
}

fn default_outcome_name() -> String {
    "Y".into()
}

/// `coef × Π factors`; no factors means an intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormulaTerm {
    pub coef: f64,
    #[serde(default)]
    pub factors: Vec<Factor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factor {
    /// Zero-based confounder index.
    W(usize),
    /// Zero-based outcome-only covariate index.
    C(usize),
    /// Indicator of a treatment level.
    Level { treatment: String, level: String },
    /// Level index of a treatment as a number.
    Dosage(String),
    /// `max(0, W[w] - knot)`.
    Hinge { w: usize, knot: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum Noise {
    Gaussian {
        sd: f64,
    },
    /// `Y ~ Bernoulli(expit(η))`.
    Bernoulli,
}

impl GenerativeSpec {
    /// Reads a TOML spec; relative covariate paths resolve against the
    /// spec file's directory.
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec: GenerativeSpec = toml::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if let CovariateSource::Empirical { path: p, .. } = &mut spec.covariates {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone)]
enum Covariates {
    Normal { w_dim: usize, c_dim: usize },
    Table { w: RowMatrix, c: RowMatrix },
}

#[derive(Debug, Clone)]
enum CompiledFactor {
    W(usize),
    C(usize),
    Level(usize, u32),
    Dosage(usize),
    Hinge(usize, f64),
}

#[derive(Debug, Clone)]
struct CompiledTreatment {
    name: String,
    levels: Vec<String>,
    coefficients: Vec<Vec<f64>>,
}

/// Validated spec ready for sampling and truth evaluation.
#[derive(Debug, Clone)]
pub struct Simulator {
    spec: GenerativeSpec,
    covariates: Covariates,
    treatments: Vec<CompiledTreatment>,
    terms: Vec<(f64, Vec<CompiledFactor>)>,
}

impl Simulator {
    pub fn new(spec: GenerativeSpec) -> Result<Self> {
        let mut errors = Vec::new();
        let covariates = match &spec.covariates {
            CovariateSource::Normal { w_dim, c_dim } => Covariates::Normal {
                w_dim: *w_dim,
                c_dim: *c_dim,
            },
            CovariateSource::Empirical {
                path,
                w_columns,
                c_columns,
            } => load_table(path, w_columns, c_columns)?,
        };
        let (w_dim, c_dim) = match &covariates {
            Covariates::Normal { w_dim, c_dim } => (*w_dim, *c_dim),
            Covariates::Table { w, c } => (w.ncols(), c.ncols()),
        };
        let mut by_name = HashMap::new();
        for (j, t) in spec.treatments.iter().enumerate() {
            let at = format!("treatments[{j}]");
            if by_name.insert(t.name.clone(), j).is_some() {
                errors.push(format!("{at}.name: duplicate treatment `{}`", t.name));
            }
            if t.levels.len() < 2 {
                errors.push(format!("{at}.levels: need at least two levels"));
            }
            if t.logit_coefficients.len() + 1 != t.levels.len() {
                errors.push(format!(
                    "{at}.logit_coefficients: expected {} rows, got {}",
                    t.levels.len().saturating_sub(1),
                    t.logit_coefficients.len()
                ));
            }
            for (l, row) in t.logit_coefficients.iter().enumerate() {
                if row.len() != w_dim + 1 {
                    errors.push(format!(
                        "{at}.logit_coefficients[{l}]: expected {} values, got {}",
                        w_dim + 1,
                        row.len()
                    ));
                }
                if row.iter().any(|v| !v.is_finite()) {
                    errors.push(format!("{at}.logit_coefficients[{l}]: non-finite value"));
                }
            }
        }
        let mut terms = Vec::new();
        for (i, term) in spec.outcome.formula_terms.iter().enumerate() {
            let at = format!("outcome.formula_terms[{i}]");
            if !term.coef.is_finite() {
                errors.push(format!("{at}.coef: non-finite value"));
            }
            let mut factors = Vec::new();
            for (f, factor) in term.factors.iter().enumerate() {
                let at = format!("{at}.factors[{f}]");
                let treatment = |name: &str, errors: &mut Vec<String>| {
                    let j = by_name.get(name).copied();
                    if j.is_none() {
                        errors.push(format!("{at}: unknown treatment `{name}`"));
                    }
                    j
                };
                let compiled = match factor {
                    Factor::W(w) if *w < w_dim => Some(CompiledFactor::W(*w)),
                    Factor::C(c) if *c < c_dim => Some(CompiledFactor::C(*c)),
                    Factor::Hinge { w, knot } if *w < w_dim && knot.is_finite() => {
                        Some(CompiledFactor::Hinge(*w, *knot))
                    }
                    Factor::W(_) | Factor::C(_) | Factor::Hinge { .. } => {
                        errors.push(format!("{at}: covariate index out of range"));
                        None
                    }
                    Factor::Dosage(name) => {
                        treatment(name, &mut errors).map(CompiledFactor::Dosage)
                    }
                    Factor::Level {
                        treatment: name,
                        level,
                    } => treatment(name, &mut errors).and_then(|j| {
                        let l = spec.treatments[j].levels.iter().position(|x| x == level);
                        if l.is_none() {
                            errors.push(format!("{at}: unknown level `{level}` of `{name}`"));
                        }
                        l.map(|l| CompiledFactor::Level(j, l as u32))
                    }),
                };
                factors.extend(compiled);
            }
            terms.push((term.coef, factors));
        }
        if let Noise::Gaussian { sd } = spec.outcome.noise {
            if !(sd.is_finite() && sd >= 0.0) {
                errors.push("outcome.noise.sd: must be finite and >= 0".into());
            }
        }
        let outcome = &spec.outcome.name;
        if by_name.contains_key(outcome) {
            errors.push(format!(
                "outcome.name: `{outcome}` collides with a treatment"
            ));
        }
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        let treatments = spec
            .treatments
            .iter()
            .map(|t| CompiledTreatment {
                name: t.name.clone(),
                levels: t.levels.clone(),
                coefficients: t.logit_coefficients.clone(),
            })
            .collect();
        Ok(Simulator {
            spec,
            covariates,
            treatments,
            terms,
        })
    }

    pub fn spec(&self) -> &GenerativeSpec {
        &self.spec
    }

    pub fn w_dim(&self) -> usize {
        match &self.covariates {
            Covariates::Normal { w_dim, .. } => *w_dim,
            Covariates::Table { w, .. } => w.ncols(),
        }
    }

    pub fn c_dim(&self) -> usize {
        match &self.covariates {
            Covariates::Normal { c_dim, .. } => *c_dim,
            Covariates::Table { c, .. } => c.ncols(),
        }
    }

    pub fn outcome_kind(&self) -> OutcomeKind {
        match self.spec.outcome.noise {
            Noise::Gaussian { .. } => OutcomeKind::Continuous,
            Noise::Bernoulli => OutcomeKind::Binary,
        }
    }

    pub fn treatment_index(&self, name: &str) -> Result<usize> {
        self.treatments
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| Error::UnknownColumn(name.into()))
    }

    pub fn level_index(&self, treatment: usize, level: &str) -> Result<u32> {
        let t = &self.treatments[treatment];
        t.levels
            .iter()
            .position(|l| l == level)
            .map(|l| l as u32)
            .ok_or_else(|| Error::UnknownLevel {
                treatment: t.name.clone(),
                level: level.into(),
            })
    }

    pub fn n_levels(&self, treatment: usize) -> usize {
        self.treatments[treatment].levels.len()
    }

    /// Draws one `(W, C)` covariate row into the given buffers.
    pub fn draw_covariates<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        w: &mut Vec<f64>,
        c: &mut Vec<f64>,
    ) {
        w.clear();
        c.clear();
        match &self.covariates {
            Covariates::Normal { w_dim, c_dim } => {
                w.extend((0..*w_dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
                c.extend((0..*c_dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
            }
            Covariates::Table { w: tw, c: tc } => {
                let i = rng.random_range(0..tw.nrows());
                w.extend_from_slice(tw.row(i));
                c.extend_from_slice(tc.row(i));
            }
        }
    }

    /// `P(V_j = l | W)` for every level `l`.
    pub fn treatment_probs(&self, treatment: usize, w: &[f64]) -> Vec<f64> {
        let t = &self.treatments[treatment];
        let mut eta = Vec::with_capacity(t.levels.len());
        eta.push(0.0);
        for row in &t.coefficients {
            eta.push(row[0] + row[1..].iter().zip(w).map(|(b, x)| b * x).sum::<f64>());
        }
        let m = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<f64> = eta.iter().map(|e| (e - m).exp()).collect();
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
        p
    }

    /// Linear predictor of the outcome at a full joint level.
    pub fn linear_predictor(&self, w: &[f64], c: &[f64], levels: &[u32]) -> f64 {
        self.terms
            .iter()
            .map(|(coef, factors)| {
                coef * factors
                    .iter()
                    .map(|f| match *f {
                        CompiledFactor::W(i) => w[i],
                        CompiledFactor::C(i) => c[i],
                        CompiledFactor::Level(j, l) => f64::from(u8::from(levels[j] == l)),
                        CompiledFactor::Dosage(j) => f64::from(levels[j]),
                        CompiledFactor::Hinge(i, knot) => (w[i] - knot).max(0.0),
                    })
                    .product::<f64>()
            })
            .sum()
    }

    /// `E[Y | V = levels, W, C]` at a full joint level.
    pub fn mean_outcome(&self, w: &[f64], c: &[f64], levels: &[u32]) -> f64 {
        let eta = self.linear_predictor(w, c, levels);
        match self.spec.outcome.noise {
            Noise::Gaussian { .. } => eta,
            Noise::Bernoulli => expit(eta),
        }
    }

    /// `E[Y | V_S = levels, W, C]`, marginalizing treatments outside `subset`
    /// over their conditionals given `W`.
    pub fn mean_outcome_subset(
        &self,
        w: &[f64],
        c: &[f64],
        subset: &[usize],
        levels: &[u32],
    ) -> f64 {
        let mut full = vec![0u32; self.treatments.len()];
        for (&j, &l) in subset.iter().zip(levels) {
            full[j] = l;
        }
        let free: Vec<usize> = (0..self.treatments.len())
            .filter(|j| !subset.contains(j))
            .collect();
        if free.is_empty() {
            return self.mean_outcome(w, c, &full);
        }
        let probs: Vec<Vec<f64>> = free.iter().map(|&j| self.treatment_probs(j, w)).collect();
        let mut total = 0.0;
        let mut counter = vec![0usize; free.len()];
        loop {
            let mut weight = 1.0;
            for (k, &j) in free.iter().enumerate() {
                full[j] = counter[k] as u32;
                weight *= probs[k][counter[k]];
            }
            total += weight * self.mean_outcome(w, c, &full);
            let mut k = 0;
            loop {
                if k == free.len() {
                    return total;
                }
                counter[k] += 1;
                if counter[k] < probs[k].len() {
                    break;
                }
                counter[k] = 0;
                k += 1;
            }
        }
    }

    /// `n` rows by ancestral sampling: covariates, then each treatment, then
    /// the outcome. Columns are `PC1..`, `C1..`, the treatments and the
    /// outcome.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Dataset> {
        let (pw, pc, m) = (self.w_dim(), self.c_dim(), self.treatments.len());
        let mut w_cols = vec![Vec::with_capacity(n); pw];
        let mut c_cols = vec![Vec::with_capacity(n); pc];
        let mut codes = vec![Vec::with_capacity(n); m];
        let mut y = Vec::with_capacity(n);
        let (mut w, mut c) = (Vec::new(), Vec::new());
        let mut levels = vec![0u32; m];
        for _ in 0..n {
            self.draw_covariates(rng, &mut w, &mut c);
            for j in 0..m {
                let p = self.treatment_probs(j, &w);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut level = p.len() - 1;
                for (l, pl) in p.iter().enumerate() {
                    acc += pl;
                    if u < acc {
                        level = l;
                        break;
                    }
                }
                levels[j] = level as u32;
                codes[j].push(Some(level as u32));
            }
            let eta = self.linear_predictor(&w, &c, &levels);
            let value = match self.spec.outcome.noise {
                Noise::Gaussian { sd } => eta + sd * rng.sample::<f64, _>(StandardNormal),
                Noise::Bernoulli => f64::from(u8::from(rng.random::<f64>() < expit(eta))),
            };
            if !value.is_finite() {
                return Err(Error::NonFinite("simulated outcome".into()));
            }
            y.push(value);
            for (col, v) in w_cols.iter_mut().zip(&w) {
                col.push(*v);
            }
            for (col, v) in c_cols.iter_mut().zip(&c) {
                col.push(*v);
            }
        }
        Dataset::new(
            vec![OutcomeColumn {
                name: self.spec.outcome.name.clone(),
                kind: self.outcome_kind(),
                values: y,
            }],
            self.treatments
                .iter()
                .zip(codes)
                .map(|(t, codes)| TreatmentColumn {
                    name: t.name.clone(),
                    levels: t.levels.clone(),
                    codes,
                })
                .collect(),
            w_cols
                .into_iter()
                .enumerate()
                .map(|(i, values)| NumericColumn {
                    name: format!("PC{}", i + 1),
                    values,
                })
                .collect(),
            c_cols
                .into_iter()
                .enumerate()
                .map(|(i, values)| {
                    ExtraColumn::Numeric(NumericColumn {
                        name: format!("C{}", i + 1),
                        values,
                    })
                })
                .collect(),
        )
    }

    /// True outcome regression for a frame over the named treatments.
    pub fn outcome_model(&self, treatments: &[String]) -> Result<TrueOutcome<'_>> {
        Ok(TrueOutcome {
            sim: self,
            subset: self.subset(treatments)?,
        })
    }

    /// True joint propensity for a frame over the named treatments.
    pub fn propensity_model(&self, treatments: &[String]) -> Result<TruePropensity<'_>> {
        Ok(TruePropensity {
            sim: self,
            subset: self.subset(treatments)?,
        })
    }

    fn subset(&self, treatments: &[String]) -> Result<Vec<usize>> {
        treatments.iter().map(|t| self.treatment_index(t)).collect()
    }
}

fn load_table(path: &Path, w_columns: &[String], c_columns: &[String]) -> Result<Covariates> {
    let roles = ColumnRoles {
        covariates: w_columns.to_vec(),
        extra: c_columns.iter().map(|c| (c.clone(), false)).collect(),
        ..ColumnRoles::default()
    };
    let ds = Dataset::from_csv(path, &roles)?;
    let frame = crate::data::Frame::build(&ds, None, &[])?;
    let rows = frame.rows.clone();
    let mut c = Vec::with_capacity(rows.len() * c_columns.len());
    for &i in &rows {
        for e in ds.extra_covariates() {
            match e {
                ExtraColumn::Numeric(col) => c.push(col.values[i]),
                ExtraColumn::Categorical { .. } => unreachable!("declared numeric"),
            }
        }
    }
    let c = RowMatrix::from_vec(rows.len(), c_columns.len(), c)?;
    let keep: Vec<usize> = (0..rows.len())
        .filter(|&r| c.row(r).iter().all(|v| !v.is_nan()))
        .collect();
    if keep.is_empty() {
        return Err(Error::Empty(format!("covariate table {}", path.display())));
    }
    Ok(Covariates::Table {
        w: frame.w.select_rows(&keep),
        c: c.select_rows(&keep),
    })
}

pub struct TrueOutcome<'a> {
    sim: &'a Simulator,
    subset: Vec<usize>,
}

impl OutcomeModel for TrueOutcome<'_> {
    fn predict(&self, w: &[f64], c: &[f64], levels: &[u32]) -> f64 {
        self.sim.mean_outcome_subset(w, c, &self.subset, levels)
    }
}

pub struct TruePropensity<'a> {
    sim: &'a Simulator,
    subset: Vec<usize>,
}

impl PropensityModel for TruePropensity<'_> {
    fn prob(&self, w: &[f64], levels: &[u32]) -> Result<f64> {
        let mut p = 1.0;
        for (&j, &l) in self.subset.iter().zip(levels) {
            let probs = self.sim.treatment_probs(j, w);
            p *= *probs.get(l as usize).ok_or_else(|| Error::UnknownLevel {
                treatment: self.sim.treatments[j].name.clone(),
                level: l.to_string(),
            })?;
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_spec() -> GenerativeSpec {
        toml::from_str(
            r#"
            seed = 3
            [covariates]
            kind = "normal"
            w_dim = 2
            c_dim = 1
            [[treatments]]
            name = "A"
            levels = ["0", "1", "2"]
            logit_coefficients = [[-0.5, 0.3, 0.0], [-1.0, 0.0, 0.2]]
            [[treatments]]
            name = "B"
            levels = ["0", "1"]
            logit_coefficients = [[0.2, -0.4, 0.1]]
            [outcome]
            noise = { family = "gaussian", sd = 1.0 }
            formula_terms = [
                { coef = 1.0 },
                { coef = 0.5, factors = [{ dosage = "A" }] },
                { coef = 0.3, factors = [{ level = { treatment = "A", level = "2" } }, { dosage = "B" }] },
                { coef = 0.7, factors = [{ hinge = { w = 0, knot = 0.5 } }] },
                { coef = -0.2, factors = [{ c = 0 }] },
            ]
            "#,
        )
        .unwrap()
    }

    #[test]
    fn parses_and_evaluates() {
        let sim = Simulator::new(toy_spec()).unwrap();
        assert_eq!((sim.w_dim(), sim.c_dim()), (2, 1));
        let w = [1.5, 0.0];
        let c = [1.0];
        let eta = sim.linear_predictor(&w, &c, &[2, 1]);
        assert!((eta - (1.0 + 1.0 + 0.3 + 0.7 - 0.2)).abs() < 1e-15);
        let p = sim.treatment_probs(0, &w);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let e = [0.0f64, -0.5 + 0.45, -1.0];
        let z: f64 = e.iter().map(|v| v.exp()).sum();
        assert!((p[1] - e[1].exp() / z).abs() < 1e-15);
    }

    #[test]
    fn marginal_mean_averages_over_free_treatments() {
        let sim = Simulator::new(toy_spec()).unwrap();
        let w = [0.2, -1.0];
        let c = [0.3];
        let pb = sim.treatment_probs(1, &w);
        let want =
            pb[0] * sim.mean_outcome(&w, &c, &[2, 0]) + pb[1] * sim.mean_outcome(&w, &c, &[2, 1]);
        let got = sim.mean_outcome_subset(&w, &c, &[0], &[2]);
        assert!((got - want).abs() < 1e-14);
        let g = sim.propensity_model(&["A".into(), "B".into()]).unwrap();
        let joint = g.prob(&w, &[1, 1]).unwrap();
        assert!((joint - sim.treatment_probs(0, &w)[1] * pb[1]).abs() < 1e-15);
    }

    #[test]
    fn config_errors_have_paths() {
        let mut spec = toy_spec();
        spec.treatments[0].logit_coefficients.pop();
        spec.outcome.formula_terms[1].factors = vec![Factor::Dosage("Z".into())];
        match Simulator::new(spec) {
            Err(Error::Config(errs)) => {
                assert!(errs
                    .iter()
                    .any(|e| e.starts_with("treatments[0].logit_coefficients")));
                assert!(errs.iter().any(|e| e.contains("unknown treatment `Z`")));
            }
            other => panic!("{other:?}"),
        }
        let bad = "[covariates]\nkind = \"normal\"\nw_dim = 1\nbogus = 1\n";
        assert!(toml::from_str::<GenerativeSpec>(bad).is_err());
    }

    #[test]
    fn sampling_is_seeded() {
        use rand::SeedableRng;
        let sim = Simulator::new(toy_spec()).unwrap();
        let a = sim
            .sample(200, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        let b = sim
            .sample(200, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.covariates()[1].name, "PC2");
        assert_eq!(a.extra_covariates()[0].name(), "C1");
    }
}
