//! Column-oriented datasets and the complete-case frames estimation runs on.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::RowMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeColumn {
    pub name: String,
    pub kind: OutcomeKind,
    /// `NaN` marks a missing value.
    pub values: Vec<f64>,
}

/// A categorical treatment with an explicitly ordered level set.
#[derive(Debug, Clone, PartialEq)]
pub struct TreatmentColumn {
    pub name: String,
    pub levels: Vec<String>,
    /// Index into `levels`; `None` marks a missing value.
    pub codes: Vec<Option<u32>>,
}

impl TreatmentColumn {
    pub fn level_index(&self, level: &str) -> Result<u32> {
        self.levels
            .iter()
            .position(|l| l == level)
            .map(|i| i as u32)
            .ok_or_else(|| Error::UnknownLevel {
                treatment: self.name.clone(),
                level: level.to_string(),
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NumericColumn {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExtraColumn {
    Numeric(NumericColumn),
    Categorical {
        name: String,
        levels: Vec<String>,
        codes: Vec<Option<u32>>,
    },
}

impl ExtraColumn {
    pub fn name(&self) -> &str {
        match self {
            ExtraColumn::Numeric(c) => &c.name,
            ExtraColumn::Categorical { name, .. } => name,
        }
    }

    /// Width after one-hot encoding (reference level dropped).
    fn width(&self) -> usize {
        match self {
            ExtraColumn::Numeric(_) => 1,
            ExtraColumn::Categorical { levels, .. } => levels.len().saturating_sub(1),
        }
    }

    fn is_missing(&self, row: usize) -> bool {
        match self {
            ExtraColumn::Numeric(c) => c.values[row].is_nan(),
            ExtraColumn::Categorical { codes, .. } => codes[row].is_none(),
        }
    }

    fn encode(&self, row: usize, out: &mut Vec<f64>) {
        match self {
            ExtraColumn::Numeric(c) => out.push(c.values[row]),
            ExtraColumn::Categorical { levels, codes, .. } => {
                let code = codes[row].unwrap_or(0) as usize;
                for l in 1..levels.len() {
                    out.push(if code == l { 1.0 } else { 0.0 });
                }
            }
        }
    }
}

/// Immutable column table: outcomes, categorical treatments, confounders W
/// and outcome-only covariates C.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n_rows: usize,
    outcomes: Vec<OutcomeColumn>,
    treatments: Vec<TreatmentColumn>,
    covariates: Vec<NumericColumn>,
    extra: Vec<ExtraColumn>,
}

impl Dataset {
    pub fn new(
        outcomes: Vec<OutcomeColumn>,
        treatments: Vec<TreatmentColumn>,
        covariates: Vec<NumericColumn>,
        extra: Vec<ExtraColumn>,
    ) -> Result<Self> {
        let n_rows = outcomes
            .first()
            .map(|c| c.values.len())
            .or_else(|| treatments.first().map(|c| c.codes.len()))
            .or_else(|| covariates.first().map(|c| c.values.len()))
            .unwrap_or(0);
        let mut names = BTreeSet::new();
        let mut check = |name: &str, len: usize| -> Result<()> {
            if !names.insert(name.to_string()) {
                return Err(Error::invalid(format!("duplicate column `{name}`")));
            }
            if len != n_rows {
                return Err(Error::LengthMismatch {
                    what: format!("column `{name}`"),
                    left: len,
                    right: n_rows,
                });
            }
            Ok(())
        };
        for o in &outcomes {
            check(&o.name, o.values.len())?;
            for &v in &o.values {
                if v.is_nan() {
                    continue;
                }
                match o.kind {
                    OutcomeKind::Binary if v != 0.0 && v != 1.0 => {
                        return Err(Error::invalid(format!(
                            "binary outcome `{}` has value {v}",
                            o.name
                        )))
                    }
                    OutcomeKind::Continuous if !v.is_finite() => {
                        return Err(Error::NonFinite(format!("outcome `{}`", o.name)))
                    }
                    _ => {}
                }
            }
        }
        for t in &treatments {
            check(&t.name, t.codes.len())?;
            let n_levels = t.levels.len() as u32;
            if t.codes.iter().flatten().any(|&c| c >= n_levels) {
                return Err(Error::invalid(format!(
                    "treatment `{}` has a code outside its level set",
                    t.name
                )));
            }
        }
        for c in &covariates {
            check(&c.name, c.values.len())?;
            if c.values.iter().any(|v| v.is_infinite()) {
                return Err(Error::NonFinite(format!("covariate `{}`", c.name)));
            }
        }
        for e in &extra {
            match e {
                ExtraColumn::Numeric(c) => {
                    check(&c.name, c.values.len())?;
                    if c.values.iter().any(|v| v.is_infinite()) {
                        return Err(Error::NonFinite(format!("covariate `{}`", c.name)));
                    }
                }
                ExtraColumn::Categorical {
                    name,
                    levels,
                    codes,
                } => {
                    check(name, codes.len())?;
                    let n_levels = levels.len() as u32;
                    if codes.iter().flatten().any(|&c| c >= n_levels) {
                        return Err(Error::invalid(format!(
                            "covariate `{name}` has a code outside its level set"
                        )));
                    }
                }
            }
        }
        Ok(Dataset {
            n_rows,
            outcomes,
            treatments,
            covariates,
            extra,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn outcomes(&self) -> &[OutcomeColumn] {
        &self.outcomes
    }

    pub fn treatments(&self) -> &[TreatmentColumn] {
        &self.treatments
    }

    pub fn covariates(&self) -> &[NumericColumn] {
        &self.covariates
    }

    pub fn extra_covariates(&self) -> &[ExtraColumn] {
        &self.extra
    }

    pub fn outcome(&self, name: &str) -> Result<&OutcomeColumn> {
        self.outcomes
            .iter()
            .find(|o| o.name == name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    pub fn treatment(&self, name: &str) -> Result<&TreatmentColumn> {
        self.treatments
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

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
                .map(|t| (t.name.clone(), Some(t.levels.clone())))
                .collect(),
            covariates: self.covariates.iter().map(|c| c.name.clone()).collect(),
            extra: self
                .extra
                .iter()
                .map(|e| {
                    (
                        e.name().to_string(),
                        matches!(e, ExtraColumn::Categorical { .. }),
                    )
                })
                .collect(),
        }
    }

    /// Loads a CSV with a header row. Column roles come from the caller;
    /// columns not named in `roles` are ignored. Empty cells, `NA` and `NaN`
    /// are missing.
    pub fn from_csv(path: &Path, roles: &ColumnRoles) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| match e.kind() {
                csv::ErrorKind::Io(_) => Error::io(
                    path,
                    std::io::Error::new(std::io::ErrorKind::NotFound, e.to_string()),
                ),
                _ => Error::Csv(e),
            })?;
        let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        let index: HashMap<&str, usize> = header
            .iter()
            .enumerate()
            .map(|(i, h)| (h.as_str(), i))
            .collect();
        let col = |name: &str| -> Result<usize> {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::UnknownColumn(name.to_string()))
        };
        let mut raw: Vec<Vec<String>> = vec![Vec::new(); header.len()];
        for record in reader.records() {
            let record = record?;
            for (j, field) in record.iter().enumerate().take(header.len()) {
                raw[j].push(field.trim().to_string());
            }
        }

        let parse_num = |name: &str, j: usize| -> Result<Vec<f64>> {
            raw[j]
                .iter()
                .map(|s| {
                    if is_missing(s) {
                        Ok(f64::NAN)
                    } else {
                        s.parse::<f64>().map_err(|_| {
                            Error::invalid(format!("column `{name}`: cannot parse `{s}` as number"))
                        })
                    }
                })
                .collect()
        };
        let parse_cat = |name: &str,
                         j: usize,
                         declared: Option<&Vec<String>>|
         -> Result<(Vec<String>, Vec<Option<u32>>)> {
            let levels: Vec<String> = match declared {
                Some(l) => l.clone(),
                None => raw[j]
                    .iter()
                    .filter(|s| !is_missing(s))
                    .cloned()
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect(),
            };
            let lookup: HashMap<&str, u32> = levels
                .iter()
                .enumerate()
                .map(|(i, l)| (l.as_str(), i as u32))
                .collect();
            let codes = raw[j]
                .iter()
                .map(|s| {
                    if is_missing(s) {
                        Ok(None)
                    } else {
                        lookup.get(s.as_str()).copied().map(Some).ok_or_else(|| {
                            Error::UnknownLevel {
                                treatment: name.to_string(),
                                level: s.clone(),
                            }
                        })
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((levels, codes))
        };

        let mut outcomes = Vec::new();
        for (name, kind) in &roles.outcomes {
            outcomes.push(OutcomeColumn {
                name: name.clone(),
                kind: *kind,
                values: parse_num(name, col(name)?)?,
            });
        }
        let mut treatments = Vec::new();
        for (name, levels) in &roles.treatments {
            let (levels, codes) = parse_cat(name, col(name)?, levels.as_ref())?;
            treatments.push(TreatmentColumn {
                name: name.clone(),
                levels,
                codes,
            });
        }
        let mut covariates = Vec::new();
        for name in &roles.covariates {
            covariates.push(NumericColumn {
                name: name.clone(),
                values: parse_num(name, col(name)?)?,
            });
        }
        let mut extra = Vec::new();
        for (name, categorical) in &roles.extra {
            let j = col(name)?;
            if *categorical {
                let (levels, codes) = parse_cat(name, j, None)?;
                extra.push(ExtraColumn::Categorical {
                    name: name.clone(),
                    levels,
                    codes,
                });
            } else {
                extra.push(ExtraColumn::Numeric(NumericColumn {
                    name: name.clone(),
                    values: parse_num(name, j)?,
                }));
            }
        }
        Dataset::new(outcomes, treatments, covariates, extra)
    }

    /// Writes the dataset as CSV; missing values become `NA`.
    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<&str> = Vec::new();
        header.extend(self.outcomes.iter().map(|o| o.name.as_str()));
        header.extend(self.treatments.iter().map(|t| t.name.as_str()));
        header.extend(self.covariates.iter().map(|c| c.name.as_str()));
        header.extend(self.extra.iter().map(ExtraColumn::name));
        w.write_record(&header)?;
        let num = |v: f64| {
            if v.is_nan() {
                "NA".to_string()
            } else {
                format!("{v}")
            }
        };
        let cat = |levels: &[String], c: Option<u32>| match c {
            Some(c) => levels[c as usize].clone(),
            None => "NA".to_string(),
        };
        for i in 0..self.n_rows {
            let mut rec: Vec<String> = Vec::with_capacity(header.len());
            rec.extend(self.outcomes.iter().map(|o| num(o.values[i])));
            rec.extend(self.treatments.iter().map(|t| cat(&t.levels, t.codes[i])));
            rec.extend(self.covariates.iter().map(|c| num(c.values[i])));
            rec.extend(self.extra.iter().map(|e| match e {
                ExtraColumn::Numeric(c) => num(c.values[i]),
                ExtraColumn::Categorical { levels, codes, .. } => cat(levels, codes[i]),
            }));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// SHA-256 over every column in declaration order; stable across runs.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n_rows as u64).to_le_bytes());
        for o in &self.outcomes {
            h.update(o.name.as_bytes());
            for v in &o.values {
                h.update(v.to_le_bytes());
            }
        }
        for t in &self.treatments {
            h.update(t.name.as_bytes());
            for l in &t.levels {
                h.update(l.as_bytes());
                h.update([0u8]);
            }
            for c in &t.codes {
                h.update(c.map_or(u32::MAX, |c| c).to_le_bytes());
            }
        }
        for c in &self.covariates {
            h.update(c.name.as_bytes());
            for v in &c.values {
                h.update(v.to_le_bytes());
            }
        }
        for e in &self.extra {
            h.update(e.name().as_bytes());
            match e {
                ExtraColumn::Numeric(c) => {
                    for v in &c.values {
                        h.update(v.to_le_bytes());
                    }
                }
                ExtraColumn::Categorical { codes, .. } => {
                    for c in codes {
                        h.update(c.map_or(u32::MAX, |c| c).to_le_bytes());
                    }
                }
            }
        }
        hex::encode(h.finalize())
    }

    /// Restricts to the given rows (used by the samplers).
    pub fn take_rows(&self, idx: &[usize]) -> Dataset {
        Dataset {
            n_rows: idx.len(),
            outcomes: self
                .outcomes
                .iter()
                .map(|o| OutcomeColumn {
                    name: o.name.clone(),
                    kind: o.kind,
                    values: idx.iter().map(|&i| o.values[i]).collect(),
                })
                .collect(),
            treatments: self
                .treatments
                .iter()
                .map(|t| TreatmentColumn {
                    name: t.name.clone(),
                    levels: t.levels.clone(),
                    codes: idx.iter().map(|&i| t.codes[i]).collect(),
                })
                .collect(),
            covariates: self
                .covariates
                .iter()
                .map(|c| NumericColumn {
                    name: c.name.clone(),
                    values: idx.iter().map(|&i| c.values[i]).collect(),
                })
                .collect(),
            extra: self
                .extra
                .iter()
                .map(|e| match e {
                    ExtraColumn::Numeric(c) => ExtraColumn::Numeric(NumericColumn {
                        name: c.name.clone(),
                        values: idx.iter().map(|&i| c.values[i]).collect(),
                    }),
                    ExtraColumn::Categorical {
                        name,
                        levels,
                        codes,
                    } => ExtraColumn::Categorical {
                        name: name.clone(),
                        levels: levels.clone(),
                        codes: idx.iter().map(|&i| codes[i]).collect(),
                    },
                })
                .collect(),
        }
    }
}

fn is_missing(s: &str) -> bool {
    s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan")
}

/// Role declaration for CSV columns.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ColumnRoles {
    pub outcomes: Vec<(String, OutcomeKind)>,
    /// Treatment name with an optional declared level order; when absent the
    /// observed levels are sorted lexicographically.
    pub treatments: Vec<(String, Option<Vec<String>>)>,
    pub covariates: Vec<String>,
    /// Extra covariate name and whether it is categorical.
    pub extra: Vec<(String, bool)>,
}

/// Treatment as seen by one frame: level codes restricted to the frame rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTreatment {
    pub name: String,
    pub levels: Vec<String>,
    pub codes: Vec<u32>,
}

/// Complete-case view of a dataset for one (outcome, treatment set).
///
/// `w` holds the confounders and `c` the encoded extra covariates. Rows are in
/// dataset order; `rows[i]` is the dataset index of frame row `i`.
#[derive(Debug, Clone)]
pub struct Frame {
    pub rows: Vec<usize>,
    pub outcome: Option<(String, OutcomeKind)>,
    pub y: Vec<f64>,
    pub treatments: Vec<FrameTreatment>,
    pub w: RowMatrix,
    pub c: RowMatrix,
    pub excluded: usize,
}

impl Frame {
    /// Builds the frame for `outcome` (optional, for propensity-only frames)
    /// and the named treatments. Rows with a missing value in any referenced
    /// column are dropped and counted in `excluded`.
    pub fn build(ds: &Dataset, outcome: Option<&str>, treatments: &[String]) -> Result<Frame> {
        let out = outcome.map(|o| ds.outcome(o)).transpose()?;
        let treat: Vec<&TreatmentColumn> = treatments
            .iter()
            .map(|t| ds.treatment(t))
            .collect::<Result<_>>()?;
        let complete = |i: usize| -> bool {
            out.is_none_or(|o| !o.values[i].is_nan())
                && treat.iter().all(|t| t.codes[i].is_some())
                && ds.covariates.iter().all(|c| !c.values[i].is_nan())
                && (out.is_none() || ds.extra.iter().all(|e| !e.is_missing(i)))
        };
        let rows: Vec<usize> = (0..ds.n_rows).filter(|&i| complete(i)).collect();
        let n = rows.len();
        let pw = ds.covariates.len();
        let mut w = RowMatrix::zeros(n, pw);
        for (r, &i) in rows.iter().enumerate() {
            for (j, c) in ds.covariates.iter().enumerate() {
                w.row_mut(r)[j] = c.values[i];
            }
        }
        let c = if out.is_some() {
            let pc: usize = ds.extra.iter().map(ExtraColumn::width).sum();
            let mut data = Vec::with_capacity(n * pc);
            for &i in &rows {
                for e in &ds.extra {
                    e.encode(i, &mut data);
                }
            }
            RowMatrix::from_vec(n, pc, data)?
        } else {
            RowMatrix::zeros(n, 0)
        };
        Ok(Frame {
            y: out.map_or_else(Vec::new, |o| rows.iter().map(|&i| o.values[i]).collect()),
            outcome: out.map(|o| (o.name.clone(), o.kind)),
            treatments: treat
                .iter()
                .map(|t| FrameTreatment {
                    name: t.name.clone(),
                    levels: t.levels.clone(),
                    codes: rows.iter().map(|&i| t.codes[i].unwrap()).collect(),
                })
                .collect(),
            w,
            c,
            excluded: ds.n_rows - n,
            rows,
        })
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn outcome_kind(&self) -> Option<OutcomeKind> {
        self.outcome.as_ref().map(|o| o.1)
    }

    /// Observed joint level of the frame's treatments at `row`.
    pub fn joint_level(&self, row: usize) -> Vec<u32> {
        self.treatments.iter().map(|t| t.codes[row]).collect()
    }

    pub fn treatment_names(&self) -> Vec<String> {
        self.treatments.iter().map(|t| t.name.clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        Dataset::new(
            vec![OutcomeColumn {
                name: "y".into(),
                kind: OutcomeKind::Binary,
                values: vec![0.0, 1.0, f64::NAN, 1.0],
            }],
            vec![TreatmentColumn {
                name: "A".into(),
                levels: vec!["TT".into(), "TC".into(), "CC".into()],
                codes: vec![Some(0), Some(1), Some(2), None],
            }],
            vec![NumericColumn {
                name: "pc1".into(),
                values: vec![0.1, 0.2, 0.3, 0.4],
            }],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn frame_drops_incomplete_rows() {
        let ds = toy();
        let f = Frame::build(&ds, Some("y"), &["A".to_string()]).unwrap();
        assert_eq!(f.rows, vec![0, 1]);
        assert_eq!(f.excluded, 2);
        // The propensity frame ignores the outcome column.
        let g = Frame::build(&ds, None, &["A".to_string()]).unwrap();
        assert_eq!(g.rows, vec![0, 1, 2]);
    }

    #[test]
    fn rejects_non_binary_values() {
        let err = Dataset::new(
            vec![OutcomeColumn {
                name: "y".into(),
                kind: OutcomeKind::Binary,
                values: vec![0.0, 0.5],
            }],
            vec![],
            vec![],
            vec![],
        );
        assert!(err.is_err());
    }

    #[test]
    fn rejects_out_of_range_codes() {
        let err = Dataset::new(
            vec![],
            vec![TreatmentColumn {
                name: "A".into(),
                levels: vec!["0".into()],
                codes: vec![Some(1)],
            }],
            vec![],
            vec![],
        );
        assert!(err.is_err());
    }

    #[test]
    fn csv_round_trip_preserves_content() {
        let ds = toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        ds.to_csv(&path).unwrap();
        let back = Dataset::from_csv(&path, &ds.roles()).unwrap();
        assert_eq!(back.content_hash(), ds.content_hash());
    }

    #[test]
    fn unknown_column_is_named() {
        let ds = toy();
        let err = Frame::build(&ds, Some("z"), &[]).unwrap_err();
        assert!(err.to_string().contains('z'));
    }
}
