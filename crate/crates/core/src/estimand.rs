//! Estimands, their signed expansion into counterfactual means, and the
//! positivity frequency filter.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Frame};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimandKind {
    /// Mean outcome under one joint level (`to`).
    CounterfactualMean,
    Ate,
    /// k-point average interaction effect.
    Aie,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Estimand {
    pub kind: EstimandKind,
    pub treatments: Vec<String>,
    /// Initial levels a(0); empty for counterfactual means.
    #[serde(default)]
    pub from: Vec<String>,
    /// Final levels a(1), or the evaluated level for counterfactual means.
    pub to: Vec<String>,
    pub outcome: String,
}

impl Estimand {
    pub fn ate(treatment: &str, from: &str, to: &str, outcome: &str) -> Self {
        Estimand {
            kind: EstimandKind::Ate,
            treatments: vec![treatment.into()],
            from: vec![from.into()],
            to: vec![to.into()],
            outcome: outcome.into(),
        }
    }

    pub fn aie(treatments: &[&str], from: &[&str], to: &[&str], outcome: &str) -> Self {
        let own = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        Estimand {
            kind: EstimandKind::Aie,
            treatments: own(treatments),
            from: own(from),
            to: own(to),
            outcome: outcome.into(),
        }
    }

    pub fn k(&self) -> usize {
        self.treatments.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.treatments.len();
        if k == 0 {
            return Err(Error::Estimand("at least one treatment is required".into()));
        }
        for (i, a) in self.treatments.iter().enumerate() {
            if self.treatments[..i].contains(a) {
                return Err(Error::Estimand(format!("treatment `{a}` listed twice")));
            }
        }
        if self.to.len() != k {
            return Err(Error::Estimand(format!(
                "expected {k} final levels, got {}",
                self.to.len()
            )));
        }
        match self.kind {
            EstimandKind::CounterfactualMean => {
                if !self.from.is_empty() {
                    return Err(Error::Estimand(
                        "counterfactual means take no initial levels".into(),
                    ));
                }
            }
            EstimandKind::Ate | EstimandKind::Aie => {
                if self.kind == EstimandKind::Ate && k != 1 {
                    return Err(Error::Estimand(format!(
                        "an ATE has exactly one treatment, got {k}"
                    )));
                }
                if self.from.len() != k {
                    return Err(Error::Estimand(format!(
                        "expected {k} initial levels, got {}",
                        self.from.len()
                    )));
                }
                for j in 0..k {
                    if self.from[j] == self.to[j] {
                        return Err(Error::Estimand(format!(
                            "treatment `{}` has identical initial and final level `{}`",
                            self.treatments[j], self.from[j]
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Compact human-readable label, e.g. `AIE(A1:0->1,A2:0->1; y)`.
    pub fn describe(&self) -> String {
        let parts: Vec<String> = match self.kind {
            EstimandKind::CounterfactualMean => self
                .treatments
                .iter()
                .zip(&self.to)
                .map(|(t, l)| format!("{t}={l}"))
                .collect(),
            _ => self
                .treatments
                .iter()
                .zip(self.from.iter().zip(&self.to))
                .map(|(t, (a, b))| format!("{t}:{a}->{b}"))
                .collect(),
        };
        let tag = match self.kind {
            EstimandKind::CounterfactualMean => "CM",
            EstimandKind::Ate => "ATE",
            EstimandKind::Aie => "AIE",
        };
        format!("{tag}({}; {})", parts.join(","), self.outcome)
    }
}

/// One counterfactual-mean term of an expanded estimand.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SignedTerm {
    pub sign: i8,
    pub levels: Vec<String>,
}

/// Expands an estimand into its `2^k` signed counterfactual-mean terms.
///
/// Term `m` uses the bit vector `s_j = (m >> j) & 1`, so `s = 0…0` comes first
/// and treatment 0 is the fastest-varying position. The sign is
/// `(-1)^(k - |s|)`.
pub fn expand_estimand(estimand: &Estimand) -> Result<Vec<SignedTerm>> {
    estimand.validate()?;
    if estimand.kind == EstimandKind::CounterfactualMean {
        return Ok(vec![SignedTerm {
            sign: 1,
            levels: estimand.to.clone(),
        }]);
    }
    let k = estimand.k();
    if k > 20 {
        return Err(Error::Estimand(format!("k = {k} is too large to expand")));
    }
    Ok((0..1usize << k)
        .map(|m| {
            let weight = m.count_ones() as usize;
            let levels = (0..k)
                .map(|j| {
                    if (m >> j) & 1 == 1 {
                        estimand.to[j].clone()
                    } else {
                        estimand.from[j].clone()
                    }
                })
                .collect();
            SignedTerm {
                sign: if (k - weight) % 2 == 0 { 1 } else { -1 },
                levels,
            }
        })
        .collect())
}

/// Expanded terms with levels resolved to the codes of a frame whose
/// treatments are the estimand's treatments in the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedTerms {
    pub signs: Vec<f64>,
    pub levels: Vec<Vec<u32>>,
}

impl ResolvedTerms {
    pub fn resolve(estimand: &Estimand, frame: &Frame) -> Result<Self> {
        let terms = expand_estimand(estimand)?;
        if frame.treatment_names() != estimand.treatments {
            return Err(Error::Estimand(format!(
                "frame treatments {:?} do not match estimand treatments {:?}",
                frame.treatment_names(),
                estimand.treatments
            )));
        }
        let mut levels = Vec::with_capacity(terms.len());
        for term in &terms {
            let mut codes = Vec::with_capacity(term.levels.len());
            for (t, l) in frame.treatments.iter().zip(&term.levels) {
                let code =
                    t.levels
                        .iter()
                        .position(|x| x == l)
                        .ok_or_else(|| Error::UnknownLevel {
                            treatment: t.name.clone(),
                            level: l.clone(),
                        })?;
                codes.push(code as u32);
            }
            levels.push(codes);
        }
        Ok(ResolvedTerms {
            signs: terms.iter().map(|t| f64::from(t.sign)).collect(),
            levels,
        })
    }

    pub fn len(&self) -> usize {
        self.signs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signs.is_empty()
    }

    /// Index of the term whose joint level equals `observed`, if any. Terms
    /// have pairwise distinct levels so at most one matches.
    pub fn matching(&self, observed: &[u32]) -> Option<usize> {
        self.levels.iter().position(|l| l.as_slice() == observed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterReport {
    pub keep: bool,
    pub threshold: f64,
    /// Empirical frequency of each expanded term's joint level.
    pub frequencies: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Drops an estimand when any joint level of its expansion has empirical
/// frequency below `threshold` or is never observed.
pub fn frequency_filter_frame(
    frame: &Frame,
    terms: &ResolvedTerms,
    threshold: f64,
) -> Result<FilterReport> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::invalid(format!(
            "positivity threshold must lie in [0, 1), got {threshold}"
        )));
    }
    let mut counts = vec![0usize; terms.len()];
    let mut level = vec![0u32; frame.treatments.len()];
    for i in 0..frame.n() {
        for (j, t) in frame.treatments.iter().enumerate() {
            level[j] = t.codes[i];
        }
        if let Some(s) = terms.matching(&level) {
            counts[s] += 1;
        }
    }
    let n = frame.n();
    let frequencies: Vec<f64> = counts
        .iter()
        .map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 })
        .collect();
    let keep = n > 0
        && counts
            .iter()
            .zip(&frequencies)
            .all(|(&c, &f)| c > 0 && f >= threshold);
    Ok(FilterReport {
        keep,
        threshold,
        frequencies,
        counts,
    })
}

/// Dataset-level filter: frequencies are marginal over the complete cases of
/// the estimand's outcome and treatments.
pub fn frequency_filter(
    dataset: &Dataset,
    estimand: &Estimand,
    threshold: f64,
) -> Result<FilterReport> {
    let frame = Frame::build(dataset, Some(&estimand.outcome), &estimand.treatments)?;
    let terms = ResolvedTerms::resolve(estimand, &frame)?;
    frequency_filter_frame(&frame, &terms, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{NumericColumn, OutcomeColumn, OutcomeKind, TreatmentColumn};

    fn levels(terms: &[SignedTerm]) -> Vec<(i8, Vec<&str>)> {
        terms
            .iter()
            .map(|t| (t.sign, t.levels.iter().map(String::as_str).collect()))
            .collect()
    }

    #[test]
    fn k1_is_ate_contrast() {
        let e = Estimand::ate("A", "TT", "TC", "y");
        let t = expand_estimand(&e).unwrap();
        assert_eq!(levels(&t), vec![(-1, vec!["TT"]), (1, vec!["TC"])]);
    }

    #[test]
    fn k2_matches_two_point_interaction() {
        let e = Estimand::aie(&["A1", "A2"], &["0", "0"], &["1", "1"], "y");
        let t = expand_estimand(&e).unwrap();
        assert_eq!(
            levels(&t),
            vec![
                (1, vec!["0", "0"]),
                (-1, vec!["1", "0"]),
                (-1, vec!["0", "1"]),
                (1, vec!["1", "1"]),
            ]
        );
    }

    #[test]
    fn k3_signs_follow_weight_parity() {
        let e = Estimand::aie(&["A", "B", "C"], &["0", "0", "0"], &["1", "1", "1"], "y");
        let t = expand_estimand(&e).unwrap();
        assert_eq!(t.len(), 8);
        // Oracle: enumerate s directly.
        for s0 in 0..2 {
            for s1 in 0..2 {
                for s2 in 0..2 {
                    let want: i8 = if (3 - (s0 + s1 + s2)) % 2 == 0 { 1 } else { -1 };
                    let lv = [s0, s1, s2].map(|b| b.to_string());
                    let term = t.iter().find(|x| x.levels == lv).unwrap();
                    assert_eq!(term.sign, want);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_estimands() {
        let dup = Estimand::aie(&["A", "A"], &["0", "0"], &["1", "1"], "y");
        assert!(expand_estimand(&dup).is_err());
        let same = Estimand::ate("A", "0", "0", "y");
        assert!(expand_estimand(&same).is_err());
        let mut ate2 = Estimand::aie(&["A", "B"], &["0", "0"], &["1", "1"], "y");
        ate2.kind = EstimandKind::Ate;
        assert!(expand_estimand(&ate2).is_err());
    }

    fn dataset(codes: Vec<u32>) -> Dataset {
        let n = codes.len();
        Dataset::new(
            vec![OutcomeColumn {
                name: "y".into(),
                kind: OutcomeKind::Continuous,
                values: vec![0.0; n],
            }],
            vec![TreatmentColumn {
                name: "A".into(),
                levels: vec!["TT".into(), "TC".into(), "CC".into()],
                codes: codes.into_iter().map(Some).collect(),
            }],
            vec![NumericColumn {
                name: "w".into(),
                values: vec![0.0; n],
            }],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn filter_keeps_common_levels() {
        let mut codes = vec![0u32; 50];
        codes.extend(vec![1u32; 50]);
        let ds = dataset(codes);
        let r = frequency_filter(&ds, &Estimand::ate("A", "TT", "TC", "y"), 0.01).unwrap();
        assert!(r.keep);
        assert_eq!(r.frequencies, vec![0.5, 0.5]);
    }

    #[test]
    fn filter_drops_absent_level_even_at_zero_threshold() {
        let ds = dataset(vec![0, 1, 0, 1]);
        let e = Estimand::ate("A", "TT", "CC", "y");
        let r = frequency_filter(&ds, &e, 0.01).unwrap();
        assert!(!r.keep);
        assert_eq!(r.frequencies[1], 0.0);
        let r0 = frequency_filter(&ds, &e, 0.0).unwrap();
        assert!(!r0.keep);
        let ok = frequency_filter(&ds, &Estimand::ate("A", "TT", "TC", "y"), 0.0).unwrap();
        assert!(ok.keep);
    }

    #[test]
    fn filter_on_empty_dataset_drops() {
        let ds = dataset(vec![]);
        let r = frequency_filter(&ds, &Estimand::ate("A", "TT", "TC", "y"), 0.0).unwrap();
        assert!(!r.keep);
        assert_eq!(r.frequencies, vec![0.0, 0.0]);
    }

    #[test]
    fn filter_rejects_threshold_one() {
        let ds = dataset(vec![0, 1]);
        assert!(frequency_filter(&ds, &Estimand::ate("A", "TT", "TC", "y"), 1.0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn signs_sum_to_zero(k in 1usize..8) {
            let names: Vec<String> = (0..k).map(|j| format!("A{j}")).collect();
            let e = Estimand {
                kind: EstimandKind::Aie,
                treatments: names,
                from: vec!["0".into(); k],
                to: vec!["1".into(); k],
                outcome: "y".into(),
            };
            let t = expand_estimand(&e).unwrap();
            proptest::prop_assert_eq!(t.len(), 1 << k);
            proptest::prop_assert_eq!(t.iter().map(|x| i32::from(x.sign)).sum::<i32>(), 0);
        }

        #[test]
        fn swapping_treatments_permutes_terms(k in 2usize..6, a in 0usize..6, b in 0usize..6) {
            let (a, b) = (a % k, b % k);
            let names: Vec<String> = (0..k).map(|j| format!("A{j}")).collect();
            let from: Vec<String> = (0..k).map(|j| format!("f{j}")).collect();
            let to: Vec<String> = (0..k).map(|j| format!("t{j}")).collect();
            let e = Estimand { kind: EstimandKind::Aie, treatments: names.clone(), from: from.clone(), to: to.clone(), outcome: "y".into() };
            let mut sw = e.clone();
            sw.treatments.swap(a, b);
            sw.from.swap(a, b);
            sw.to.swap(a, b);
            let canon = |est: &Estimand| {
                let mut v: Vec<(i8, Vec<(String, String)>)> = expand_estimand(est).unwrap().into_iter().map(|t| {
                    let mut pairs: Vec<(String, String)> = est.treatments.iter().cloned().zip(t.levels).collect();
                    pairs.sort();
                    (t.sign, pairs)
                }).collect();
                v.sort();
                v
            };
            proptest::prop_assert_eq!(canon(&e), canon(&sw));
        }
    }
}
