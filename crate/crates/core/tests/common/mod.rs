#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use targeted_fx::data::{Dataset, NumericColumn, OutcomeColumn, OutcomeKind, TreatmentColumn};
use targeted_fx::estimand::Estimand;
use targeted_fx::learners::{LearnerKind, LearnerSpec};
use targeted_fx::pipeline::{
    estimate_estimand, fit_outcome_bundle, fit_propensity_bundle, NuisanceSettings,
};
use targeted_fx::simulation::{GenerativeSpec, Simulator};
use targeted_fx::targeting::{EstimateReport, Estimator};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn levels(k: usize) -> Vec<String> {
    (0..k).map(|l| l.to_string()).collect()
}

pub fn continuous(name: &str, values: Vec<f64>) -> OutcomeColumn {
    OutcomeColumn {
        name: name.into(),
        kind: OutcomeKind::Continuous,
        values,
    }
}

pub fn treatment(name: &str, k: usize, codes: Vec<u32>) -> TreatmentColumn {
    TreatmentColumn {
        name: name.into(),
        levels: levels(k),
        codes: codes.into_iter().map(Some).collect(),
    }
}

pub fn covariate(name: &str, values: Vec<f64>) -> NumericColumn {
    NumericColumn {
        name: name.into(),
        values,
    }
}

/// Draws a level from unnormalised weights.
pub fn categorical<R: Rng>(rng: &mut R, weights: &[f64]) -> u32 {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i as u32;
        }
        u -= w;
    }
    (weights.len() - 1) as u32
}

/// Fully discrete data: `W` in {0, 1, 2}, two 3-level treatments whose
/// distribution depends on `W`, continuous `Y`.
pub fn discrete_dataset(n: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let (mut w, mut a1, mut a2, mut y) = (vec![], vec![], vec![], vec![]);
    for _ in 0..n {
        let wi = categorical(&mut r, &[0.3, 0.45, 0.25]);
        let shift = f64::from(wi);
        let l1 = categorical(&mut r, &[1.0 + shift, 1.5, 0.8]);
        let l2 = categorical(&mut r, &[1.2, 1.0 + 0.5 * shift, 1.0]);
        let mean =
            0.4 * f64::from(l1) - 0.3 * f64::from(l2) + 0.25 * f64::from(l1 * l2) + 0.5 * shift;
        w.push(shift);
        a1.push(l1);
        a2.push(l2);
        y.push(mean + r.random::<f64>() - 0.5);
    }
    Dataset::new(
        vec![continuous("Y", y)],
        vec![treatment("A1", 3, a1), treatment("A2", 3, a2)],
        vec![covariate("W", w)],
        vec![],
    )
    .unwrap()
}

pub fn saturated_settings() -> NuisanceSettings {
    NuisanceSettings {
        outcome_learners: Some(vec![LearnerSpec::new(LearnerKind::Saturated, 0.0, false)]),
        propensity_learners: vec![LearnerSpec::new(LearnerKind::Saturated, 0.0, false)],
        ..NuisanceSettings::default()
    }
}

/// Fits nuisances on `ds` and runs every estimator; panics on failures.
pub fn estimate(
    ds: &Dataset,
    estimand: &Estimand,
    settings: &NuisanceSettings,
    estimators: &[Estimator],
) -> Vec<EstimateReport> {
    let with_cv = estimators.iter().any(|e| e.is_cv());
    let prop = fit_propensity_bundle(ds, &estimand.treatments, settings, with_cv).unwrap();
    let out = fit_outcome_bundle(ds, &estimand.outcome, &prop, settings).unwrap();
    estimate_estimand(&out, &prop, estimand, estimators)
        .unwrap()
        .into_iter()
        .map(Result::unwrap)
        .collect()
}

/// Two binary treatments confounded by one normal `W`, linear outcome with
/// interaction `gamma`.
pub fn linear_spec(gamma: f64, binary: bool) -> Simulator {
    let noise = if binary {
        r#"{ family = "bernoulli" }"#
    } else {
        r#"{ family = "gaussian", sd = 1.0 }"#
    };
    let text = format!(
        r#"
        [covariates]
        kind = "normal"
        w_dim = 2
        [[treatments]]
        name = "A1"
        levels = ["0", "1"]
        logit_coefficients = [[0.0, 0.5, -0.2]]
        [[treatments]]
        name = "A2"
        levels = ["0", "1"]
        logit_coefficients = [[-0.3, -0.4, 0.3]]
        [outcome]
        noise = {noise}
        formula_terms = [
            {{ coef = 0.2 }},
            {{ coef = 0.5, factors = [{{ dosage = "A1" }}] }},
            {{ coef = -0.2, factors = [{{ dosage = "A2" }}] }},
            {{ coef = {gamma}, factors = [{{ dosage = "A1" }}, {{ dosage = "A2" }}] }},
            {{ coef = 0.6, factors = [{{ w = 0 }}] }},
            {{ coef = -0.4, factors = [{{ w = 1 }}] }},
        ]
        "#
    );
    let spec: GenerativeSpec = toml::from_str(&text).unwrap();
    Simulator::new(spec).unwrap()
}

pub fn aie() -> Estimand {
    Estimand::aie(&["A1", "A2"], &["0", "0"], &["1", "1"], "Y")
}

/// `k` binary treatments with logistic propensities on two normal
/// confounders; the outcome has main, pairwise and (for `k = 3`) three-way
/// dosage terms.
pub fn k_spec(k: usize, binary: bool, seed: u64) -> Simulator {
    let mut r = rng(seed);
    let mut coef = |scale: f64| (r.random::<f64>() - 0.5) * 2.0 * scale;
    let mut text = String::from("[covariates]\nkind = \"normal\"\nw_dim = 2\n");
    for j in 0..k {
        text += &format!(
            "[[treatments]]\nname = \"A{}\"\nlevels = [\"0\", \"1\"]\nlogit_coefficients = [[{}, {}, {}]]\n",
            j + 1,
            coef(0.5),
            coef(0.6),
            coef(0.6)
        );
    }
    let noise = if binary {
        "{ family = \"bernoulli\" }"
    } else {
        "{ family = \"gaussian\", sd = 1.0 }"
    };
    text += &format!("[outcome]\nnoise = {noise}\nformula_terms = [\n");
    text += &format!("{{ coef = {} }},\n", coef(0.3));
    text += &format!("{{ coef = {}, factors = [{{ w = 0 }}] }},\n", coef(0.8));
    text += &format!("{{ coef = {}, factors = [{{ w = 1 }}] }},\n", coef(0.8));
    let dosage = |j: usize| format!("{{ dosage = \"A{}\" }}", j + 1);
    for a in 0..k {
        text += &format!("{{ coef = {}, factors = [{}] }},\n", coef(0.7), dosage(a));
        for b in a + 1..k {
            text += &format!(
                "{{ coef = {}, factors = [{}, {}] }},\n",
                coef(0.5),
                dosage(a),
                dosage(b)
            );
        }
    }
    if k == 3 {
        text += &format!(
            "{{ coef = {}, factors = [{}, {}, {}] }},\n",
            coef(0.4),
            dosage(0),
            dosage(1),
            dosage(2)
        );
    }
    text += "]\n";
    let spec: GenerativeSpec = toml::from_str(&text).unwrap();
    Simulator::new(spec).unwrap()
}

/// The `k`-point interaction from all-reference to all-alternate levels.
pub fn k_estimand(k: usize) -> Estimand {
    let names: Vec<String> = (1..=k).map(|j| format!("A{j}")).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    if k == 1 {
        Estimand::ate("A1", "0", "1", "Y")
    } else {
        Estimand::aie(&names, &vec!["0"; k], &vec!["1"; k], "Y")
    }
}

/// Exhaustive g-computation over the discrete cells of `(W, A1, A2)`.
pub fn g_computation(ds: &Dataset, estimand: &Estimand) -> f64 {
    let w = &ds.covariates()[0].values;
    let y = &ds.outcomes()[0].values;
    let a: Vec<&Vec<Option<u32>>> = estimand
        .treatments
        .iter()
        .map(|t| &ds.treatment(t).unwrap().codes)
        .collect();
    let n = ds.n_rows() as f64;
    let mut cells: BTreeMap<(u64, Vec<u32>), (f64, f64)> = BTreeMap::new();
    let mut w_count: BTreeMap<u64, f64> = BTreeMap::new();
    for i in 0..ds.n_rows() {
        let key = w[i].to_bits();
        *w_count.entry(key).or_default() += 1.0;
        let levels: Vec<u32> = a.iter().map(|c| c[i].unwrap()).collect();
        let e = cells.entry((key, levels)).or_default();
        e.0 += y[i];
        e.1 += 1.0;
    }
    // Signed vertices of the contrast.
    let k = estimand.treatments.len();
    let from: Vec<u32> = estimand.from.iter().map(|l| l.parse().unwrap()).collect();
    let to: Vec<u32> = estimand.to.iter().map(|l| l.parse().unwrap()).collect();
    let mut psi = 0.0;
    for (&wk, &cnt) in &w_count {
        for mask in 0..(1u32 << k) {
            let levels: Vec<u32> = (0..k)
                .map(|j| if mask >> j & 1 == 1 { to[j] } else { from[j] })
                .collect();
            let flips = k as u32 - mask.count_ones();
            let sign = if flips % 2 == 0 { 1.0 } else { -1.0 };
            let (s, c) = cells[&(wk, levels)];
            psi += cnt / n * sign * s / c;
        }
    }
    psi
}
