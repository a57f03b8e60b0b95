mod common;

use common::*;
use rand::Rng;
use targeted_fx::data::Dataset;
use targeted_fx::estimand::Estimand;
use targeted_fx::learners::glm::expit;
use targeted_fx::learners::{OutcomeModel, PropensityModel};
use targeted_fx::pipeline::NuisanceSettings;
use targeted_fx::simulation::{
    ancestral_sample, bootstrap_metrics, evaluate_grid, monte_carlo_truth, null_sample, task_rng,
    von_mises_check, GenerativeSpec, GridSource, RecordStatus, ReplicateGrid, Simulator,
};
use targeted_fx::targeting::Estimator;
use targeted_fx::Result;

const ONE_W: &str = r#"
[covariates]
kind = "normal"
w_dim = 1
[[treatments]]
name = "A1"
levels = ["0", "1"]
logit_coefficients = [[0.2, 0.8]]
[[treatments]]
name = "A2"
levels = ["0", "1", "2"]
logit_coefficients = [[-0.5, 0.3], [-1.0, -0.6]]
[outcome]
noise = { family = "bernoulli" }
formula_terms = [
    { coef = -0.3 },
    { coef = 0.7, factors = [{ level = { treatment = "A1", level = "1" } }] },
    { coef = 0.4, factors = [{ dosage = "A2" }] },
    { coef = 0.5, factors = [{ w = 0 }] },
]
"#;

/// `∫ f(w) φ(w) dw` on a fine grid.
fn normal_expectation(f: impl Fn(f64) -> f64) -> f64 {
    let h = 1e-3;
    (-9000..=9000)
        .map(|k| {
            let w = f64::from(k) * h;
            h * f(w) * (-0.5 * w * w).exp() / (2.0 * std::f64::consts::PI).sqrt()
        })
        .sum()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn freq(ds: &Dataset, t: &str, level: u32) -> f64 {
    let codes = &ds.treatment(t).unwrap().codes;
    codes.iter().filter(|c| **c == Some(level)).count() as f64 / codes.len() as f64
}

#[test]
fn ancestral_sample_follows_the_spec() {
    let spec: GenerativeSpec = toml::from_str(ONE_W).unwrap();
    let n = 200_000;
    let ds = ancestral_sample(&spec, n, 9).unwrap();
    let se = |p: f64| (p * (1.0 - p) / n as f64).sqrt();
    let p1 = normal_expectation(|w| expit(0.2 + 0.8 * w));
    assert!((freq(&ds, "A1", 1) - p1).abs() < 4.0 * se(p1));
    let softmax = |w: f64, l: usize| {
        let e = [1.0, (-0.5 + 0.3 * w).exp(), (-1.0 - 0.6 * w).exp()];
        e[l] / e.iter().sum::<f64>()
    };
    for l in 0..3 {
        let p = normal_expectation(|w| softmax(w, l));
        assert!((freq(&ds, "A2", l as u32) - p).abs() < 4.0 * se(p));
    }
    let ey = normal_expectation(|w| {
        let pa = expit(0.2 + 0.8 * w);
        (0..3)
            .map(|l| {
                let base = -0.3 + 0.4 * l as f64 + 0.5 * w;
                softmax(w, l) * ((1.0 - pa) * expit(base) + pa * expit(base + 0.7))
            })
            .sum()
    });
    let y = &ds.outcomes()[0].values;
    assert!(y.iter().all(|v| *v == 0.0 || *v == 1.0));
    assert!((mean(y) - ey).abs() < 4.0 * se(ey));
    // Same seed, same table.
    assert_eq!(
        ancestral_sample(&spec, 500, 9).unwrap(),
        ancestral_sample(&spec, 500, 9).unwrap()
    );
}

#[test]
fn monte_carlo_truth_matches_quadrature() {
    let sim = Simulator::new(toml::from_str(ONE_W).unwrap()).unwrap();
    // Binary outcome: the A1 contrast integrates over W and the law of A2 | W.
    let ate = Estimand::ate("A1", "0", "1", "Y");
    let t = monte_carlo_truth(&sim, &ate, 200_000, 3).unwrap();
    let softmax = |w: f64, l: usize| {
        let e = [1.0, (-0.5 + 0.3 * w).exp(), (-1.0 - 0.6 * w).exp()];
        e[l] / e.iter().sum::<f64>()
    };
    let oracle = normal_expectation(|w| {
        (0..3)
            .map(|l| {
                let base = -0.3 + 0.4 * l as f64 + 0.5 * w;
                softmax(w, l) * (expit(base + 0.7) - expit(base))
            })
            .sum()
    });
    assert!(
        (t.value - oracle).abs() < 4.0 * t.std_error,
        "{} vs {oracle}",
        t.value
    );
    let cm = Estimand {
        kind: targeted_fx::estimand::EstimandKind::CounterfactualMean,
        treatments: vec!["A1".into(), "A2".into()],
        from: vec![],
        to: vec!["1".into(), "2".into()],
        outcome: "Y".into(),
    };
    let t = monte_carlo_truth(&sim, &cm, 200_000, 3).unwrap();
    let oracle = normal_expectation(|w| expit(-0.3 + 0.7 + 0.8 + 0.5 * w));
    assert!((t.value - oracle).abs() < 4.0 * t.std_error);
}

#[test]
fn null_sampler_keeps_marginals_and_breaks_dependence() {
    let sim = linear_spec(0.3, false);
    let src = sim.sample(5000, &mut task_rng(1, 0, 0)).unwrap();
    let ds = null_sample(&src, 40_000, 2).unwrap();
    assert_eq!(ds.n_rows(), 40_000);
    for t in ["A1", "A2"] {
        let (p, q) = (freq(&src, t, 1), freq(&ds, t, 1));
        assert!((p - q).abs() < 4.0 * (p * (1.0 - p) / 40_000.0).sqrt());
    }
    let ys = &src.outcomes()[0].values;
    let yn = &ds.outcomes()[0].values;
    assert!((mean(ys) - mean(yn)).abs() < 0.05);
    // Y depends on A1 in the source but not after resampling.
    let diff = |d: &Dataset| {
        let y = &d.outcomes()[0].values;
        let a = &d.treatment("A1").unwrap().codes;
        let (mut s, mut c) = ([0.0; 2], [0.0; 2]);
        for i in 0..d.n_rows() {
            let l = a[i].unwrap() as usize;
            s[l] += y[i];
            c[l] += 1.0;
        }
        s[1] / c[1] - s[0] / c[0]
    };
    assert!(diff(&src) > 0.3);
    assert!(diff(&ds).abs() < 0.06);
    // Confounders travel as a row.
    let w0 = &ds.covariates()[0].values;
    let w1 = &ds.covariates()[1].values;
    let src_rows: std::collections::HashSet<(u64, u64)> = src.covariates()[0]
        .values
        .iter()
        .zip(&src.covariates()[1].values)
        .map(|(a, b)| (a.to_bits(), b.to_bits()))
        .collect();
    assert!(w0
        .iter()
        .zip(w1)
        .all(|(a, b)| src_rows.contains(&(a.to_bits(), b.to_bits()))));
}

struct Shifted<'a>(&'a dyn OutcomeModel, f64);

impl OutcomeModel for Shifted<'_> {
    fn predict(&self, w: &[f64], c: &[f64], levels: &[u32]) -> f64 {
        self.0.predict(w, c, levels) + self.1 * f64::from(levels[0])
    }
}

/// Ignores `W`: a wrong propensity whenever treatment depends on confounders.
struct Flat;

impl PropensityModel for Flat {
    fn prob(&self, _: &[f64], _: &[u32]) -> Result<f64> {
        Ok(0.25)
    }
}

#[test]
fn von_mises_expansion_holds_in_every_arm() {
    let sim = linear_spec(0.3, false);
    let estimand = aie();
    let q0 = sim.outcome_model(&estimand.treatments).unwrap();
    let g0 = sim.propensity_model(&estimand.treatments).unwrap();
    let q_bad = Shifted(&q0, 0.4);
    let arms: [(&str, &dyn OutcomeModel, &dyn PropensityModel); 3] = [
        ("wrong Q", &q_bad, &g0),
        ("wrong g", &q0, &Flat),
        ("both wrong", &q_bad, &Flat),
    ];
    for (name, q, g) in arms {
        let vm = von_mises_check(&sim, q, g, &estimand, 50_000, 11).unwrap();
        assert!(
            vm.residual.mean.abs() < 4.0 * vm.residual.std_error.max(1e-12),
            "{name}: {:?}",
            vm.residual
        );
        if name != "both wrong" {
            assert!(
                vm.remainder.mean.abs() < 1e-12,
                "{name}: {:?}",
                vm.remainder
            );
        }
    }
}

fn small_grid(estimands: Vec<Estimand>, seed: u64) -> ReplicateGrid {
    ReplicateGrid {
        sizes: vec![300, 600],
        estimators: vec![Estimator::Ose, Estimator::Tmle, Estimator::CvTmle],
        estimands,
        replicates: 12,
        thresholds: vec![0.0, 0.05],
        alpha: 0.05,
        seed,
        nuisance: NuisanceSettings::default(),
        truth_draws: 20_000,
    }
}

#[test]
fn grid_is_identical_across_pool_sizes() {
    let sim = linear_spec(0.3, false);
    let grid = small_grid(vec![aie(), Estimand::ate("A2", "0", "1", "Y")], 5);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| evaluate_grid(&grid, GridSource::Spec(&sim)).unwrap())
    };
    let (a, b) = (run(1), run(6));
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
    assert_eq!(a.records.len(), 2 * 12 * 2 * 3);
    assert!(a.records.iter().all(|r| r.status == RecordStatus::Ok));
    assert!((a.truths[0].value - 0.3).abs() < 1e-12);
    for row in &a.rows {
        assert!((row.mse - row.bias2 - row.variance).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&row.coverage));
        assert!(row.coverage_interval.0 <= row.coverage && row.coverage <= row.coverage_interval.1);
    }
    for label in ["ALL", "ALL_GROUPS"] {
        assert!(a.rows.iter().any(|r| r.estimand == label));
    }
    let dir = tempfile::tempdir().unwrap();
    a.write_csv(&dir.path().join("grid.csv")).unwrap();
    let text = std::fs::read_to_string(dir.path().join("grid.csv")).unwrap();
    assert!(text.starts_with("estimator,estimand,n,threshold,coverage,power"));
    assert_eq!(text.lines().count(), a.rows.len() + 1);
}

#[test]
fn null_grid_has_zero_truths_and_drops_rare_levels() {
    let mut r = rng(21);
    let n = 2000;
    let rare: Vec<u32> = (0..n)
        .map(|_| categorical(&mut r, &[0.9, 0.08, 0.02]))
        .collect();
    let common: Vec<u32> = (0..n).map(|_| categorical(&mut r, &[0.5, 0.5])).collect();
    let y: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
    let w: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
    let src = Dataset::new(
        vec![continuous("Y", y)],
        vec![treatment("R", 3, rare), treatment("C", 2, common)],
        vec![covariate("PC1", w)],
        vec![],
    )
    .unwrap();
    let mut grid = small_grid(
        vec![
            Estimand::ate("R", "0", "2", "Y"),
            Estimand::ate("C", "0", "1", "Y"),
        ],
        8,
    );
    grid.sizes = vec![200];
    grid.estimators = vec![Estimator::Tmle];
    let res = evaluate_grid(&grid, GridSource::Null(&src)).unwrap();
    assert!(res.truths.iter().all(|t| t.value == 0.0));
    let count = |t: f64, label: &str| {
        res.rows
            .iter()
            .find(|r| r.threshold == t && r.estimand == label)
            .map_or(0, |r| r.b)
    };
    let rare_label = grid.estimands[0].describe();
    assert!(count(0.0, &rare_label) > 0);
    assert_eq!(count(0.05, &rare_label), 0);
    assert_eq!(count(0.05, &grid.estimands[1].describe()), 12);
}

#[test]
fn bootstrap_hand_example() {
    let m = bootstrap_metrics(&[vec![0.0], vec![2.0]], &[1.0]).unwrap();
    assert_eq!(
        (m.bias2, m.variance, m.mse, m.bias2_centered),
        (1.0, 2.0, 3.0, 0.0)
    );
}
