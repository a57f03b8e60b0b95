//! Sieve-plateau variance curves over a genetic-distance threshold.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Distance;
use crate::error::{Error, Result};
use crate::inference::{wald_ci, Wald};
use crate::linalg::compensated_sum;

/// Rows per accumulation chunk. Fixed so the reduction order does not depend
/// on the thread count.
const ROW_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlateauRule {
    /// Largest value on the grid, at the smallest τ attaining it.
    #[default]
    Max,
    /// Smallest τ after which every forward relative change is below 0.5%.
    RelativeChange,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SvpCurve {
    pub taus: Vec<f64>,
    pub variances: Vec<f64>,
    /// Off-diagonal pairs `i < j` with `d(i, j) <= τ`.
    pub pair_counts: Vec<u64>,
    pub rule: PlateauRule,
    pub tau0: f64,
    pub variance0: f64,
}

/// `points` equally spaced values on `[0, upper]`.
pub fn default_grid(points: usize, upper: f64) -> Vec<f64> {
    if points <= 1 {
        return vec![0.0];
    }
    (0..points)
        .map(|i| upper * i as f64 / (points - 1) as f64)
        .collect()
}

fn check_grid(taus: &[f64]) -> Result<()> {
    if taus.is_empty() {
        return Err(Error::Empty("τ grid".into()));
    }
    if taus.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(Error::invalid("τ grid values must be finite and >= 0"));
    }
    if taus.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("τ grid must be strictly increasing"));
    }
    Ok(())
}

#[derive(Clone, Copy, Default)]
struct Acc {
    sum: f64,
    comp: f64,
    count: u64,
}

impl Acc {
    fn add_value(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn add_pair(&mut self, v: f64) {
        self.add_value(v);
        self.count += 1;
    }

    fn merge(&mut self, other: &Acc) {
        self.add_value(other.sum);
        self.add_value(other.comp);
        self.count += other.count;
    }
}

/// `σ̂²(τ) = (1/n) [Σ_i D_i² + 2 Σ_{i<j, d(i,j) <= τ} D_i D_j]` at every grid
/// point. Each pair is accumulated into the first grid bucket that admits it,
/// then buckets are prefix-summed.
pub fn svp_curve(
    eif: &[f64],
    distance: &dyn Distance,
    taus: &[f64],
    rule: PlateauRule,
) -> Result<SvpCurve> {
    check_grid(taus)?;
    let n = eif.len();
    if n != distance.n() {
        return Err(Error::LengthMismatch {
            what: "EIF length vs relatedness matrix".into(),
            left: n,
            right: distance.n(),
        });
    }
    if n == 0 {
        return Err(Error::Empty("EIF vector".into()));
    }
    if eif.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("EIF values".into()));
    }
    let n_buckets = taus.len();
    let tau_max = taus[n_buckets - 1];
    let chunks: Vec<Vec<Acc>> = (0..n.div_ceil(ROW_CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![Acc::default(); n_buckets];
            for i in c * ROW_CHUNK..((c + 1) * ROW_CHUNK).min(n) {
                for j in 0..i {
                    let d = distance.distance(i, j);
                    if d.is_nan() || d > tau_max {
                        continue;
                    }
                    let b = taus.partition_point(|&t| t < d);
                    acc[b].add_pair(2.0 * eif[i] * eif[j]);
                }
            }
            acc
        })
        .collect();
    let mut buckets = vec![Acc::default(); n_buckets];
    for chunk in &chunks {
        for (b, a) in buckets.iter_mut().zip(chunk) {
            b.merge(a);
        }
    }
    let diag = compensated_sum(eif.iter().map(|d| d * d));
    let mut running = Acc::default();
    let mut variances = Vec::with_capacity(n_buckets);
    let mut pair_counts = Vec::with_capacity(n_buckets);
    for b in &buckets {
        running.merge(b);
        variances.push(compensated_sum([diag, running.sum, running.comp]) / n as f64);
        pair_counts.push(running.count);
    }
    let (idx, variance0) = select_plateau(&variances, rule)?;
    Ok(SvpCurve {
        taus: taus.to_vec(),
        variances,
        pair_counts,
        rule,
        tau0: taus[idx],
        variance0,
    })
}

/// Index and value of the plateau under `rule`.
pub fn select_plateau(values: &[f64], rule: PlateauRule) -> Result<(usize, f64)> {
    if values.is_empty() {
        return Err(Error::Empty("variance curve".into()));
    }
    let idx = match rule {
        PlateauRule::Max => {
            let mut best = 0;
            for (i, v) in values.iter().enumerate() {
                if *v > values[best] {
                    best = i;
                }
            }
            best
        }
        PlateauRule::RelativeChange => {
            let small = |h: usize| {
                let (a, b) = (values[h], values[h + 1]);
                if a == b {
                    true
                } else {
                    ((b - a) / a).abs() < 0.005
                }
            };
            let mut start = values.len() - 1;
            while start > 0 && small(start - 1) {
                start -= 1;
            }
            start
        }
    };
    Ok((idx, values[idx]))
}

/// Wald interval with the plateau variance.
pub fn svp_ci(estimate: f64, variance: f64, n: usize, alpha: f64) -> Result<Wald> {
    wald_ci(estimate, variance, n, alpha)
}
