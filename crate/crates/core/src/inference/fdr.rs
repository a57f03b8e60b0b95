//! Benjamini-Hochberg step-up procedure.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BhResult {
    pub adjusted: Vec<f64>,
    pub significant: Vec<bool>,
}

/// Step-up FDR control at level `alpha`. Adjusted p-values are
/// `min_{j >= i} m p_(j) / j`, capped at 1, and returned in input order.
pub fn bh_fdr(p: &[f64], alpha: f64) -> Result<BhResult> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("FDR level {alpha} outside [0, 1]")));
    }
    if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("p-value {bad} outside [0, 1]")));
    }
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0_f64;
    for rank in (0..m).rev() {
        let i = order[rank];
        running = running.min(p[i] * m as f64 / (rank + 1) as f64);
        adjusted[i] = running.min(1.0);
    }
    let cutoff = (0..m)
        .rev()
        .find(|&rank| p[order[rank]] <= (rank + 1) as f64 / m as f64 * alpha);
    let mut significant = vec![false; m];
    if let Some(c) = cutoff {
        for &i in &order[..=c] {
            significant[i] = true;
        }
    }
    Ok(BhResult {
        adjusted,
        significant,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_example() {
        let r = bh_fdr(&[0.01, 0.02, 0.30], 0.05).unwrap();
        assert_eq!(r.significant, vec![true, true, false]);
        let want = [0.03, 0.03, 0.30];
        for (a, b) in r.adjusted.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn single_and_uniform() {
        let r = bh_fdr(&[0.03], 0.05).unwrap();
        assert!(r.significant[0]);
        assert_eq!(r.adjusted[0], 0.03);
        let r = bh_fdr(&[0.001; 100], 0.05).unwrap();
        assert!(r.significant.iter().all(|&s| s));
        assert!(bh_fdr(&[1.2], 0.05).is_err());
    }

    proptest::proptest! {
        #[test]
        fn order_invariant_and_monotone(mut p in proptest::collection::vec(0.0f64..=1.0, 1..40), seed in 0u64..1000) {
            let r = bh_fdr(&p, 0.1).unwrap();
            let mut idx: Vec<usize> = (0..p.len()).collect();
            idx.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
            for w in idx.windows(2) {
                proptest::prop_assert!(r.adjusted[w[0]] <= r.adjusted[w[1]]);
            }
            // Rotate the input and compare flags element-wise.
            let shift = seed as usize % p.len();
            let orig = p.clone();
            p.rotate_left(shift);
            let r2 = bh_fdr(&p, 0.1).unwrap();
            for i in 0..p.len() {
                let j = (i + shift) % p.len();
                proptest::prop_assert_eq!(r2.significant[i], r.significant[j]);
                proptest::prop_assert_eq!(r2.adjusted[i], r.adjusted[j]);
                proptest::prop_assert_eq!(p[i], orig[j]);
            }
        }
    }
}
