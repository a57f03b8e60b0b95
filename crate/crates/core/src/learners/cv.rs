//! Fold assignment and discrete cross-validated selection.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Folds {
    k: usize,
    assignment: Vec<usize>,
}

impl Folds {
    /// Assigns rows to `k` folds, balancing every stratum across folds.
    ///
    /// Strata with fewer than `k` members are pooled; if the pool itself is
    /// still smaller than `k` it joins the largest stratum.
    pub fn stratified(strata: &[u64], k: usize, seed: u64) -> Result<Folds> {
        if k < 2 {
            return Err(Error::invalid(format!("need at least 2 folds, got {k}")));
        }
        if strata.len() < k {
            return Err(Error::invalid(format!(
                "{} rows cannot be split into {k} folds",
                strata.len()
            )));
        }
        let mut cells: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, &s) in strata.iter().enumerate() {
            cells.entry(s).or_default().push(i);
        }
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut pooled = Vec::new();
        for (_, rows) in cells {
            if rows.len() < k {
                pooled.extend(rows);
            } else {
                groups.push(rows);
            }
        }
        if !pooled.is_empty() {
            if pooled.len() >= k || groups.is_empty() {
                groups.push(pooled);
            } else {
                let largest = (0..groups.len())
                    .max_by_key(|&g| (groups[g].len(), std::cmp::Reverse(g)))
                    .unwrap();
                groups[largest].extend(pooled);
                groups[largest].sort_unstable();
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut assignment = vec![0usize; strata.len()];
        let mut counter = 0usize;
        for mut rows in groups {
            rows.shuffle(&mut rng);
            for i in rows {
                assignment[i] = counter % k;
                counter += 1;
            }
        }
        Ok(Folds { k, assignment })
    }

    pub fn from_assignment(assignment: Vec<usize>, k: usize) -> Result<Folds> {
        if k < 2 {
            return Err(Error::invalid(format!("need at least 2 folds, got {k}")));
        }
        let mut sizes = vec![0usize; k];
        for &a in &assignment {
            if a >= k {
                return Err(Error::invalid(format!("fold id {a} out of range")));
            }
            sizes[a] += 1;
        }
        if let Some(f) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::Empty(format!("fold {f} has zero rows")));
        }
        Ok(Folds { k, assignment })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn fold_of(&self, row: usize) -> usize {
        self.assignment[row]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn test_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == fold)
            .collect()
    }

    pub fn train_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] != fold)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &a in &self.assignment {
            s[a] += 1;
        }
        s
    }

    /// Restricts the assignment to a subset of rows (in the given order).
    pub fn subset(&self, rows: &[usize]) -> Result<Folds> {
        Folds::from_assignment(rows.iter().map(|&i| self.assignment[i]).collect(), self.k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvSelection {
    pub index: usize,
    /// `losses[candidate][fold]`: mean held-out loss on that fold.
    pub losses: Vec<Vec<f64>>,
    /// Held-out loss pooled over all rows.
    pub mean_losses: Vec<f64>,
}

/// Discrete selector. `loss(candidate, train, test)` must return the summed
/// held-out loss over `test`. Ties go to the lowest candidate index.
pub fn cv_select_by<F>(n_candidates: usize, folds: &Folds, mut loss: F) -> Result<CvSelection>
where
    F: FnMut(usize, &[usize], &[usize]) -> Result<f64>,
{
    if n_candidates == 0 {
        return Err(Error::Empty("candidate list".into()));
    }
    let splits: Vec<(Vec<usize>, Vec<usize>)> = (0..folds.k())
        .map(|f| (folds.train_rows(f), folds.test_rows(f)))
        .collect();
    let n = folds.len() as f64;
    let mut losses = Vec::with_capacity(n_candidates);
    let mut mean_losses = Vec::with_capacity(n_candidates);
    for c in 0..n_candidates {
        let mut per_fold = Vec::with_capacity(folds.k());
        let mut total = 0.0;
        for (train, test) in &splits {
            let l = loss(c, train, test)?;
            total += l;
            per_fold.push(l / test.len() as f64);
        }
        losses.push(per_fold);
        mean_losses.push(total / n);
    }
    let mut index = 0;
    for c in 1..n_candidates {
        if mean_losses[c] < mean_losses[index] {
            index = c;
        }
    }
    Ok(CvSelection {
        index,
        losses,
        mean_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn folds_partition_and_balance_strata() {
        let strata: Vec<u64> = (0..297).map(|i| (i % 3) as u64).collect();
        let f = Folds::stratified(&strata, 3, 7).unwrap();
        for s in 0..3u64 {
            let mut per_fold = [0usize; 3];
            for (i, &st) in strata.iter().enumerate() {
                if st == s {
                    per_fold[f.fold_of(i)] += 1;
                }
            }
            assert_eq!(per_fold, [33, 33, 33]);
        }
        let mut all: Vec<usize> = (0..3).flat_map(|k| f.test_rows(k)).collect();
        all.sort_unstable();
        assert_eq!(all, (0..297).collect::<Vec<_>>());
    }

    #[test]
    fn tiny_strata_are_merged() {
        let mut strata = vec![0u64; 30];
        strata.push(1);
        let f = Folds::stratified(&strata, 3, 1).unwrap();
        assert_eq!(f.sizes().iter().sum::<usize>(), 31);
        assert!(f.sizes().iter().all(|&s| s >= 10));
    }

    #[test]
    fn ties_go_to_first_candidate() {
        let f = Folds::stratified(&[0; 9], 3, 0).unwrap();
        let sel = cv_select_by(2, &f, |_, _, test| Ok(test.len() as f64)).unwrap();
        assert_eq!(sel.index, 0);
        assert!(cv_select_by(0, &f, |_, _, _| Ok(0.0)).is_err());
    }
}
