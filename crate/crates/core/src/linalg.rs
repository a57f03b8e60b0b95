//! Small dense helpers shared by the learners and the inference code.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Row-major dense matrix. Rows are contiguous so per-observation feature
/// vectors can be borrowed as slices.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RowMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        RowMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                what: "matrix data".into(),
                left: data.len(),
                right: rows * cols,
            });
        }
        Ok(RowMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::LengthMismatch {
                    what: "matrix row".into(),
                    left: r.len(),
                    right: cols,
                });
            }
            data.extend_from_slice(r);
        }
        Ok(RowMatrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// New matrix holding the given rows, in order.
    pub fn select_rows(&self, idx: &[usize]) -> RowMatrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        RowMatrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Solves `a x = b` for symmetric positive (semi)definite `a`, followed by one
/// round of iterative refinement. Falls back to LU when Cholesky fails and
/// reports singularity with the numerical rank.
pub fn solve_symmetric(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let dim = a.nrows();
    if dim == 0 {
        return Ok(DVector::zeros(0));
    }
    let solve = |rhs: &DVector<f64>| -> Option<DVector<f64>> {
        if let Some(ch) = a.clone().cholesky() {
            Some(ch.solve(rhs))
        } else {
            a.clone().lu().solve(rhs)
        }
    };
    let mut x = solve(b).ok_or_else(|| Error::Singular {
        rank: numerical_rank(a),
        dim,
    })?;
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::Singular {
            rank: numerical_rank(a),
            dim,
        });
    }
    let r = b - a * &x;
    if let Some(dx) = solve(&r) {
        if dx.iter().all(|v| v.is_finite()) {
            x += dx;
        }
    }
    Ok(x)
}

/// Rank from singular values with the usual `eps * max(dim) * s_max` cutoff.
pub fn numerical_rank(a: &DMatrix<f64>) -> usize {
    let sv = a.clone().singular_values();
    let smax = sv.iter().cloned().fold(0.0_f64, f64::max);
    if smax == 0.0 {
        return 0;
    }
    let tol = f64::EPSILON * (a.nrows().max(a.ncols()) as f64) * smax;
    sv.iter().filter(|&&s| s > tol).count()
}

/// Ratio of the largest to the smallest singular value.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().singular_values();
    let smax = sv.iter().cloned().fold(0.0_f64, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if smin == 0.0 {
        f64::INFINITY
    } else {
        smax / smin
    }
}

/// Neumaier-compensated sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    compensated_sum(values.iter().copied()) / values.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_spd_system() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let b = DVector::from_vec(vec![1.0, 2.0]);
        let x = solve_symmetric(&a, &b).unwrap();
        let r = &a * &x - &b;
        assert!(r.norm() < 1e-14);
    }

    #[test]
    fn singular_reports_rank() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 2.0]);
        match solve_symmetric(&a, &b) {
            Err(Error::Singular { rank, dim }) => {
                assert_eq!(rank, 1);
                assert_eq!(dim, 2);
            }
            other => panic!("expected singular, got {other:?}"),
        }
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let v = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(v), 2.0);
    }
}
