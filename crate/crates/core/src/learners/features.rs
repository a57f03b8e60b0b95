//! Feature construction for outcome regressions.

use crate::data::Frame;
use crate::linalg::RowMatrix;

/// Layout of the outcome-regression design: `W`, encoded `C`, one indicator per
/// non-reference level of every treatment, then optionally the products of
/// indicator columns belonging to distinct treatments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutcomeFeatures {
    n_w: usize,
    n_c: usize,
    n_levels: Vec<usize>,
    interactions: bool,
}

impl OutcomeFeatures {
    pub fn new(n_w: usize, n_c: usize, n_levels: Vec<usize>, interactions: bool) -> Self {
        OutcomeFeatures {
            n_w,
            n_c,
            n_levels,
            interactions,
        }
    }

    pub fn for_frame(frame: &Frame, interactions: bool) -> Self {
        OutcomeFeatures::new(
            frame.w.ncols(),
            frame.c.ncols(),
            frame.treatments.iter().map(|t| t.levels.len()).collect(),
            interactions,
        )
    }

    pub fn width(&self) -> usize {
        let ind: Vec<usize> = self.n_levels.iter().map(|l| l.saturating_sub(1)).collect();
        let mut width = self.n_w + self.n_c + ind.iter().sum::<usize>();
        if self.interactions {
            for a in 0..ind.len() {
                for b in a + 1..ind.len() {
                    width += ind[a] * ind[b];
                }
            }
        }
        width
    }

    pub fn encode(&self, w: &[f64], c: &[f64], levels: &[u32], out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(w);
        out.extend_from_slice(c);
        let start = out.len();
        for (&l, &n) in levels.iter().zip(&self.n_levels) {
            for j in 1..n {
                out.push(if l as usize == j { 1.0 } else { 0.0 });
            }
        }
        if self.interactions {
            let mut offsets = Vec::with_capacity(levels.len());
            let mut o = start;
            for &n in &self.n_levels {
                offsets.push(o);
                o += n.saturating_sub(1);
            }
            for a in 0..levels.len() {
                for b in a + 1..levels.len() {
                    for i in 0..self.n_levels[a].saturating_sub(1) {
                        for j in 0..self.n_levels[b].saturating_sub(1) {
                            let v = out[offsets[a] + i] * out[offsets[b] + j];
                            out.push(v);
                        }
                    }
                }
            }
        }
    }

    /// Design matrix at the observed treatment levels for the given frame rows.
    pub fn design(&self, frame: &Frame, rows: &[usize]) -> RowMatrix {
        let mut data = Vec::with_capacity(rows.len() * self.width());
        let mut buf = Vec::with_capacity(self.width());
        for &i in rows {
            self.encode(
                frame.w.row(i),
                frame.c.row(i),
                &frame.joint_level(i),
                &mut buf,
            );
            data.extend_from_slice(&buf);
        }
        RowMatrix::from_vec(rows.len(), self.width(), data).expect("consistent widths")
    }
}
