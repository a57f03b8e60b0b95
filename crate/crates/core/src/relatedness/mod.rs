//! Genetic relatedness and dependence-corrected variance.

pub mod grm;
pub mod svp;

use crate::error::{Error, Result};

pub use grm::{compute_grm, Genotypes, Grm};
pub use svp::{default_grid, select_plateau, svp_ci, svp_curve, PlateauRule, SvpCurve};

/// Pairwise dissimilarity between individuals.
pub trait Distance: Sync {
    fn n(&self) -> usize;
    fn distance(&self, i: usize, j: usize) -> f64;
}

/// `d(i, j) = 1 - G_ij`, passed through without clamping.
impl Distance for Grm {
    fn n(&self) -> usize {
        Grm::n(self)
    }

    fn distance(&self, i: usize, j: usize) -> f64 {
        1.0 - self.get(i, j)
    }
}

/// Checked accessor for the genetic distance of two individuals.
pub fn genetic_distance(grm: &Grm, i: usize, j: usize) -> Result<f64> {
    if i >= grm.n() || j >= grm.n() {
        return Err(Error::invalid(format!(
            "individual index ({i}, {j}) out of range for n = {}",
            grm.n()
        )));
    }
    Ok(Distance::distance(grm, i, j))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distance_examples() {
        let g = Grm::from_dense(&[
            vec![1.0, 1.0, 0.0],
            vec![1.0, 1.0, -1.0],
            vec![0.0, -1.0, 1.0],
        ])
        .unwrap();
        assert_eq!(genetic_distance(&g, 0, 1).unwrap(), 0.0);
        assert_eq!(genetic_distance(&g, 0, 2).unwrap(), 1.0);
        assert_eq!(genetic_distance(&g, 2, 1).unwrap(), 2.0);
        assert!(genetic_distance(&g, 3, 0).is_err());
    }
}
