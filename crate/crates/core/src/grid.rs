//! Uniform 1-D finite-volume grid on `[0, 1]`.
//!
//! Cell `k` covers `[k h, (k+1) h]`; face `k` sits at `x = k h`, so there are
//! `n_cells + 1` faces and faces `0` and `n_cells` are the no-flux boundary.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    n_cells: usize,
}

impl Grid {
    pub fn new(n_cells: usize) -> Result<Self> {
        if n_cells < 2 {
            return Err(Error::Domain(format!(
                "grid needs at least 2 cells, got {n_cells}"
            )));
        }
        Ok(Self { n_cells })
    }

    #[inline]
    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    #[inline]
    pub fn n_faces(&self) -> usize {
        self.n_cells + 1
    }

    /// Cell width.
    #[inline]
    pub fn h(&self) -> f64 {
        1.0 / self.n_cells as f64
    }

    #[inline]
    pub fn center(&self, k: usize) -> f64 {
        (k as f64 + 0.5) / self.n_cells as f64
    }

    #[inline]
    pub fn face(&self, k: usize) -> f64 {
        k as f64 / self.n_cells as f64
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n_cells).map(|k| self.center(k)).collect()
    }

    pub fn faces(&self) -> Vec<f64> {
        (0..self.n_faces()).map(|k| self.face(k)).collect()
    }

    /// Midpoint quadrature of a cell field. Divides by `n` instead of
    /// multiplying by `h` so that constant fields integrate exactly.
    pub fn integrate(&self, cells: &[f64]) -> f64 {
        debug_assert_eq!(cells.len(), self.n_cells);
        cells.iter().sum::<f64>() / self.n_cells as f64
    }

    /// Quadrature over faces for face-supported densities (each face carries
    /// weight `h`; boundary faces are included but normally hold zero).
    pub fn integrate_faces(&self, faces: &[f64]) -> f64 {
        debug_assert_eq!(faces.len(), self.n_faces());
        faces.iter().sum::<f64>() / self.n_cells as f64
    }

    /// Cellwise divergence `(F_{k+1} - F_k) / h` of a face field.
    pub fn divergence(&self, flux: &[f64]) -> Vec<f64> {
        debug_assert_eq!(flux.len(), self.n_faces());
        let h = self.h();
        flux.windows(2).map(|w| (w[1] - w[0]) / h).collect()
    }

    /// Face gradient of a cell field; zero on both boundary faces.
    pub fn gradient(&self, cells: &[f64]) -> Vec<f64> {
        debug_assert_eq!(cells.len(), self.n_cells);
        let h = self.h();
        let mut g = vec![0.0; self.n_faces()];
        for f in 1..self.n_cells {
            g[f] = (cells[f] - cells[f - 1]) / h;
        }
        g
    }

    /// Arithmetic mean of adjacent cells on interior faces; zero on the boundary.
    pub fn face_mean(&self, cells: &[f64]) -> Vec<f64> {
        debug_assert_eq!(cells.len(), self.n_cells);
        let mut m = vec![0.0; self.n_faces()];
        for f in 1..self.n_cells {
            m[f] = 0.5 * (cells[f] + cells[f - 1]);
        }
        m
    }

    pub fn sample<F: Fn(f64) -> f64>(&self, f: F) -> Vec<f64> {
        (0..self.n_cells).map(|k| f(self.center(k))).collect()
    }

    pub fn sample_faces<F: Fn(f64) -> f64>(&self, f: F) -> Vec<f64> {
        (0..self.n_faces()).map(|k| f(self.face(k))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_single_cell() {
        assert!(Grid::new(1).is_err());
        assert!(Grid::new(0).is_err());
    }

    #[test]
    fn unit_measure() {
        for n in [2, 3, 7, 10, 64, 200, 1000] {
            let g = Grid::new(n).unwrap();
            assert_eq!(g.integrate(&vec![1.0; n]), 1.0);
            assert_eq!(g.n_faces(), n + 1);
            assert_eq!(g.face(n), 1.0);
        }
    }

    #[test]
    fn divergence_of_zero_boundary_flux_telescopes() {
        let g = Grid::new(17).unwrap();
        let mut flux = g.sample_faces(|x| (3.0 * x).sin() + x * x);
        flux[0] = 0.0;
        flux[17] = 0.0;
        let total = g.integrate(&g.divergence(&flux));
        assert!(total.abs() < 1e-14, "{total}");
    }

    #[test]
    fn gradient_vanishes_on_boundary() {
        let g = Grid::new(5).unwrap();
        let grad = g.gradient(&g.sample(|x| x * x));
        assert_eq!(grad[0], 0.0);
        assert_eq!(grad[5], 0.0);
        assert!((grad[2] - 2.0 * 0.4).abs() < 1e-12);
    }
}
