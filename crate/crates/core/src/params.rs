//! Physical parameters of the two-species system and external tilts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Diffusion constants, reaction rates and the fast-reaction scale.
///
/// The untilted stationary weights are `w = (beta, alpha) / (alpha + beta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemParams {
    pub delta: [f64; 2],
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
}

impl SystemParams {
    pub fn new(delta: [f64; 2], alpha: f64, beta: f64, epsilon: f64) -> Result<Self> {
        let p = Self {
            delta,
            alpha,
            beta,
            epsilon,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Domain(format!("{name} must be positive and finite, got {v}")))
            }
        };
        positive("delta[0]", self.delta[0])?;
        positive("delta[1]", self.delta[1])?;
        positive("alpha", self.alpha)?;
        positive("beta", self.beta)?;
        positive("epsilon", self.epsilon)
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        Self { epsilon, ..*self }
    }

    /// Untilted stationary weights `(beta, alpha) / (alpha + beta)`.
    pub fn w(&self) -> [f64; 2] {
        let s = self.alpha + self.beta;
        [self.beta / s, self.alpha / s]
    }

    /// Mixed diffusion coefficient of the untilted fast-reaction limit.
    pub fn mixed_delta(&self) -> f64 {
        (self.beta * self.delta[0] + self.alpha * self.delta[1]) / (self.alpha + self.beta)
    }

    /// Untilted generator `[[-a, b], [a, -b]]` (column-sum zero), without the `1/epsilon`.
    pub fn reaction_rates(&self) -> (f64, f64) {
        ((self.alpha / self.beta).sqrt(), (self.beta / self.alpha).sqrt())
    }
}

/// Per-species potential sampled at cell centers and at faces.
#[derive(Debug, Clone, PartialEq)]
pub struct Tilt {
    cell: Vec<Vec<f64>>,
    face: Vec<Vec<f64>>,
}

impl Tilt {
    pub fn zero(grid: &Grid, n_species: usize) -> Self {
        Self {
            cell: vec![vec![0.0; grid.n_cells()]; n_species],
            face: vec![vec![0.0; grid.n_faces()]; n_species],
        }
    }

    /// Samples `v(species, x)` at cell centers and faces.
    pub fn from_fn<F>(grid: &Grid, n_species: usize, v: F) -> Result<Self>
    where
        F: Fn(usize, f64) -> f64,
    {
        let cell: Vec<Vec<f64>> = (0..n_species)
            .map(|i| grid.sample(|x| v(i, x)))
            .collect();
        let face: Vec<Vec<f64>> = (0..n_species)
            .map(|i| grid.sample_faces(|x| v(i, x)))
            .collect();
        let tilt = Self { cell, face };
        if tilt
            .cell
            .iter()
            .chain(tilt.face.iter())
            .flatten()
            .any(|x| !x.is_finite())
        {
            return Err(Error::Domain("tilt values must be finite".into()));
        }
        Ok(tilt)
    }

    pub fn n_species(&self) -> usize {
        self.cell.len()
    }

    pub fn cell(&self, species: usize) -> &[f64] {
        &self.cell[species]
    }

    pub fn face(&self, species: usize) -> &[f64] {
        &self.face[species]
    }

    pub fn check(&self, grid: &Grid, n_species: usize) -> Result<()> {
        if self.cell.len() != n_species
            || self.cell.iter().any(|v| v.len() != grid.n_cells())
            || self.face.iter().any(|v| v.len() != grid.n_faces())
        {
            return Err(Error::Shape(format!(
                "tilt does not match {n_species} species on {} cells",
                grid.n_cells()
            )));
        }
        Ok(())
    }

    /// Adds the same constant to every species.
    pub fn shifted(&self, kappa: f64) -> Self {
        let add = |v: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            v.iter()
                .map(|s| s.iter().map(|x| x + kappa).collect())
                .collect()
        };
        Self {
            cell: add(&self.cell),
            face: add(&self.face),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stationary_weights() {
        let p = SystemParams::new([1.0, 2.0], 1.0, 3.0, 0.1).unwrap();
        assert_eq!(p.w(), [0.75, 0.25]);
        assert_eq!(p.mixed_delta(), 1.25);
        let (a, b) = p.reaction_rates();
        // the untilted generator annihilates w
        assert!((-a * 0.75 + b * 0.25).abs() < 1e-15);
    }

    #[test]
    fn rejects_nonpositive() {
        assert!(SystemParams::new([0.0, 1.0], 1.0, 1.0, 1.0).is_err());
        assert!(SystemParams::new([1.0, 1.0], 1.0, 1.0, -1.0).is_err());
        assert!(SystemParams::new([1.0, 1.0], f64::NAN, 1.0, 1.0).is_err());
    }

    #[test]
    fn tilt_rejects_non_finite() {
        let g = Grid::new(4).unwrap();
        assert!(Tilt::from_fn(&g, 2, |_, x| 1.0 / (x - 0.5)).is_err());
        let t = Tilt::from_fn(&g, 2, |i, x| i as f64 + x).unwrap();
        assert_eq!(t.face(1)[4], 2.0);
    }
}
