//! Densities, trajectories, flux assignments and the discrete generalized
//! continuity equation `dc_j/dt = -div J_j + b_j`.

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Per-species cell densities.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    c: Vec<Vec<f64>>,
}

impl State {
    /// Builds a state after checking shapes, finiteness and nonnegativity.
    /// Total mass is not enforced here; see [`State::check_probability`].
    pub fn new(grid: &Grid, c: Vec<Vec<f64>>) -> Result<Self> {
        if c.is_empty() {
            return Err(Error::Shape("state needs at least one species".into()));
        }
        for (i, s) in c.iter().enumerate() {
            if s.len() != grid.n_cells() {
                return Err(Error::Shape(format!(
                    "species {i} has {} cells, grid has {}",
                    s.len(),
                    grid.n_cells()
                )));
            }
            if let Some(k) = s.iter().position(|x| !x.is_finite()) {
                return Err(Error::Domain(format!("non-finite density in species {i}, cell {k}")));
            }
            if let Some(k) = s.iter().position(|&x| x < 0.0) {
                return Err(Error::Domain(format!(
                    "negative density {} in species {i}, cell {k}",
                    s[k]
                )));
            }
        }
        Ok(Self { c })
    }

    /// Wraps densities without validation. Callers guarantee the invariants.
    pub(crate) fn from_raw(c: Vec<Vec<f64>>) -> Self {
        Self { c }
    }

    pub fn uniform(grid: &Grid, values: &[f64]) -> Self {
        Self {
            c: values.iter().map(|&v| vec![v; grid.n_cells()]).collect(),
        }
    }

    pub fn n_species(&self) -> usize {
        self.c.len()
    }

    pub fn n_cells(&self) -> usize {
        self.c[0].len()
    }

    pub fn species(&self, i: usize) -> &[f64] {
        &self.c[i]
    }

    pub fn densities(&self) -> &[Vec<f64>] {
        &self.c
    }

    pub fn into_densities(self) -> Vec<Vec<f64>> {
        self.c
    }

    pub fn min_density(&self) -> f64 {
        self.c.iter().flatten().copied().fold(f64::INFINITY, f64::min)
    }

    /// Checks membership in the probability simplex up to `tol` in total mass.
    pub fn check_probability(&self, grid: &Grid, tol: f64) -> Result<()> {
        let m = total_mass(grid, self);
        if (m - 1.0).abs() > tol {
            return Err(Error::Domain(format!("total mass {m} differs from 1")));
        }
        Ok(())
    }

    pub(crate) fn check_shape(&self, grid: &Grid, n_species: usize) -> Result<()> {
        if self.c.len() != n_species || self.c.iter().any(|s| s.len() != grid.n_cells()) {
            return Err(Error::Shape(format!(
                "expected {n_species} species on {} cells",
                grid.n_cells()
            )));
        }
        Ok(())
    }
}

/// `sum_i sum_k c_{i,k} h`.
pub fn total_mass(grid: &Grid, state: &State) -> f64 {
    state.c.iter().map(|s| grid.integrate(s)).sum()
}

/// Diffusion fluxes on faces and reaction fluxes in cells for one time interval.
#[derive(Debug, Clone, PartialEq)]
pub struct FluxAssignment {
    /// Per species, `n_cells + 1` face values; the boundary entries are zero.
    pub j: Vec<Vec<f64>>,
    /// Per species, `n_cells` cell values.
    pub b: Vec<Vec<f64>>,
}

impl FluxAssignment {
    pub fn zeros(grid: &Grid, n_species: usize) -> Self {
        Self {
            j: vec![vec![0.0; grid.n_faces()]; n_species],
            b: vec![vec![0.0; grid.n_cells()]; n_species],
        }
    }

    pub fn check(&self, grid: &Grid, n_species: usize) -> Result<()> {
        if self.j.len() != n_species
            || self.b.len() != n_species
            || self.j.iter().any(|v| v.len() != grid.n_faces())
            || self.b.iter().any(|v| v.len() != grid.n_cells())
        {
            return Err(Error::Shape("flux assignment does not match grid/species".into()));
        }
        let nf = grid.n_cells();
        if self.j.iter().any(|v| v[0] != 0.0 || v[nf] != 0.0) {
            return Err(Error::Domain("boundary faces must carry zero flux".into()));
        }
        Ok(())
    }

    /// Largest cellwise `|sum_i b_i|` (the reaction balance defect).
    pub fn reaction_balance_defect(&self) -> f64 {
        let n = self.b[0].len();
        (0..n)
            .map(|k| self.b.iter().map(|b| b[k]).sum::<f64>().abs())
            .fold(0.0, f64::max)
    }
}

/// A time series of states with optional per-interval fluxes.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid: Grid,
    pub times: Vec<f64>,
    pub states: Vec<State>,
    pub fluxes: Option<Vec<FluxAssignment>>,
}

impl Trajectory {
    pub fn new(
        grid: Grid,
        times: Vec<f64>,
        states: Vec<State>,
        fluxes: Option<Vec<FluxAssignment>>,
    ) -> Result<Self> {
        if times.is_empty() || times.len() != states.len() {
            return Err(Error::Shape(format!(
                "{} times for {} states",
                times.len(),
                states.len()
            )));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Domain("times must be strictly increasing".into()));
        }
        let ns = states[0].n_species();
        for s in &states {
            s.check_shape(&grid, ns)?;
        }
        if let Some(f) = &fluxes {
            if f.len() + 1 != states.len() {
                return Err(Error::Shape(format!(
                    "{} flux intervals for {} states",
                    f.len(),
                    states.len()
                )));
            }
            for fa in f {
                fa.check(&grid, ns)?;
            }
        }
        Ok(Self {
            grid,
            times,
            states,
            fluxes,
        })
    }

    pub fn n_species(&self) -> usize {
        self.states[0].n_species()
    }

    pub fn n_intervals(&self) -> usize {
        self.times.len() - 1
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn first(&self) -> &State {
        &self.states[0]
    }

    pub fn last(&self) -> &State {
        self.states.last().unwrap()
    }
}

/// Residual `r[m][j][k]` of the discrete gCE on interval `m`, species `j`, cell `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct GceResidual(pub Vec<Vec<Vec<f64>>>);

impl GceResidual {
    pub fn max_abs(&self) -> f64 {
        self.0.iter().flatten().flatten().map(|x| x.abs()).fold(0.0, f64::max)
    }
}

/// Cellwise rate `(c1 - c0)/dt + (J_{k+1} - J_k)/h`; [`gce_residual`] subtracts `b`
/// from exactly this expression.
#[inline]
pub(crate) fn rate_plus_divergence(c0: f64, c1: f64, dt: f64, j_left: f64, j_right: f64, h: f64) -> f64 {
    (c1 - c0) / dt + (j_right - j_left) / h
}

pub fn gce_residual(traj: &Trajectory) -> Result<GceResidual> {
    let fluxes = traj.fluxes.as_ref().ok_or(Error::NoFluxData)?;
    let grid = &traj.grid;
    let h = grid.h();
    let mut out = Vec::with_capacity(fluxes.len());
    for (m, fa) in fluxes.iter().enumerate() {
        let dt = traj.times[m + 1] - traj.times[m];
        let (s0, s1) = (&traj.states[m], &traj.states[m + 1]);
        if fa.j.len() != s0.n_species() {
            return Err(Error::Shape(format!("interval {m}: flux species count")));
        }
        let per_species = (0..s0.n_species())
            .map(|i| {
                (0..grid.n_cells())
                    .map(|k| {
                        rate_plus_divergence(
                            s0.species(i)[k],
                            s1.species(i)[k],
                            dt,
                            fa.j[i][k],
                            fa.j[i][k + 1],
                            h,
                        ) - fa.b[i][k]
                    })
                    .collect()
            })
            .collect();
        out.push(per_species);
    }
    Ok(GceResidual(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Grid {
        Grid::new(6).unwrap()
    }

    #[test]
    fn mass_of_uniform_and_empty() {
        let g = grid();
        assert_eq!(total_mass(&g, &State::uniform(&g, &[0.5, 0.5])), 1.0);
        assert_eq!(total_mass(&g, &State::uniform(&g, &[0.0, 0.0])), 0.0);
    }

    #[test]
    fn state_rejects_negative_and_bad_shape() {
        let g = grid();
        assert!(State::new(&g, vec![vec![0.1; 6], vec![-0.1; 6]]).is_err());
        assert!(State::new(&g, vec![vec![0.1; 5]]).is_err());
        assert!(State::new(&g, vec![]).is_err());
    }

    #[test]
    fn static_trajectory_has_zero_residual() {
        let g = grid();
        let s = State::uniform(&g, &[0.5, 0.5]);
        let traj = Trajectory::new(
            g,
            vec![0.0, 0.1, 0.2],
            vec![s.clone(), s.clone(), s],
            Some(vec![FluxAssignment::zeros(&g, 2); 2]),
        )
        .unwrap();
        assert_eq!(gce_residual(&traj).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn single_cell_exchange_balances() {
        let g = grid();
        let dt = 0.25;
        let dm = 0.03;
        let s0 = State::uniform(&g, &[0.5, 0.5]);
        let mut c = s0.clone().into_densities();
        c[0][2] += dm;
        c[1][2] -= dm;
        let s1 = State::new(&g, c).unwrap();
        let mut fa = FluxAssignment::zeros(&g, 2);
        fa.b[0][2] = dm / dt;
        fa.b[1][2] = -dm / dt;
        let traj = Trajectory::new(g, vec![0.0, dt], vec![s0, s1], Some(vec![fa])).unwrap();
        assert!(gce_residual(&traj).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn missing_fluxes_reported() {
        let g = grid();
        let s = State::uniform(&g, &[1.0]);
        let traj = Trajectory::new(g, vec![0.0, 1.0], vec![s.clone(), s], None).unwrap();
        assert!(matches!(gce_residual(&traj), Err(Error::NoFluxData)));
    }

    #[test]
    fn trajectory_shape_errors() {
        let g = grid();
        let s = State::uniform(&g, &[1.0]);
        assert!(Trajectory::new(g, vec![0.0, 0.0], vec![s.clone(), s.clone()], None).is_err());
        assert!(Trajectory::new(g, vec![0.0], vec![s.clone(), s.clone()], None).is_err());
        let mut bad = FluxAssignment::zeros(&g, 1);
        bad.j[0][0] = 1.0;
        assert!(Trajectory::new(g, vec![0.0, 1.0], vec![s.clone(), s], Some(vec![bad])).is_err());
    }
}
