//! Energies, stationary measures, the cosh pair `(C, C*)`, perspective
//! functions and the dual dissipation potentials.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::params::{SystemParams, Tilt};
use crate::state::State;

/// Absolute tolerance used for the constraint `xi_1 = xi_2` in [`r_eff_dual`].
pub const TOL_EQ: f64 = 1e-9;

/// Boltzmann function `r log r - r + 1`, extended by `1` at `r = 0`.
#[inline]
pub fn boltzmann(r: f64) -> f64 {
    if r == 0.0 {
        1.0
    } else {
        r * r.ln() - r + 1.0
    }
}

/// `C*(x) = 4 (cosh(x/2) - 1)`.
#[inline]
pub fn cosh_star(x: f64) -> f64 {
    // 4(cosh(y)-1) = 8 sinh(y/2)^2 avoids cancellation near zero.
    let s = (0.25 * x).sinh();
    8.0 * s * s
}

#[inline]
pub fn cosh_star_prime(x: f64) -> f64 {
    2.0 * (0.5 * x).sinh()
}

#[inline]
pub fn cosh_star_second(x: f64) -> f64 {
    (0.5 * x).cosh()
}

/// Legendre dual `C(s) = 2 s asinh(s/2) - 4 sqrt(1 + s^2/4) + 4`.
#[inline]
pub fn cosh_primal(s: f64) -> f64 {
    let s = s.abs();
    let q = 0.5 * s;
    let root = q.hypot(1.0);
    2.0 * s * q.asinh() - s * s / (root + 1.0)
}

#[inline]
pub fn cosh_primal_prime(s: f64) -> f64 {
    2.0 * (0.5 * s).asinh()
}

/// Smallest `k` with `C(r) >= |r|` for all `|r| >= k`.
pub fn cosh_growth_threshold() -> f64 {
    let (mut lo, mut hi) = (1.0_f64, 4.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cosh_primal(mid) < mid {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Base functions admitted by the perspective construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Base {
    /// `Q(x) = x^2 / 2`
    Quadratic,
    /// `C` from [`cosh_primal`]
    Cosh,
}

impl Base {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Base::Quadratic => 0.5 * x * x,
            Base::Cosh => cosh_primal(x),
        }
    }
}

/// `a F(x/a)` for `a > 0`; `0` or `+inf` at `a = 0`.
pub fn perspective_eval(base: Base, a: f64, x: f64) -> Result<f64> {
    if !(a >= 0.0) {
        return Err(Error::Domain(format!("perspective needs a >= 0, got {a}")));
    }
    Ok(perspective(base, a, x))
}

#[inline]
pub(crate) fn perspective(base: Base, a: f64, x: f64) -> f64 {
    if a == 0.0 {
        if x == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        match base {
            Base::Quadratic => 0.5 * x * x / a,
            Base::Cosh => a * cosh_primal(x / a),
        }
    }
}

/// Tilted stationary densities on cells and faces.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryMeasure {
    pub cell: Vec<Vec<f64>>,
    pub face: Vec<Vec<f64>>,
    /// Normalization `Z = sum_i int w_i e^{-V_i} dx`.
    pub z: f64,
}

impl StationaryMeasure {
    pub fn as_state(&self) -> State {
        State::from_raw(self.cell.clone())
    }
}

/// `w_i e^{-V_i} / Z` for arbitrary species weights `w`.
pub fn stationary_measure_weighted(grid: &Grid, w: &[f64], tilt: &Tilt) -> Result<StationaryMeasure> {
    tilt.check(grid, w.len())?;
    let raw = |vals: &[f64], wi: f64| -> Vec<f64> { vals.iter().map(|v| wi * (-v).exp()).collect() };
    let cell: Vec<Vec<f64>> = w.iter().enumerate().map(|(i, &wi)| raw(tilt.cell(i), wi)).collect();
    let face: Vec<Vec<f64>> = w.iter().enumerate().map(|(i, &wi)| raw(tilt.face(i), wi)).collect();
    let z: f64 = cell.iter().map(|s| grid.integrate(s)).sum();
    if !(z > 0.0 && z.is_finite()) {
        return Err(Error::Domain(format!("stationary normalization Z = {z}")));
    }
    let scale = |v: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        v.into_iter().map(|s| s.into_iter().map(|x| x / z).collect()).collect()
    };
    Ok(StationaryMeasure {
        cell: scale(cell),
        face: scale(face),
        z,
    })
}

pub fn stationary_measure(grid: &Grid, params: &SystemParams, tilt: &Tilt) -> Result<StationaryMeasure> {
    stationary_measure_weighted(grid, &params.w(), tilt)
}

/// `sum_j int [w_j E_B(c_j / w_j) + V_j c_j] dx` for arbitrary weights.
pub fn energy_weighted(grid: &Grid, state: &State, w: &[f64], tilt: &Tilt) -> Result<f64> {
    state.check_shape(grid, w.len())?;
    tilt.check(grid, w.len())?;
    let mut total = 0.0;
    for (i, &wi) in w.iter().enumerate() {
        let c = state.species(i);
        let v = tilt.cell(i);
        let mut acc = 0.0;
        for k in 0..c.len() {
            if c[k] < 0.0 {
                return Err(Error::Domain(format!("negative density in species {i}, cell {k}")));
            }
            acc += wi * boltzmann(c[k] / wi) + v[k] * c[k];
        }
        total += acc / grid.n_cells() as f64;
    }
    Ok(total)
}

pub fn energy(grid: &Grid, state: &State, params: &SystemParams, tilt: &Tilt) -> Result<f64> {
    energy_weighted(grid, state, &params.w(), tilt)
}

/// `xi_j = -(log(c_j / w_j) + V_j)` per cell; `+inf` where `c_j = 0`.
pub fn neg_energy_gradient_weighted(grid: &Grid, state: &State, w: &[f64], tilt: &Tilt) -> Result<Vec<Vec<f64>>> {
    state.check_shape(grid, w.len())?;
    tilt.check(grid, w.len())?;
    Ok(w.iter()
        .enumerate()
        .map(|(i, &wi)| {
            state
                .species(i)
                .iter()
                .zip(tilt.cell(i))
                .map(|(&c, &v)| -((c / wi).ln() + v))
                .collect()
        })
        .collect())
}

pub fn neg_energy_gradient(grid: &Grid, state: &State, params: &SystemParams, tilt: &Tilt) -> Result<Vec<Vec<f64>>> {
    neg_energy_gradient_weighted(grid, state, &params.w(), tilt)
}

/// Reaction edge `i <-> j` with constant weight `kappa` (for two species,
/// `kappa = 1/epsilon`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub kappa: f64,
}

/// Diffusion constants and reaction edges entering the dual potential.
#[derive(Debug, Clone, PartialEq)]
pub struct Mobility {
    pub delta: Vec<f64>,
    pub edges: Vec<Edge>,
}

impl Mobility {
    pub fn two_species(params: &SystemParams, epsilon: f64) -> Self {
        Self {
            delta: params.delta.to_vec(),
            edges: vec![Edge {
                i: 0,
                j: 1,
                kappa: 1.0 / epsilon,
            }],
        }
    }

    pub fn n_species(&self) -> usize {
        self.delta.len()
    }
}

fn check_field(grid: &Grid, field: &[Vec<f64>], n_species: usize, what: &str) -> Result<()> {
    if field.len() != n_species || field.iter().any(|s| s.len() != grid.n_cells()) {
        return Err(Error::Shape(format!("{what} does not match {n_species} species on {} cells", grid.n_cells())));
    }
    Ok(())
}

/// `1/2 sum_j delta_j sum_f h cbar_{j,f} |grad xi_j|^2` over interior faces.
pub fn dual_diffusion(grid: &Grid, state: &State, delta: &[f64], xi: &[Vec<f64>]) -> Result<f64> {
    state.check_shape(grid, delta.len())?;
    check_field(grid, xi, delta.len(), "xi")?;
    let h = grid.h();
    let mut total = 0.0;
    for (i, &d) in delta.iter().enumerate() {
        let c = state.species(i);
        let x = &xi[i];
        for f in 1..grid.n_cells() {
            let g = (x[f] - x[f - 1]) / h;
            total += 0.5 * d * 0.5 * (c[f] + c[f - 1]) * g * g * h;
        }
    }
    Ok(total)
}

/// `sum_edges kappa int C*(xi_i - xi_j) sqrt(c_i c_j) dx`.
pub fn dual_reaction(grid: &Grid, state: &State, edges: &[Edge], xi: &[Vec<f64>]) -> Result<f64> {
    let ns = state.n_species();
    state.check_shape(grid, ns)?;
    check_field(grid, xi, ns, "xi")?;
    let h = grid.h();
    let mut total = 0.0;
    for e in edges {
        let (ci, cj) = (state.species(e.i), state.species(e.j));
        for k in 0..grid.n_cells() {
            let m = (ci[k] * cj[k]).sqrt();
            if m > 0.0 {
                total += e.kappa * m * cosh_star(xi[e.i][k] - xi[e.j][k]) * h;
            }
        }
    }
    Ok(total)
}

pub fn dual_dissipation_general(grid: &Grid, state: &State, mobility: &Mobility, xi: &[Vec<f64>]) -> Result<f64> {
    Ok(dual_diffusion(grid, state, &mobility.delta, xi)? + dual_reaction(grid, state, &mobility.edges, xi)?)
}

/// `R*_eps(c, xi)`; `c` need not be normalized.
pub fn dual_dissipation(
    grid: &Grid,
    state: &State,
    params: &SystemParams,
    xi: &[Vec<f64>],
    epsilon: f64,
) -> Result<f64> {
    dual_dissipation_general(grid, state, &Mobility::two_species(params, epsilon), xi)
}

/// `R*_diff(c, xi)` if `xi_1 = xi_2` within [`TOL_EQ`], otherwise `+inf`.
pub fn r_eff_dual(grid: &Grid, state: &State, params: &SystemParams, xi: &[Vec<f64>]) -> Result<f64> {
    check_field(grid, xi, 2, "xi")?;
    let gap = xi[0].iter().zip(&xi[1]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if gap > TOL_EQ {
        return Ok(f64::INFINITY);
    }
    dual_diffusion(grid, state, &params.delta, xi)
}

/// Diffusive and reactive Fisher-information terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Slope {
    pub diff: f64,
    pub react: f64,
}

/// Slope terms for arbitrary species given the stationary measure.
pub fn slope_general(grid: &Grid, state: &State, mobility: &Mobility, wv: &StationaryMeasure) -> Result<Slope> {
    let ns = mobility.n_species();
    state.check_shape(grid, ns)?;
    check_field(grid, &wv.cell, ns, "stationary measure")?;
    let h = grid.h();
    let rho: Vec<Vec<f64>> = (0..ns)
        .map(|i| state.species(i).iter().zip(&wv.cell[i]).map(|(c, w)| c / w).collect())
        .collect();
    let mut diff = 0.0;
    for i in 0..ns {
        let r = &rho[i];
        for f in 1..grid.n_cells() {
            let g = (r[f] - r[f - 1]) / h;
            let rbar = 0.5 * (r[f] + r[f - 1]);
            if g != 0.0 {
                diff += 0.5 * mobility.delta[i] * wv.face[i][f] * g * g / rbar * h;
            }
        }
    }
    let mut react = 0.0;
    for e in &mobility.edges {
        for k in 0..grid.n_cells() {
            let d = rho[e.i][k].sqrt() - rho[e.j][k].sqrt();
            react += 2.0 * e.kappa * (wv.cell[e.i][k] * wv.cell[e.j][k]).sqrt() * d * d * h;
        }
    }
    Ok(Slope { diff, react })
}

pub fn slope(grid: &Grid, state: &State, params: &SystemParams, tilt: &Tilt, epsilon: f64) -> Result<Slope> {
    let wv = stationary_measure(grid, params, tilt)?;
    slope_general(grid, state, &Mobility::two_species(params, epsilon), &wv)
}
