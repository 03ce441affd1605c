//! Time integration of the tilted two-species system, of the coarse-grained
//! effective equation and of general I-species networks.
//!
//! Every step is a splitting of an exact cellwise reaction exponential and a
//! backward-Euler (or Crank-Nicolson) drift-diffusion solve. The drift-diffusion
//! flux is of Scharfetter-Gummel type, so `w e^{-V}` is an exact discrete
//! steady state. Fluxes are recorded per step and the state update is written
//! as `c_new = c_old - dt div J + dt b`, which keeps mass exact.

use serde::{Deserialize, Serialize};

use crate::coarsegrain::coarse_params;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::linalg::{expm, solve_tridiagonal};
use crate::params::{SystemParams, Tilt};
use crate::state::{FluxAssignment, State, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Half reaction, full drift-diffusion, half reaction.
    #[default]
    StrangExactReaction,
    /// Full reaction followed by full drift-diffusion (first order).
    ImexEuler,
}

fn default_record_every() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub dt: f64,
    pub t_final: f64,
    #[serde(default)]
    pub scheme: Scheme,
    /// Store every k-th state; fluxes are averaged over the skipped steps.
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    /// Crank-Nicolson instead of backward Euler for drift-diffusion.
    #[serde(default)]
    pub crank_nicolson: bool,
}

impl SolverConfig {
    pub fn new(dt: f64, t_final: f64) -> Result<Self> {
        let c = Self {
            dt,
            t_final,
            scheme: Scheme::default(),
            record_every: 1,
            crank_nicolson: false,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn with_scheme(self, scheme: Scheme) -> Self {
        Self { scheme, ..self }
    }

    pub fn with_record_every(self, record_every: usize) -> Self {
        Self { record_every, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Domain(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_final >= self.dt * (1.0 - 1e-12)) || !self.t_final.is_finite() {
            return Err(Error::Domain(format!(
                "final time {} must be at least dt = {}",
                self.t_final, self.dt
            )));
        }
        if self.record_every == 0 {
            return Err(Error::Domain("record_every must be at least 1".into()));
        }
        Ok(())
    }

    /// Step end times: uniform `dt`, the last step shortened to land on `t_final`.
    pub fn step_times(&self) -> Vec<f64> {
        let n = ((self.t_final / self.dt) - 1e-9).ceil().max(1.0) as usize;
        let mut t: Vec<f64> = (0..=n).map(|m| m as f64 * self.dt).collect();
        t[n] = self.t_final;
        t
    }
}

/// `x / (e^x - 1)`.
#[inline]
pub(crate) fn bernoulli(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0 - 0.5 * x
    } else {
        x / x.exp_m1()
    }
}

/// Scharfetter-Gummel drift-diffusion operator for one species.
#[derive(Debug, Clone)]
struct DriftDiffusion {
    h: f64,
    /// Face coefficients `delta_f B(V_R - V_L)` and `delta_f B(V_L - V_R)`.
    dp: Vec<f64>,
    dm: Vec<f64>,
}

impl DriftDiffusion {
    fn new(grid: &Grid, face_delta: &[f64], v: &[f64]) -> Self {
        let n = grid.n_cells();
        let mut dp = vec![0.0; n + 1];
        let mut dm = vec![0.0; n + 1];
        for f in 1..n {
            let dv = v[f] - v[f - 1];
            dp[f] = face_delta[f] * bernoulli(dv);
            dm[f] = face_delta[f] * bernoulli(-dv);
        }
        Self { h: grid.h(), dp, dm }
    }

    /// `J_f = -(1/h) (dm_f c_R - dp_f c_L)`, zero on the boundary.
    fn flux(&self, c: &[f64]) -> Vec<f64> {
        let n = c.len();
        let mut j = vec![0.0; n + 1];
        for f in 1..n {
            j[f] = -(self.dm[f] * c[f] - self.dp[f] * c[f - 1]) / self.h;
        }
        j
    }

    /// Solves `(I + theta dt L) c_new = (I - (1-theta) dt L) c_old` with
    /// `L c = div J(c)` and returns the time-averaged face flux.
    fn advance(&self, c: &[f64], dt: f64, theta: f64) -> Result<Vec<f64>> {
        let n = c.len();
        let r = theta * dt / (self.h * self.h);
        let mut lower = vec![0.0; n];
        let mut diag = vec![1.0; n];
        let mut upper = vec![0.0; n];
        for k in 0..n {
            if k + 1 < n {
                diag[k] += r * self.dp[k + 1];
                upper[k] = -r * self.dm[k + 1];
            }
            if k > 0 {
                diag[k] += r * self.dm[k];
                lower[k] = -r * self.dp[k];
            }
        }
        let j_old = if theta < 1.0 { Some(self.flux(c)) } else { None };
        let rhs: Vec<f64> = match &j_old {
            Some(j) => (0..n)
                .map(|k| c[k] - (1.0 - theta) * dt * (j[k + 1] - j[k]) / self.h)
                .collect(),
            None => c.to_vec(),
        };
        let c_new = solve_tridiagonal(&lower, &diag, &upper, &rhs)?;
        let mut j = self.flux(&c_new);
        if let Some(j_old) = j_old {
            for (a, b) in j.iter_mut().zip(&j_old) {
                *a = theta * *a + (1.0 - theta) * b;
            }
        }
        Ok(j)
    }
}

#[derive(Debug, Clone)]
enum Reaction {
    None,
    /// Cellwise `[[-a, b], [a, -b]]` (rates already include `1/epsilon`).
    Pair { a: Vec<f64>, b: Vec<f64> },
    /// Same generator in every cell.
    Dense { gen: Vec<Vec<f64>>, cache: Vec<(f64, Vec<Vec<f64>>)> },
}

impl Reaction {
    /// Applies `exp(tau A)` cellwise and accumulates `c_new - c_old` into `acc`.
    fn apply(&mut self, c: &mut [Vec<f64>], tau: f64, acc: &mut [Vec<f64>]) {
        match self {
            Reaction::None => {}
            Reaction::Pair { a, b } => {
                for k in 0..a.len() {
                    let (c1, c2) = (c[0][k], c[1][k]);
                    let s = a[k] + b[k];
                    let f = -(-s * tau).exp_m1();
                    let (pa, pb) = (f * a[k] / s, f * b[k] / s);
                    let c1n = c1 * (1.0 - pa) + pb * c2;
                    let d = c1n - c1;
                    c[0][k] = c1n;
                    c[1][k] = (c2 - d).max(0.0);
                    acc[0][k] += d;
                    acc[1][k] -= d;
                }
            }
            Reaction::Dense { gen, cache } => {
                let e = match cache.iter().find(|(t, _)| *t == tau) {
                    Some((_, e)) => e.clone(),
                    None => {
                        let e = expm(gen, tau);
                        cache.push((tau, e.clone()));
                        e
                    }
                };
                let ns = c.len();
                let mut old = vec![0.0; ns];
                for k in 0..c[0].len() {
                    for i in 0..ns {
                        old[i] = c[i][k];
                    }
                    for i in 0..ns {
                        let v: f64 = (0..ns).map(|j| e[i][j] * old[j]).sum();
                        let v = v.max(0.0);
                        acc[i][k] += v - old[i];
                        c[i][k] = v;
                    }
                }
            }
        }
    }
}

/// Incremental integrator; [`Stepper::step`] returns the fluxes of one step.
#[derive(Debug, Clone)]
pub struct Stepper {
    grid: Grid,
    c: Vec<Vec<f64>>,
    t: f64,
    steps: usize,
    scheme: Scheme,
    theta: f64,
    ops: Vec<DriftDiffusion>,
    reaction: Reaction,
}

impl Stepper {
    fn build(
        grid: &Grid,
        initial: &State,
        face_delta: Vec<Vec<f64>>,
        potential: Vec<Vec<f64>>,
        reaction: Reaction,
        config: &SolverConfig,
    ) -> Result<Self> {
        config.validate()?;
        initial.check_shape(grid, face_delta.len())?;
        if initial.densities().iter().flatten().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::Domain("initial state must be finite and nonnegative".into()));
        }
        let ops = face_delta
            .iter()
            .zip(&potential)
            .map(|(d, v)| DriftDiffusion::new(grid, d, v))
            .collect();
        Ok(Self {
            grid: *grid,
            c: initial.densities().to_vec(),
            t: 0.0,
            steps: 0,
            scheme: config.scheme,
            theta: if config.crank_nicolson { 0.5 } else { 1.0 },
            ops,
            reaction,
        })
    }

    /// Tilted two-species system with rates `a/eps`, `b/eps`.
    pub fn eps_system(
        grid: &Grid,
        initial: &State,
        params: &SystemParams,
        tilt: &Tilt,
        config: &SolverConfig,
    ) -> Result<Self> {
        params.validate()?;
        tilt.check(grid, 2)?;
        let (ra, rb) = params.reaction_rates();
        let inv = 1.0 / params.epsilon;
        let (v1, v2) = (tilt.cell(0), tilt.cell(1));
        let a = (0..grid.n_cells()).map(|k| inv * ra * (0.5 * (v1[k] - v2[k])).exp()).collect();
        let b = (0..grid.n_cells()).map(|k| inv * rb * (0.5 * (v2[k] - v1[k])).exp()).collect();
        let face_delta = params.delta.iter().map(|&d| const_faces(grid, d)).collect();
        let potential = vec![v1.to_vec(), v2.to_vec()];
        Self::build(grid, initial, face_delta, potential, Reaction::Pair { a, b }, config)
    }

    /// Coarse-grained equation `dc/dt = div(dhat grad c + dhat c grad Vhat)`.
    pub fn effective(
        grid: &Grid,
        initial_hat: &State,
        params: &SystemParams,
        tilt: &Tilt,
        config: &SolverConfig,
    ) -> Result<Self> {
        let cp = coarse_params(grid, params, tilt)?;
        let fd = grid.face_mean(&cp.delta_hat);
        Self::build(grid, initial_hat, vec![fd], vec![cp.v_hat], Reaction::None, config)
    }

    /// I species with a constant column-sum-zero generator and diffusion constants.
    pub fn network(
        grid: &Grid,
        initial: &State,
        generator: Vec<Vec<f64>>,
        delta: &[f64],
        tilt: &Tilt,
        config: &SolverConfig,
    ) -> Result<Self> {
        let ns = delta.len();
        if generator.len() != ns || generator.iter().any(|r| r.len() != ns) {
            return Err(Error::Shape("generator must be I x I".into()));
        }
        tilt.check(grid, ns)?;
        let face_delta = delta.iter().map(|&d| const_faces(grid, d)).collect();
        let potential = (0..ns).map(|i| tilt.cell(i).to_vec()).collect();
        let reaction = Reaction::Dense {
            gen: generator,
            cache: Vec::new(),
        };
        Self::build(grid, initial, face_delta, potential, reaction, config)
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn densities(&self) -> &[Vec<f64>] {
        &self.c
    }

    pub fn state(&self) -> State {
        State::from_raw(self.c.clone())
    }

    /// Advances by `dt` and returns the step's fluxes.
    pub fn step(&mut self, dt: f64) -> Result<FluxAssignment> {
        let ns = self.c.len();
        let n = self.grid.n_cells();
        let h = self.grid.h();
        let start = self.c.clone();
        let mut exch = vec![vec![0.0; n]; ns];
        let mut work = self.c.clone();
        match self.scheme {
            Scheme::StrangExactReaction => self.reaction.apply(&mut work, 0.5 * dt, &mut exch),
            Scheme::ImexEuler => self.reaction.apply(&mut work, dt, &mut exch),
        }
        let mut j = Vec::with_capacity(ns);
        for (i, op) in self.ops.iter().enumerate() {
            let ji = op.advance(&work[i], dt, self.theta).map_err(|e| Error::Integration {
                step: self.steps,
                reason: e.to_string(),
            })?;
            for k in 0..n {
                work[i][k] = (work[i][k] - dt * (ji[k + 1] - ji[k]) / h).max(0.0);
            }
            j.push(ji);
        }
        if self.scheme == Scheme::StrangExactReaction {
            self.reaction.apply(&mut work, 0.5 * dt, &mut exch);
        }
        let b: Vec<Vec<f64>> = exch.iter().map(|e| e.iter().map(|x| x / dt).collect()).collect();
        // Conservative form of the whole step.
        for i in 0..ns {
            for k in 0..n {
                work[i][k] = (start[i][k] - dt * (j[i][k + 1] - j[i][k]) / h + dt * b[i][k]).max(0.0);
            }
        }
        if let Some((i, k)) = (0..ns)
            .flat_map(|i| (0..n).map(move |k| (i, k)))
            .find(|&(i, k)| !work[i][k].is_finite())
        {
            return Err(Error::Integration {
                step: self.steps,
                reason: format!("non-finite density in species {i}, cell {k}"),
            });
        }
        self.c = work;
        self.t += dt;
        self.steps += 1;
        Ok(FluxAssignment { j, b })
    }
}

fn const_faces(grid: &Grid, d: f64) -> Vec<f64> {
    let mut f = vec![d; grid.n_faces()];
    f[0] = 0.0;
    f[grid.n_cells()] = 0.0;
    f
}

/// Runs a stepper over the configured time grid and records a trajectory.
pub fn integrate(stepper: Stepper, config: &SolverConfig) -> Result<Trajectory> {
    integrate_on(stepper, &config.step_times(), config.record_every)
}

/// Step end times starting at `dt0` and growing geometrically up to `dt_max`,
/// the last step shortened to land on `t_final`.
pub fn graded_times(dt0: f64, growth: f64, dt_max: f64, t_final: f64) -> Result<Vec<f64>> {
    if !(dt0 > 0.0 && growth >= 1.0 && dt_max >= dt0 && t_final > 0.0) || !(t_final.is_finite() && growth.is_finite()) {
        return Err(Error::Domain(format!(
            "graded steps need 0 < dt0 <= dt_max, growth >= 1, t_final > 0 (got {dt0}, {growth}, {dt_max}, {t_final})"
        )));
    }
    let mut t = vec![0.0];
    let mut dt = dt0;
    while t[t.len() - 1] < t_final * (1.0 - 1e-12) {
        let next = t[t.len() - 1] + dt;
        t.push(if next > t_final * (1.0 - 1e-9) { t_final } else { next });
        dt = (dt * growth).min(dt_max);
    }
    Ok(t)
}

/// Runs a stepper over an explicit increasing time grid starting at the stepper's time.
pub fn integrate_on(mut stepper: Stepper, times: &[f64], record_every: usize) -> Result<Trajectory> {
    let grid = stepper.grid;
    let ns = stepper.c.len();
    if times.len() < 2 || times.windows(2).any(|w| !(w[1] > w[0])) || record_every == 0 {
        return Err(Error::Domain("time grid must be strictly increasing with at least one step".into()));
    }
    if (times[0] - stepper.time()).abs() > 1e-12 * times[0].abs().max(1.0) {
        return Err(Error::Domain(format!("time grid starts at {} but the stepper is at {}", times[0], stepper.time())));
    }
    let mut rec_t = vec![times[0]];
    let mut rec_s = vec![stepper.state()];
    let mut rec_f = Vec::new();
    let mut acc = FluxAssignment::zeros(&grid, ns);
    let mut acc_dt = 0.0;
    let last = times.len() - 1;
    for m in 1..=last {
        let dt = times[m] - times[m - 1];
        let fa = stepper.step(dt)?;
        for i in 0..ns {
            for (a, x) in acc.j[i].iter_mut().zip(&fa.j[i]) {
                *a += dt * x;
            }
            for (a, x) in acc.b[i].iter_mut().zip(&fa.b[i]) {
                *a += dt * x;
            }
        }
        acc_dt += dt;
        if m % record_every == 0 || m == last {
            for v in acc.j.iter_mut().chain(acc.b.iter_mut()) {
                for x in v.iter_mut() {
                    *x /= acc_dt;
                }
            }
            rec_f.push(std::mem::replace(&mut acc, FluxAssignment::zeros(&grid, ns)));
            acc_dt = 0.0;
            rec_t.push(times[m]);
            rec_s.push(stepper.state());
        }
    }
    Ok(Trajectory {
        grid,
        times: rec_t,
        states: rec_s,
        fluxes: Some(rec_f),
    })
}

pub fn solve_eps_system(
    grid: &Grid,
    initial: &State,
    params: &SystemParams,
    tilt: &Tilt,
    config: &SolverConfig,
) -> Result<Trajectory> {
    integrate(Stepper::eps_system(grid, initial, params, tilt, config)?, config)
}

/// Integrates the coarse equation for a single-species state `initial_hat`.
pub fn solve_effective(
    grid: &Grid,
    initial_hat: &State,
    params: &SystemParams,
    tilt: &Tilt,
    config: &SolverConfig,
) -> Result<Trajectory> {
    integrate(Stepper::effective(grid, initial_hat, params, tilt, config)?, config)
}

/// First and second derivatives of a cell field: central in the interior,
/// second-order one-sided at the two boundary cells.
pub(crate) fn cell_derivatives(f: &[f64], h: f64) -> (Vec<f64>, Vec<f64>) {
    let n = f.len();
    let mut d1 = vec![0.0; n];
    let mut d2 = vec![0.0; n];
    for k in 1..n - 1 {
        d1[k] = (f[k + 1] - f[k - 1]) / (2.0 * h);
        d2[k] = (f[k + 1] - 2.0 * f[k] + f[k - 1]) / (h * h);
    }
    d1[0] = (-3.0 * f[0] + 4.0 * f[1] - f[2]) / (2.0 * h);
    d1[n - 1] = (3.0 * f[n - 1] - 4.0 * f[n - 2] + f[n - 3]) / (2.0 * h);
    d2[0] = (2.0 * f[0] - 5.0 * f[1] + 4.0 * f[2] - f[3]) / (h * h);
    d2[n - 1] = (2.0 * f[n - 1] - 5.0 * f[n - 2] + 4.0 * f[n - 3] - f[n - 4]) / (h * h);
    (d1, d2)
}

/// Lagrange multipliers `(lambda_1, lambda_2)` of the constrained gradient flow
/// on the slow manifold, evaluated on the reconstruction of `hat`.
pub fn lagrange_multipliers(
    grid: &Grid,
    hat: &[f64],
    params: &SystemParams,
    tilt: &Tilt,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = grid.n_cells();
    if hat.len() != n {
        return Err(Error::Shape("coarse density length".into()));
    }
    if n < 4 {
        return Err(Error::Domain("need at least 4 cells for second differences".into()));
    }
    tilt.check(grid, 2)?;
    let h = grid.h();
    let w = params.w();
    let [d1, d2] = params.delta;
    let dbar = d1 - d2;
    let (v1, v2) = (tilt.cell(0), tilt.cell(1));
    let e1: Vec<f64> = v1.iter().map(|v| w[0] * (-v).exp()).collect();
    let e2: Vec<f64> = v2.iter().map(|v| w[1] * (-v).exp()).collect();
    let th1: Vec<f64> = (0..n).map(|k| e1[k] / (e1[k] + e2[k])).collect();
    let th2: Vec<f64> = (0..n).map(|k| e2[k] / (e1[k] + e2[k])).collect();
    let c1: Vec<f64> = (0..n).map(|k| th1[k] * hat[k]).collect();
    let c2: Vec<f64> = (0..n).map(|k| th2[k] * hat[k]).collect();
    let vbar: Vec<f64> = (0..n).map(|k| v1[k] - v2[k]).collect();
    let (gc1, lc1) = cell_derivatives(&c1, h);
    let (gc2, lc2) = cell_derivatives(&c2, h);
    let (gv1, lv1) = cell_derivatives(v1, h);
    let (gv2, lv2) = cell_derivatives(v2, h);
    let (gvb, _) = cell_derivatives(&vbar, h);
    let l1 = (0..n)
        .map(|k| {
            th2[k]
                * (-dbar * lc1[k]
                    + (d2 * gvb[k] - dbar * gv1[k]) * gc1[k]
                    + c1[k] * (d2 * gvb[k] * gv1[k] - dbar * lv1[k]))
        })
        .collect();
    let l2 = (0..n)
        .map(|k| {
            th1[k]
                * (dbar * lc2[k]
                    + (-d1 * gvb[k] + dbar * gv2[k]) * gc2[k]
                    + c2[k] * (-d1 * gvb[k] * gv2[k] + dbar * lv2[k]))
        })
        .collect();
    Ok((l1, l2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functionals::stationary_measure;
    use crate::state::{gce_residual, total_mass};
    use std::f64::consts::PI;

    fn params(eps: f64) -> SystemParams {
        SystemParams::new([1.0, 2.0], 1.0, 3.0, eps).unwrap()
    }

    fn smooth_tilt(g: &Grid) -> Tilt {
        Tilt::from_fn(g, 2, |i, x| if i == 0 { (2.0 * x).sin() } else { 0.5 * x * x - x }).unwrap()
    }

    #[test]
    fn graded_grid_shape() {
        let t = graded_times(1e-5, 1.02, 1e-3, 0.1).unwrap();
        assert_eq!(t[0], 0.0);
        assert_eq!(*t.last().unwrap(), 0.1);
        assert!((t[1] - 1e-5).abs() < 1e-20);
        let steps: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
        assert!(steps[..steps.len() - 1].windows(2).all(|w| w[1] >= w[0] * (1.0 - 1e-9) && w[1] <= 1e-3 * (1.0 + 1e-9)));
        assert!(graded_times(1e-3, 0.9, 1e-2, 1.0).is_err());
    }

    #[test]
    fn bernoulli_limits() {
        assert_eq!(bernoulli(0.0), 1.0);
        assert!((bernoulli(1e-6) - (1.0 - 5e-7)).abs() < 1e-12);
        assert!((bernoulli(2.0) - 2.0 / (2f64.exp() - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn step_times_cover_final_time() {
        let c = SolverConfig::new(0.03, 0.1).unwrap();
        let t = c.step_times();
        assert_eq!(t.len(), 5);
        assert_eq!(*t.last().unwrap(), 0.1);
        assert_eq!(SolverConfig::new(0.01, 0.05).unwrap().step_times().len(), 6);
        assert!(SolverConfig::new(0.1, 0.05).is_err());
        assert!(SolverConfig::new(0.0, 1.0).is_err());
    }

    #[test]
    fn stationary_measure_is_fixed() {
        let g = Grid::new(40).unwrap();
        let p = params(1e-3);
        let tilt = smooth_tilt(&g);
        let wv = stationary_measure(&g, &p, &tilt).unwrap().as_state();
        for scheme in [Scheme::StrangExactReaction, Scheme::ImexEuler] {
            let cfg = SolverConfig::new(1e-3, 0.05).unwrap().with_scheme(scheme);
            let traj = solve_eps_system(&g, &wv, &p, &tilt, &cfg).unwrap();
            for s in &traj.states {
                for i in 0..2 {
                    for (a, b) in s.species(i).iter().zip(wv.species(i)) {
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn uniform_equilibrium_is_fixed() {
        let g = Grid::new(10).unwrap();
        let p = params(0.1);
        let s = State::uniform(&g, &p.w());
        let traj = solve_eps_system(&g, &s, &p, &Tilt::zero(&g, 2), &SolverConfig::new(0.01, 0.1).unwrap()).unwrap();
        assert!(traj.states.iter().all(|x| x.species(0).iter().all(|v| (v - 0.75).abs() < 1e-14)));
    }

    #[test]
    fn mass_positivity_and_gce() {
        let g = Grid::new(30).unwrap();
        let p = params(1e-2);
        let tilt = smooth_tilt(&g);
        let c1 = g.sample(|x| if x < 0.3 { 2.0 } else { 0.0 });
        let c2 = g.sample(|x| if x > 0.8 { 2.0 } else { 0.0 });
        let s = State::new(&g, vec![c1, c2]).unwrap();
        let m0 = total_mass(&g, &s);
        let cfg = SolverConfig::new(2e-3, 0.05).unwrap();
        let traj = solve_eps_system(&g, &s, &p, &tilt, &cfg).unwrap();
        for st in &traj.states {
            assert!((total_mass(&g, st) - m0).abs() < 1e-13);
            assert!(st.min_density() >= 0.0);
        }
        assert!(gce_residual(&traj).unwrap().max_abs() < 1e-9);
        for f in traj.fluxes.as_ref().unwrap() {
            assert!(f.reaction_balance_defect() < 1e-9);
        }
    }

    #[test]
    fn equal_diffusion_sum_is_heat_flow() {
        let g = Grid::new(50).unwrap();
        let cfg = SolverConfig::new(1e-3, 0.02).unwrap();
        let c1 = g.sample(|x| 1.0 + (PI * x).cos());
        let c2 = g.sample(|x| 0.5 - 0.4 * (2.0 * PI * x).cos());
        let s = State::new(&g, vec![c1.clone(), c2.clone()]).unwrap();
        let hat: Vec<f64> = c1.iter().zip(&c2).map(|(a, b)| a + b).collect();
        let hat_s = State::new(&g, vec![hat]).unwrap();
        let heat = solve_effective(&g, &hat_s, &SystemParams::new([0.7, 0.7], 1.0, 3.0, 1.0).unwrap(), &Tilt::zero(&g, 2), &cfg).unwrap();
        for eps in [1.0, 1e-3] {
            let p = SystemParams::new([0.7, 0.7], 1.0, 3.0, eps).unwrap();
            let traj = solve_eps_system(&g, &s, &p, &Tilt::zero(&g, 2), &cfg).unwrap();
            let last = traj.last();
            for k in 0..50 {
                let sum = last.species(0)[k] + last.species(1)[k];
                assert!((sum - heat.last().species(0)[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn effective_keeps_coarse_stationary_state() {
        let g = Grid::new(25).unwrap();
        let p = params(1.0);
        let tilt = smooth_tilt(&g);
        let cp = coarse_params(&g, &p, &tilt).unwrap();
        let s = State::new(&g, vec![cp.w_hat.clone()]).unwrap();
        let traj = solve_effective(&g, &s, &p, &tilt, &SolverConfig::new(1e-2, 0.1).unwrap()).unwrap();
        for (a, b) in traj.last().species(0).iter().zip(&cp.w_hat) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn record_every_keeps_gce() {
        let g = Grid::new(16).unwrap();
        let p = params(0.05);
        let s = State::new(&g, vec![g.sample(|x| 1.0 + x), g.sample(|x| 0.2 * x)]).unwrap();
        let cfg = SolverConfig::new(1e-3, 0.01).unwrap().with_record_every(4);
        let traj = solve_eps_system(&g, &s, &p, &smooth_tilt(&g), &cfg).unwrap();
        assert_eq!(traj.times, vec![0.0, 0.004, 0.008, 0.01]);
        assert!(gce_residual(&traj).unwrap().max_abs() < 1e-9);
    }

    #[test]
    fn crank_nicolson_converges_to_same_limit() {
        let g = Grid::new(20).unwrap();
        let p = params(0.1);
        let s = State::new(&g, vec![g.sample(|x| 1.0 + (PI * x).cos()), g.sample(|_| 0.3)]).unwrap();
        let mut cfg = SolverConfig::new(1e-4, 0.01).unwrap();
        let be = solve_eps_system(&g, &s, &p, &Tilt::zero(&g, 2), &cfg).unwrap();
        cfg.crank_nicolson = true;
        let cn = solve_eps_system(&g, &s, &p, &Tilt::zero(&g, 2), &cfg).unwrap();
        let d = be.last().species(0).iter().zip(cn.last().species(0)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(d < 1e-3);
    }

    #[test]
    fn lagrange_untilted_equal_delta_vanishes() {
        let g = Grid::new(20).unwrap();
        let p = SystemParams::new([1.5, 1.5], 1.0, 3.0, 1.0).unwrap();
        let hat = g.sample(|x| 1.0 + 0.3 * (PI * x).cos());
        let tilt = Tilt::from_fn(&g, 2, |_, x| x.sin()).unwrap();
        let (l1, l2) = lagrange_multipliers(&g, &hat, &p, &tilt).unwrap();
        assert!(l1.iter().chain(&l2).all(|x| x.abs() < 1e-10));
    }

    #[test]
    fn lagrange_untilted_closed_form() {
        let g = Grid::new(40).unwrap();
        let p = params(1.0);
        let hat = g.sample(|x| 1.0 + 0.3 * x * x * x);
        let (l1, l2) = lagrange_multipliers(&g, &hat, &p, &Tilt::zero(&g, 2)).unwrap();
        let (_, lap) = cell_derivatives(&hat, g.h());
        let w = p.w();
        for k in 0..40 {
            let expect = -w[0] * w[1] * (p.delta[0] - p.delta[1]) * lap[k];
            assert!((l1[k] - expect).abs() < 1e-9);
            assert!((l1[k] + l2[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn derivative_stencils_exact_on_cubics() {
        let g = Grid::new(10).unwrap();
        let f = g.sample(|x| 2.0 - x + 3.0 * x * x - x * x * x);
        let (d1, d2) = cell_derivatives(&f, g.h());
        for (k, x) in g.centers().iter().enumerate() {
            assert!((d2[k] - (6.0 - 6.0 * x)).abs() < 1e-9);
            if k > 0 && k < 9 {
                // central difference error is h^2/6 f'''
                assert!((d1[k] - (-1.0 + 6.0 * x - 3.0 * x * x)).abs() < 0.011);
            }
        }
    }
}
