//! Primal dissipation by convex duality, De Giorgi functionals and the
//! energy-dissipation-balance residual.

use crate::coarsegrain::{coarse_grain, coarse_params, CoarseParams};
use crate::error::{Error, Result};
use crate::functionals::{
    cosh_star, cosh_star_prime, cosh_star_second, energy, perspective, slope_general, stationary_measure,
    Base, Mobility, StationaryMeasure,
};
use crate::grid::Grid;
use crate::linalg::BandedSpd;
use crate::params::{SystemParams, Tilt};
use crate::state::{FluxAssignment, State, Trajectory};

const NEWTON_TOL: f64 = 1e-10;
const NEWTON_MAX_ITER: usize = 200;
/// Relative defect allowed on the slow manifold.
pub const TOL_MANIFOLD: f64 = 1e-6;

/// Maximizer of `<xi, v> - R*(c, xi)` and the fluxes recovered from it.
#[derive(Debug, Clone, PartialEq)]
pub struct DualMaximizerState {
    pub xi: Vec<Vec<f64>>,
    /// Dual value `<xi, v> - R*(c, xi)`.
    pub value: f64,
    /// `max |grad| / h` at the returned iterate.
    pub gradient_norm: f64,
    pub iterations: usize,
    pub fluxes: FluxAssignment,
    /// Per edge and cell, the reaction flux gained by `edge.i` (and lost by `edge.j`).
    pub edge_flux: Vec<Vec<f64>>,
}

struct DualProblem<'a> {
    grid: &'a Grid,
    mob: &'a Mobility,
    /// `delta_i cbar_{i,f} / h` on faces.
    face_w: Vec<Vec<f64>>,
    /// `h kappa sqrt(c_i c_j)` per edge and cell.
    edge_w: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl<'a> DualProblem<'a> {
    fn new(grid: &'a Grid, state: &State, mob: &'a Mobility, v: Vec<Vec<f64>>) -> Self {
        let h = grid.h();
        let face_w = mob
            .delta
            .iter()
            .enumerate()
            .map(|(i, &d)| grid.face_mean(state.species(i)).iter().map(|c| d * c / h).collect())
            .collect();
        let edge_w = mob
            .edges
            .iter()
            .map(|e| {
                state
                    .species(e.i)
                    .iter()
                    .zip(state.species(e.j))
                    .map(|(a, b)| h * e.kappa * (a * b).sqrt())
                    .collect()
            })
            .collect();
        Self {
            grid,
            mob,
            face_w,
            edge_w,
            v,
        }
    }

    fn ns(&self) -> usize {
        self.mob.n_species()
    }

    /// `F(xi) = R*(xi) - <xi, v>`; minimized.
    fn objective(&self, xi: &[Vec<f64>]) -> f64 {
        let h = self.grid.h();
        let n = self.grid.n_cells();
        let mut f = 0.0;
        for i in 0..self.ns() {
            for fa in 1..n {
                let d = xi[i][fa] - xi[i][fa - 1];
                f += 0.5 * self.face_w[i][fa] * d * d;
            }
            for k in 0..n {
                f -= h * xi[i][k] * self.v[i][k];
            }
        }
        for (e, w) in self.mob.edges.iter().zip(&self.edge_w) {
            for k in 0..n {
                if w[k] > 0.0 {
                    f += w[k] * cosh_star(xi[e.i][k] - xi[e.j][k]);
                }
            }
        }
        f
    }

    fn gradient(&self, xi: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let h = self.grid.h();
        let n = self.grid.n_cells();
        let mut g: Vec<Vec<f64>> = self.v.iter().map(|vi| vi.iter().map(|x| -h * x).collect()).collect();
        for i in 0..self.ns() {
            for fa in 1..n {
                let q = self.face_w[i][fa] * (xi[i][fa] - xi[i][fa - 1]);
                g[i][fa] += q;
                g[i][fa - 1] -= q;
            }
        }
        for (e, w) in self.mob.edges.iter().zip(&self.edge_w) {
            for k in 0..n {
                if w[k] > 0.0 {
                    let r = w[k] * cosh_star_prime(xi[e.i][k] - xi[e.j][k]);
                    g[e.i][k] += r;
                    g[e.j][k] -= r;
                }
            }
        }
        g
    }

    fn hessian(&self, xi: &[Vec<f64>]) -> BandedSpd {
        let ns = self.ns();
        let n = self.grid.n_cells();
        let mut m = BandedSpd::zeros(n * ns, ns);
        let idx = |k: usize, i: usize| k * ns + i;
        for i in 0..ns {
            for fa in 1..n {
                let a = self.face_w[i][fa];
                let (p, q) = (idx(fa - 1, i), idx(fa, i));
                m.add(p, p, a);
                m.add(q, q, a);
                m.add(q, p, -a);
            }
        }
        for (e, w) in self.mob.edges.iter().zip(&self.edge_w) {
            for k in 0..n {
                if w[k] > 0.0 {
                    let a = w[k] * cosh_star_second(xi[e.i][k] - xi[e.j][k]);
                    let (p, q) = (idx(k, e.i), idx(k, e.j));
                    m.add(p, p, a);
                    m.add(q, q, a);
                    m.add(p, q, -a);
                }
            }
        }
        m
    }

    fn solve(&self) -> Result<DualMaximizerState> {
        let ns = self.ns();
        let n = self.grid.n_cells();
        let h = self.grid.h();
        let vmax = self.v.iter().flatten().fold(0.0_f64, |a, x| a.max(x.abs()));
        let tol = NEWTON_TOL * vmax.max(1.0);
        let norm = |g: &[Vec<f64>]| g.iter().flatten().fold(0.0_f64, |a, x| a.max(x.abs())) / h;
        let mut xi = vec![vec![0.0; n]; ns];
        let mut f = self.objective(&xi);
        let mut g = self.gradient(&xi);
        let mut gn = norm(&g);
        let mut it = 0;
        while gn > tol {
            if it == NEWTON_MAX_ITER {
                return Err(Error::IterationLimit {
                    iterations: it,
                    gradient_norm: gn,
                });
            }
            it += 1;
            let mut hm = self.hessian(&xi);
            let ridge = 1e-14 * hm.max_diag();
            for r in 0..n * ns {
                hm.add(r, r, ridge);
            }
            hm.pin(0);
            let mut rhs: Vec<f64> = (0..n * ns).map(|r| -g[r % ns][r / ns]).collect();
            rhs[0] = 0.0;
            let d = hm.solve(&rhs)?;
            let slope: f64 = (0..n * ns).map(|r| g[r % ns][r / ns] * d[r]).sum();
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let trial: Vec<Vec<f64>> = (0..ns)
                    .map(|i| (0..n).map(|k| xi[i][k] + t * d[k * ns + i]).collect())
                    .collect();
                let ft = self.objective(&trial);
                let gt = self.gradient(&trial);
                let gnt = norm(&gt);
                if ft.is_finite() && (ft <= f + 1e-4 * t * slope || (t == 1.0 && gnt < gn)) {
                    xi = trial;
                    f = ft;
                    g = gt;
                    gn = gnt;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                return Err(Error::IterationLimit {
                    iterations: it,
                    gradient_norm: gn,
                });
            }
        }
        let mean = xi.iter().flatten().sum::<f64>() / (n * ns) as f64;
        for x in xi.iter_mut().flatten() {
            *x -= mean;
        }
        let (fluxes, edge_flux) = self.recover(&xi);
        Ok(DualMaximizerState {
            xi,
            value: -f,
            gradient_norm: gn,
            iterations: it,
            fluxes,
            edge_flux,
        })
    }

    /// `J_i = delta_i cbar grad xi_i`, edge flux `kappa sqrt(c_i c_j) C*'(xi_i - xi_j)`.
    fn recover(&self, xi: &[Vec<f64>]) -> (FluxAssignment, Vec<Vec<f64>>) {
        let ns = self.ns();
        let n = self.grid.n_cells();
        let h = self.grid.h();
        let mut fa = FluxAssignment::zeros(self.grid, ns);
        for i in 0..ns {
            for f in 1..n {
                fa.j[i][f] = self.face_w[i][f] * (xi[i][f] - xi[i][f - 1]);
            }
        }
        let mut edge_flux = Vec::with_capacity(self.mob.edges.len());
        for (e, w) in self.mob.edges.iter().zip(&self.edge_w) {
            let r: Vec<f64> = (0..n)
                .map(|k| if w[k] > 0.0 { w[k] / h * cosh_star_prime(xi[e.i][k] - xi[e.j][k]) } else { 0.0 })
                .collect();
            for k in 0..n {
                fa.b[e.i][k] += r[k];
                fa.b[e.j][k] -= r[k];
            }
            edge_flux.push(r);
        }
        (fa, edge_flux)
    }
}

fn check_rate(grid: &Grid, v: &[Vec<f64>], ns: usize) -> Result<Vec<Vec<f64>>> {
    if v.len() != ns || v.iter().any(|s| s.len() != grid.n_cells()) {
        return Err(Error::Shape("rate does not match state".into()));
    }
    if v.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Domain("rate must be finite".into()));
    }
    let total: f64 = v.iter().map(|s| grid.integrate(s)).sum();
    let scale: f64 = v.iter().map(|s| s.iter().map(|x| x.abs()).sum::<f64>() / grid.n_cells() as f64).sum();
    if total.abs() > 1e-10 * scale + 1e-14 {
        return Err(Error::Domain(format!("rate changes total mass by {total:.3e}")));
    }
    let shift = total / ns as f64;
    Ok(v.iter().map(|s| s.iter().map(|x| x - shift).collect()).collect())
}

/// Solves the dual problem for an arbitrary network.
pub fn dual_maximizer(grid: &Grid, state: &State, mobility: &Mobility, v: &[Vec<f64>]) -> Result<DualMaximizerState> {
    let ns = mobility.n_species();
    state.check_shape(grid, ns)?;
    let v = check_rate(grid, v, ns)?;
    DualProblem::new(grid, state, mobility, v).solve()
}

/// `R_eps(c, v)` and the optimal fluxes. These satisfy `v_j = -div J_j + b_j`
/// with `b_1 = -b_2 = (sqrt(c_1 c_2)/eps) C*'(xi_1 - xi_2)`.
pub fn primal_r_eps(
    grid: &Grid,
    state: &State,
    params: &SystemParams,
    v: &[Vec<f64>],
    epsilon: f64,
) -> Result<(f64, FluxAssignment)> {
    let sol = dual_maximizer(grid, state, &Mobility::two_species(params, epsilon), v)?;
    Ok((sol.value, sol.fluxes))
}

/// Diffusion and reaction parts of the primal objective of given fluxes:
/// `sum_f h Q~(delta cbar, J)` and `sum_k h kappa C~(sqrt(c_i c_j), r / kappa)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluxCost {
    pub diff: f64,
    pub react: f64,
}

impl FluxCost {
    pub fn total(&self) -> f64 {
        self.diff + self.react
    }
}

pub fn diffusion_cost(grid: &Grid, state: &State, delta: &[f64], j: &[Vec<f64>]) -> f64 {
    let h = grid.h();
    let mut s = 0.0;
    for (i, &d) in delta.iter().enumerate() {
        let cbar = grid.face_mean(state.species(i));
        for f in 1..grid.n_cells() {
            s += h * perspective(Base::Quadratic, d * cbar[f], j[i][f]);
        }
    }
    s
}

/// `sum_k h C~(kappa sqrt(c_i c_j), r)` for one edge.
pub fn reaction_cost(grid: &Grid, ci: &[f64], cj: &[f64], kappa: f64, r: &[f64]) -> f64 {
    let h = grid.h();
    (0..grid.n_cells())
        .map(|k| h * perspective(Base::Cosh, kappa * (ci[k] * cj[k]).sqrt(), r[k]))
        .sum()
}

/// Primal objective of a two-species flux assignment.
pub fn flux_objective(grid: &Grid, state: &State, params: &SystemParams, epsilon: f64, fa: &FluxAssignment) -> Result<FluxCost> {
    state.check_shape(grid, 2)?;
    fa.check(grid, 2)?;
    Ok(FluxCost {
        diff: diffusion_cost(grid, state, &params.delta, &fa.j),
        react: reaction_cost(grid, state.species(0), state.species(1), 1.0 / epsilon, &fa.b[1]),
    })
}

/// Time-integrated terms of the De Giorgi functional.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize)]
pub struct DissipationBreakdown {
    /// Velocity parts from the dual evaluation of `R(c, dc/dt)`.
    pub vel_diff: f64,
    pub vel_react: f64,
    pub slope_diff: f64,
    pub slope_react: f64,
    /// Velocity parts from the trajectory's own fluxes, when present.
    pub flux_vel_diff: Option<f64>,
    pub flux_vel_react: Option<f64>,
}

impl DissipationBreakdown {
    pub fn total(&self) -> f64 {
        self.vel_diff + self.vel_react + self.slope_diff + self.slope_react
    }

    pub fn total_with_fluxes(&self) -> Option<f64> {
        Some(self.flux_vel_diff? + self.flux_vel_react? + self.slope_diff + self.slope_react)
    }
}

/// Where the integrand of `int ... dt` is evaluated on each interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TimeRule {
    /// At `c(t_m)`.
    LeftEndpoint,
    /// At `(c(t_m) + c(t_{m+1})) / 2`.
    #[default]
    Midpoint,
}

pub(crate) fn eval_state(traj: &Trajectory, m: usize, rule: TimeRule) -> State {
    match rule {
        TimeRule::LeftEndpoint => traj.states[m].clone(),
        TimeRule::Midpoint => {
            let (a, b) = (&traj.states[m], &traj.states[m + 1]);
            State::from_raw(
                (0..a.n_species())
                    .map(|i| a.species(i).iter().zip(b.species(i)).map(|(x, y)| 0.5 * (x + y)).collect())
                    .collect(),
            )
        }
    }
}

pub(crate) fn interval_rate(traj: &Trajectory, m: usize) -> Vec<Vec<f64>> {
    let dt = traj.times[m + 1] - traj.times[m];
    let (a, b) = (&traj.states[m], &traj.states[m + 1]);
    (0..a.n_species())
        .map(|i| a.species(i).iter().zip(b.species(i)).map(|(x, y)| (y - x) / dt).collect())
        .collect()
}

/// Network version of [`dissipation_functional`]; edge costs are reported per
/// edge in the second return value (velocity, slope).
pub fn network_dissipation(
    traj: &Trajectory,
    mobility: &Mobility,
    wv: &StationaryMeasure,
    rule: TimeRule,
) -> Result<(DissipationBreakdown, Vec<(f64, f64)>)> {
    let grid = &traj.grid;
    let ns = mobility.n_species();
    let mut out = DissipationBreakdown::default();
    let mut per_edge = vec![(0.0, 0.0); mobility.edges.len()];
    let mut flux_parts = traj.fluxes.as_ref().map(|_| (0.0, 0.0));
    for m in 0..traj.n_intervals() {
        let dt = traj.times[m + 1] - traj.times[m];
        let c = &eval_state(traj, m, rule);
        let sol = dual_maximizer(grid, c, mobility, &interval_rate(traj, m))?;
        let dcost = diffusion_cost(grid, c, &mobility.delta, &sol.fluxes.j);
        out.vel_diff += dt * dcost;
        for (e, (edge, r)) in mobility.edges.iter().zip(&sol.edge_flux).enumerate() {
            let rc = reaction_cost(grid, c.species(edge.i), c.species(edge.j), edge.kappa, r);
            out.vel_react += dt * rc;
            per_edge[e].0 += dt * rc;
        }
        let single = |e: usize| Mobility {
            delta: vec![0.0; ns],
            edges: vec![mobility.edges[e]],
        };
        let sl = slope_general(grid, c, mobility, wv)?;
        out.slope_diff += dt * sl.diff;
        out.slope_react += dt * sl.react;
        if mobility.edges.len() > 1 {
            for (e, pe) in per_edge.iter_mut().enumerate() {
                pe.1 += dt * slope_general(grid, c, &single(e), wv)?.react;
            }
        } else if let Some(pe) = per_edge.first_mut() {
            pe.1 += dt * sl.react;
        }
        if let (Some(acc), Some(fl)) = (flux_parts.as_mut(), traj.fluxes.as_ref()) {
            let fa = &fl[m];
            acc.0 += dt * diffusion_cost(grid, c, &mobility.delta, &fa.j);
            if ns == 2 && mobility.edges.len() == 1 {
                let e = mobility.edges[0];
                acc.1 += dt * reaction_cost(grid, c.species(0), c.species(1), e.kappa, &fa.b[1]);
            } else {
                acc.1 = f64::NAN;
            }
        }
    }
    if let Some((d, r)) = flux_parts {
        out.flux_vel_diff = Some(d);
        out.flux_vel_react = if r.is_nan() { None } else { Some(r) };
    }
    Ok((out, per_edge))
}

/// `D_eps^V` of a two-species trajectory with the default [`TimeRule`].
pub fn dissipation_functional(traj: &Trajectory, params: &SystemParams, tilt: &Tilt, epsilon: f64) -> Result<DissipationBreakdown> {
    dissipation_functional_with(traj, params, tilt, epsilon, TimeRule::default())
}

pub fn dissipation_functional_with(
    traj: &Trajectory,
    params: &SystemParams,
    tilt: &Tilt,
    epsilon: f64,
    rule: TimeRule,
) -> Result<DissipationBreakdown> {
    if traj.n_species() != 2 {
        return Err(Error::Shape("two-species trajectory expected".into()));
    }
    let wv = stationary_measure(&traj.grid, params, tilt)?;
    Ok(network_dissipation(traj, &Mobility::two_species(params, epsilon), &wv, rule)?.0)
}

/// `E(c(T)) + D_eps(traj) - E(c(0))`.
pub fn edb_residual(traj: &Trajectory, params: &SystemParams, tilt: &Tilt, epsilon: f64) -> Result<f64> {
    edb_residual_with(traj, params, tilt, epsilon, TimeRule::default())
}

pub fn edb_residual_with(traj: &Trajectory, params: &SystemParams, tilt: &Tilt, epsilon: f64, rule: TimeRule) -> Result<f64> {
    let d = dissipation_functional_with(traj, params, tilt, epsilon, rule)?;
    let e0 = energy(&traj.grid, traj.first(), params, tilt)?;
    let e1 = energy(&traj.grid, traj.last(), params, tilt)?;
    Ok(e1 + d.total() - e0)
}

/// Value of `D_0^V` with its parts; `value` is `+inf` off the slow manifold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveDissipation {
    pub value: f64,
    pub vel: f64,
    pub slope: f64,
    /// Largest relative manifold defect `|rho_1 - rho_2| / (1 + rho_hat)`.
    pub max_defect: f64,
}

pub fn manifold_defect(state: &State, wv: &StationaryMeasure) -> f64 {
    let n = state.n_cells();
    (0..n)
        .map(|k| {
            let r1 = state.species(0)[k] / wv.cell[0][k];
            let r2 = state.species(1)[k] / wv.cell[1][k];
            let rh = (state.species(0)[k] + state.species(1)[k]) / (wv.cell[0][k] + wv.cell[1][k]);
            (r1 - r2).abs() / (1.0 + rh)
        })
        .fold(0.0, f64::max)
}

/// Coarse flux determined by `dc/dt + div J = 0` and `J = 0` on the left boundary.
pub(crate) fn telescoped_flux(grid: &Grid, c0: &[f64], c1: &[f64], dt: f64) -> Vec<f64> {
    let h = grid.h();
    let n = grid.n_cells();
    // Rounding-level mass drift is spread over all cells instead of the last one.
    let drift = (0..n).map(|k| c1[k] - c0[k]).sum::<f64>() / n as f64;
    let mut j = vec![0.0; n + 1];
    for k in 0..n {
        j[k + 1] = j[k] - h * ((c1[k] - c0[k]) - drift) / dt;
    }
    j[n] = 0.0;
    j
}

/// Coarse velocity and slope terms for a single-species trajectory of `c_hat`.
pub fn effective_dissipation_coarse(hat: &Trajectory, cp: &CoarseParams, rule: TimeRule) -> Result<(f64, f64)> {
    let grid = &hat.grid;
    let h = grid.h();
    let n = grid.n_cells();
    let mut vel = 0.0;
    let mut slope = 0.0;
    for m in 0..hat.n_intervals() {
        let dt = hat.times[m + 1] - hat.times[m];
        let cs = eval_state(hat, m, rule);
        let c = cs.species(0);
        let jhat = telescoped_flux(grid, hat.states[m].species(0), hat.states[m + 1].species(0), dt);
        let mob: Vec<f64> = (0..n).map(|k| cp.delta_hat[k] * c[k]).collect();
        let mob = grid.face_mean(&mob);
        let rho: Vec<f64> = (0..n).map(|k| c[k] / cp.w_hat[k]).collect();
        for f in 1..n {
            vel += dt * h * perspective(Base::Quadratic, mob[f], jhat[f]);
            let g = (rho[f] - rho[f - 1]) / h;
            if g != 0.0 {
                let rbar = 0.5 * (rho[f] + rho[f - 1]);
                slope += dt * h * 0.5 * cp.delta_hat_face[f] * cp.w_hat_face[f] * g * g / rbar;
            }
        }
    }
    Ok((vel, slope))
}

/// `D_0^V` of a two-species trajectory through its coarse-grained form.
pub fn effective_dissipation(traj: &Trajectory, params: &SystemParams, tilt: &Tilt) -> Result<EffectiveDissipation> {
    effective_dissipation_with(traj, params, tilt, TimeRule::default())
}

pub fn effective_dissipation_with(traj: &Trajectory, params: &SystemParams, tilt: &Tilt, rule: TimeRule) -> Result<EffectiveDissipation> {
    if traj.n_species() != 2 {
        return Err(Error::Shape("two-species trajectory expected".into()));
    }
    let grid = &traj.grid;
    let wv = stationary_measure(grid, params, tilt)?;
    let max_defect = traj.states.iter().map(|s| manifold_defect(s, &wv)).fold(0.0, f64::max);
    if max_defect > TOL_MANIFOLD {
        return Ok(EffectiveDissipation {
            value: f64::INFINITY,
            vel: f64::INFINITY,
            slope: f64::NAN,
            max_defect,
        });
    }
    let states = traj.states.iter().map(coarse_grain).collect::<Result<Vec<_>>>()?;
    let hat = Trajectory::new(*grid, traj.times.clone(), states, None)?;
    let (vel, slope) = effective_dissipation_coarse(&hat, &coarse_params(grid, params, tilt)?, rule)?;
    Ok(EffectiveDissipation {
        value: vel + slope,
        vel,
        slope,
        max_defect,
    })
}

/// Energy of the slow-manifold lift `c_i = w_i^V / w_hat^V c_hat`.
pub fn lifted_energy(grid: &Grid, hat: &[f64], params: &SystemParams, tilt: &Tilt) -> Result<f64> {
    let wv = stationary_measure(grid, params, tilt)?;
    let lift = (0..2)
        .map(|i| (0..grid.n_cells()).map(|k| wv.cell[i][k] / (wv.cell[0][k] + wv.cell[1][k]) * hat[k]).collect())
        .collect();
    energy(grid, &State::from_raw(lift), params, tilt)
}

/// EDB residual of the coarse-grained gradient system on a `c_hat` trajectory.
pub fn effective_edb_residual(hat: &Trajectory, params: &SystemParams, tilt: &Tilt) -> Result<f64> {
    effective_edb_residual_with(hat, params, tilt, TimeRule::default())
}

pub fn effective_edb_residual_with(hat: &Trajectory, params: &SystemParams, tilt: &Tilt, rule: TimeRule) -> Result<f64> {
    let grid = &hat.grid;
    let cp = coarse_params(grid, params, tilt)?;
    let (vel, slope) = effective_dissipation_coarse(hat, &cp, rule)?;
    let e0 = lifted_energy(grid, hat.first().species(0), params, tilt)?;
    let e1 = lifted_energy(grid, hat.last().species(0), params, tilt)?;
    Ok(e1 + vel + slope - e0)
}
