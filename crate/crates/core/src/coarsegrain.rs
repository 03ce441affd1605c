//! Coarse-graining `c -> c_1 + c_2`, the mixed coefficients of the effective
//! equation, reconstruction on the slow manifold and recovery sequences.

use crate::dissipation::{effective_dissipation, eval_state, telescoped_flux, TimeRule};
use crate::error::{Error, Result};
use crate::functionals::{stationary_measure, StationaryMeasure};
use crate::grid::Grid;
use crate::params::{SystemParams, Tilt};
use crate::state::{gce_residual, rate_plus_divergence, FluxAssignment, State, Trajectory};

/// Cell and face values of the effective coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseParams {
    /// `(delta_1 w_1^V + delta_2 w_2^V) / (w_1^V + w_2^V)` at cells.
    pub delta_hat: Vec<f64>,
    /// `-log(w_1 e^{-V_1} + w_2 e^{-V_2})` at cells.
    pub v_hat: Vec<f64>,
    /// `w_1^V + w_2^V` at cells.
    pub w_hat: Vec<f64>,
    pub delta_hat_face: Vec<f64>,
    pub w_hat_face: Vec<f64>,
}

pub fn coarse_params(grid: &Grid, params: &SystemParams, tilt: &Tilt) -> Result<CoarseParams> {
    let wv = stationary_measure(grid, params, tilt)?;
    let w = params.w();
    let [d1, d2] = params.delta;
    let mix = |a: f64, b: f64| (d1 * a + d2 * b) / (a + b);
    let n = grid.n_cells();
    let delta_hat = (0..n).map(|k| mix(wv.cell[0][k], wv.cell[1][k])).collect();
    let w_hat = (0..n).map(|k| wv.cell[0][k] + wv.cell[1][k]).collect();
    let v_hat = (0..n)
        .map(|k| -(w[0] * (-tilt.cell(0)[k]).exp() + w[1] * (-tilt.cell(1)[k]).exp()).ln())
        .collect();
    let delta_hat_face = (0..=n).map(|f| mix(wv.face[0][f], wv.face[1][f])).collect();
    let w_hat_face = (0..=n).map(|f| wv.face[0][f] + wv.face[1][f]).collect();
    Ok(CoarseParams {
        delta_hat,
        v_hat,
        w_hat,
        delta_hat_face,
        w_hat_face,
    })
}

/// `c_1 + c_2` as a single-species state.
pub fn coarse_grain(state: &State) -> Result<State> {
    if state.n_species() != 2 {
        return Err(Error::Shape(format!("coarse-graining needs 2 species, got {}", state.n_species())));
    }
    let hat = state.species(0).iter().zip(state.species(1)).map(|(a, b)| a + b).collect();
    Ok(State::from_raw(vec![hat]))
}

/// Slow-manifold lift `c_i = w_i^V / w_hat^V * c_hat` of a coarse density.
pub fn lift(cp: &CoarseParams, wv: &StationaryMeasure, hat: &[f64]) -> Vec<Vec<f64>> {
    (0..2)
        .map(|i| hat.iter().enumerate().map(|(k, c)| wv.cell[i][k] / cp.w_hat[k] * c).collect())
        .collect()
}

/// Two-species trajectory rebuilt from coarse data, with the closed-form
/// reaction flux reported next to the exact one.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub traj: Trajectory,
    /// Per interval, closed-form `b_1 = a_1 div J_hat + J_hat . grad phi_1` at cells.
    pub b_formula: Vec<Vec<f64>>,
    /// Largest `|b_1 + b_2|`, i.e. the coarse continuity residual carried over.
    pub balance_defect: f64,
}

fn continuity_scale(hat: &Trajectory, fl: &[FluxAssignment]) -> f64 {
    let grid = &hat.grid;
    fl.iter()
        .map(|f| grid.divergence(&f.j[0]).iter().fold(0.0_f64, |a, x| a.max(x.abs())))
        .fold(1.0, f64::max)
}

/// Rebuilds `(c_1, c_2, J_1, J_2, b_1, b_2)` from `(c_hat, J_hat)`.
///
/// The flux split uses the mobility `delta_j cbar_j` of the lifted state at the
/// interval midpoint. Each `b_j` is the exact discrete residual
/// `dc_j/dt + div J_j`, so the two-species gCE holds identically.
pub fn reconstruct_from_coarse(hat: &Trajectory, params: &SystemParams, tilt: &Tilt) -> Result<Reconstruction> {
    if hat.n_species() != 1 {
        return Err(Error::Shape("coarse trajectory must have one species".into()));
    }
    let grid = hat.grid;
    let fl = hat.fluxes.as_ref().ok_or(Error::NoFluxData)?;
    let cont = gce_residual(hat)?;
    let scale = continuity_scale(hat, fl);
    let bhat = fl.iter().flat_map(|f| f.b[0].iter()).fold(0.0_f64, |a, x| a.max(x.abs()));
    if cont.max_abs() > 1e-9 * scale || bhat > 0.0 {
        return Err(Error::Domain(format!(
            "coarse continuity violated: residual {:.3e}, source {:.3e}",
            cont.max_abs(),
            bhat
        )));
    }
    let cp = coarse_params(&grid, params, tilt)?;
    let wv = stationary_measure(&grid, params, tilt)?;
    let n = grid.n_cells();
    let h = grid.h();
    let d = params.delta;
    let states: Vec<State> = hat.states.iter().map(|s| State::from_raw(lift(&cp, &wv, s.species(0)))).collect();
    // Face weights of the closed form.
    let phi_face: Vec<f64> = (0..=n)
        .map(|f| d[0] * wv.face[0][f] / (d[0] * wv.face[0][f] + d[1] * wv.face[1][f]))
        .collect();
    let a1: Vec<f64> = (0..n)
        .map(|k| {
            let (w1, w2) = (wv.cell[0][k], wv.cell[1][k]);
            (d[0] - d[1]) / (d[0] * w1 + d[1] * w2) * w1 * w2 / (w1 + w2)
        })
        .collect();
    let mut fluxes = Vec::with_capacity(fl.len());
    let mut b_formula = Vec::with_capacity(fl.len());
    let mut balance_defect = 0.0_f64;
    for (m, f) in fl.iter().enumerate() {
        let dt = hat.times[m + 1] - hat.times[m];
        let jhat = &f.j[0];
        let mid = eval_state(hat, m, TimeRule::Midpoint);
        let cm = lift(&cp, &wv, mid.species(0));
        let cb = [grid.face_mean(&cm[0]), grid.face_mean(&cm[1])];
        let mut fa = FluxAssignment::zeros(&grid, 2);
        for face in 1..n {
            let (m1, m2) = (d[0] * cb[0][face], d[1] * cb[1][face]);
            let p1 = if m1 + m2 > 0.0 { m1 / (m1 + m2) } else { phi_face[face] };
            fa.j[0][face] = p1 * jhat[face];
            fa.j[1][face] = (1.0 - p1) * jhat[face];
        }
        for i in 0..2 {
            let (c0, c1) = (states[m].species(i), states[m + 1].species(i));
            for k in 0..n {
                fa.b[i][k] = rate_plus_divergence(c0[k], c1[k], dt, fa.j[i][k], fa.j[i][k + 1], h);
            }
        }
        balance_defect = balance_defect.max(fa.reaction_balance_defect());
        let div = grid.divergence(jhat);
        b_formula.push(
            (0..n)
                .map(|k| a1[k] * div[k] + 0.5 * (jhat[k] + jhat[k + 1]) * (phi_face[k + 1] - phi_face[k]) / h)
                .collect(),
        );
        fluxes.push(fa);
    }
    Ok(Reconstruction {
        traj: Trajectory::new(grid, hat.times.clone(), states, Some(fluxes))?,
        b_formula,
        balance_defect,
    })
}

/// `sum_f h [J_1^2/(delta_1 cbar_1) + J_2^2/(delta_2 cbar_2) - J_hat^2/(sum_j delta_j cbar_j)]`.
pub fn flux_equilibration_check(grid: &Grid, state: &State, params: &SystemParams, j1: &[f64], j2: &[f64]) -> Result<f64> {
    state.check_shape(grid, 2)?;
    if j1.len() != grid.n_faces() || j2.len() != grid.n_faces() {
        return Err(Error::Shape("fluxes must live on faces".into()));
    }
    if state.min_density() <= 0.0 {
        return Err(Error::Domain("flux equilibration needs strictly positive densities".into()));
    }
    let h = grid.h();
    let c1 = grid.face_mean(state.species(0));
    let c2 = grid.face_mean(state.species(1));
    let [d1, d2] = params.delta;
    let mut gap = 0.0;
    for f in 1..grid.n_cells() {
        let (m1, m2) = (d1 * c1[f], d2 * c2[f]);
        let jh = j1[f] + j2[f];
        gap += h * (j1[f] * j1[f] / m1 + j2[f] * j2[f] / m2 - jh * jh / (m1 + m2));
    }
    Ok(gap)
}

/// `(c_hat + 2 gamma) / (1 + 2 gamma)`; at least `gamma` for `gamma <= 1/2`.
pub fn positivity_shift(hat: &[f64], gamma: f64) -> Vec<f64> {
    hat.iter().map(|c| (c + 2.0 * gamma) / (1.0 + 2.0 * gamma)).collect()
}

/// Exponents of the recovery construction: shift `gamma = eps^(1 - lambda)`,
/// temporal mollification half-width `tau0 eps^alpha`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveryExponents {
    pub lambda: f64,
    pub alpha: f64,
    /// Half-width at `eps = 1` as a fraction of the final time.
    pub tau0_fraction: f64,
}

impl Default for RecoveryExponents {
    fn default() -> Self {
        Self {
            lambda: 0.9,
            alpha: 0.2,
            tau0_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoverySequence {
    pub epsilon: f64,
    pub gamma: f64,
    pub tau: f64,
    /// `eps^alpha max |d c_hat / dt|` after mollification.
    pub rate_bound: f64,
    pub coarse: Trajectory,
    pub reconstruction: Reconstruction,
}

/// Symmetric discrete bump `(1 - s^2)^3` with unit sum on offsets `|l| dt < tau`.
pub fn mollifier_weights(tau: f64, dt: f64) -> Vec<f64> {
    let half = (tau / dt).ceil() as isize - 1;
    if half <= 0 {
        return vec![1.0];
    }
    let raw: Vec<f64> = (-half..=half)
        .map(|l| {
            let s = l as f64 * dt / tau;
            (1.0 - s * s).max(0.0).powi(3)
        })
        .collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / z).collect()
}

/// Shift, mollify in time and reconstruct a slow-manifold limit trajectory.
pub fn build_recovery_sequence(
    limit: &Trajectory,
    params: &SystemParams,
    tilt: &Tilt,
    epsilon: f64,
    exps: RecoveryExponents,
) -> Result<RecoverySequence> {
    if !(epsilon > 0.0) {
        return Err(Error::Domain("epsilon must be positive".into()));
    }
    let grid = limit.grid;
    let d0 = effective_dissipation(limit, params, tilt)?;
    if !d0.value.is_finite() {
        return Err(Error::Domain(format!(
            "limit trajectory has infinite D_0 (manifold defect {:.3e})",
            d0.max_defect
        )));
    }
    let dt = limit.times[1] - limit.times[0];
    if limit.times.windows(2).any(|w| ((w[1] - w[0]) - dt).abs() > 1e-9 * dt) {
        return Err(Error::Domain("recovery construction needs a uniform time grid".into()));
    }
    let m_int = limit.n_intervals();
    let hats: Vec<Vec<f64>> = limit
        .states
        .iter()
        .map(|s| coarse_grain(s).map(|c| c.into_densities().remove(0)))
        .collect::<Result<_>>()?;
    let jhat: Vec<Vec<f64>> = (0..m_int)
        .map(|m| telescoped_flux(&grid, &hats[m], &hats[m + 1], dt))
        .collect();

    let gamma = epsilon.powf(1.0 - exps.lambda).min(0.5);
    let hats: Vec<Vec<f64>> = hats.iter().map(|c| positivity_shift(c, gamma)).collect();
    let jhat: Vec<Vec<f64>> = jhat
        .iter()
        .map(|j| j.iter().map(|x| x / (1.0 + 2.0 * gamma)).collect())
        .collect();

    let tau = exps.tau0_fraction * limit.final_time() * epsilon.powf(exps.alpha);
    let psi = mollifier_weights(tau, dt);
    let half = (psi.len() / 2) as isize;
    let n = grid.n_cells();
    let state_at = |m: isize| -> &Vec<f64> { &hats[m.clamp(0, m_int as isize) as usize] };
    let mut states = Vec::with_capacity(m_int + 1);
    for m in 0..=m_int as isize {
        let mut c = vec![0.0; n];
        for (l, w) in psi.iter().enumerate() {
            let src = state_at(m - (l as isize - half));
            for k in 0..n {
                c[k] += w * src[k];
            }
        }
        states.push(c);
    }
    let mut fluxes = Vec::with_capacity(m_int);
    for m in 0..m_int as isize {
        let mut j = vec![0.0; n + 1];
        for (l, w) in psi.iter().enumerate() {
            let src = m - (l as isize - half);
            if src >= 0 && src < m_int as isize {
                for (a, x) in j.iter_mut().zip(&jhat[src as usize]) {
                    *a += w * x;
                }
            }
        }
        fluxes.push(FluxAssignment {
            j: vec![j],
            b: vec![vec![0.0; n]],
        });
    }
    let rate = (0..m_int)
        .map(|m| {
            (0..n)
                .map(|k| ((states[m + 1][k] - states[m][k]) / dt).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    let coarse = Trajectory::new(
        grid,
        limit.times.clone(),
        states.into_iter().map(|c| State::from_raw(vec![c])).collect(),
        Some(fluxes),
    )?;
    let reconstruction = reconstruct_from_coarse(&coarse, params, tilt)?;
    Ok(RecoverySequence {
        epsilon,
        gamma,
        tau,
        rate_bound: epsilon.powf(exps.alpha) * rate,
        coarse,
        reconstruction,
    })
}

/// Attaches telescoped coarse fluxes to a single-species trajectory.
pub fn with_coarse_fluxes(hat: &Trajectory) -> Result<Trajectory> {
    if hat.n_species() != 1 {
        return Err(Error::Shape("coarse trajectory must have one species".into()));
    }
    let grid = hat.grid;
    let fl = (0..hat.n_intervals())
        .map(|m| FluxAssignment {
            j: vec![telescoped_flux(
                &grid,
                hat.states[m].species(0),
                hat.states[m + 1].species(0),
                hat.times[m + 1] - hat.times[m],
            )],
            b: vec![vec![0.0; grid.n_cells()]],
        })
        .collect();
    Trajectory::new(grid, hat.times.clone(), hat.states.clone(), Some(fl))
}
