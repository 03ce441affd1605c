//! Linear reaction networks `A^eps = A_slow + A_fast / eps` on `I` species.
//!
//! Convention: `dc/dt = A c`, so `A[i][j]` (`i != j`) is the rate of the jump
//! `j -> i` and columns sum to zero.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dissipation::{network_dissipation, DissipationBreakdown, TimeRule};
use crate::error::{Error, Result};
use crate::functionals::{stationary_measure_weighted, Edge, Mobility};
use crate::grid::Grid;
use crate::params::{SystemParams, Tilt};
use crate::solver::{integrate, SolverConfig, Stepper};
use crate::state::{State, Trajectory};

/// Tolerance for column sums and detailed balance, relative to the largest rate.
pub const TOL_GENERATOR: f64 = 1e-12;

/// Default sweep used to check `w^eps -> w_limit`.
pub const DEFAULT_EPS_SWEEP: [f64; 6] = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkovGenerator {
    pub species: Vec<String>,
    #[serde(rename = "A_slow")]
    pub a_slow: Vec<Vec<f64>>,
    #[serde(rename = "A_fast")]
    pub a_fast: Vec<Vec<f64>>,
    pub delta: Vec<f64>,
}

impl MarkovGenerator {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let gen: Self = serde_json::from_str(text)?;
        gen.check_shape()?;
        Ok(gen)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn n_species(&self) -> usize {
        self.species.len()
    }

    pub fn check_shape(&self) -> Result<()> {
        let n = self.species.len();
        if n < 2 {
            return Err(Error::Config("a generator needs at least two species".into()));
        }
        let square = |m: &[Vec<f64>]| m.len() == n && m.iter().all(|r| r.len() == n);
        if !square(&self.a_slow) || !square(&self.a_fast) {
            return Err(Error::Shape(format!("A_slow and A_fast must be {n} x {n}")));
        }
        if self.delta.len() != n {
            return Err(Error::Shape(format!("delta must have {n} entries")));
        }
        if self.delta.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
            return Err(Error::Domain("diffusion constants must be positive".into()));
        }
        if self.a_slow.iter().chain(&self.a_fast).flatten().any(|x| !x.is_finite()) {
            return Err(Error::Domain("generator entries must be finite".into()));
        }
        Ok(())
    }

    /// `A_slow + A_fast / eps`.
    pub fn assembled(&self, epsilon: f64) -> Vec<Vec<f64>> {
        self.a_slow
            .iter()
            .zip(&self.a_fast)
            .map(|(s, f)| s.iter().zip(f).map(|(a, b)| a + b / epsilon).collect())
            .collect()
    }

    /// Edge `{i, j}` is fast when either fast rate is positive; the label does not depend on `eps`.
    pub fn is_fast_edge(&self, i: usize, j: usize) -> bool {
        self.a_fast[i][j] > 0.0 || self.a_fast[j][i] > 0.0
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.n_species();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let any = self.a_slow[i][j] + self.a_slow[j][i] + self.a_fast[i][j] + self.a_fast[j][i];
                if any > 0.0 {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Two-species generator with rates `sqrt(alpha/beta)` (1 -> 2) and `sqrt(beta/alpha)` (2 -> 1), all fast.
    pub fn two_species(params: &SystemParams) -> Self {
        let (a, b) = params.reaction_rates();
        Self {
            species: vec!["c1".into(), "c2".into()],
            a_slow: vec![vec![0.0; 2]; 2],
            a_fast: vec![vec![-a, b], vec![a, -b]],
            delta: params.delta.to_vec(),
        }
    }

    /// Chain `0 - 1 - 2` with a fast edge `{0,1}` and a slow edge `{1,2}`.
    /// Rates follow from the weights `w` by `A_ij = k_ij sqrt(w_i / w_j)`.
    pub fn chain3(w: [f64; 3], k_fast: f64, k_slow: f64, delta: [f64; 3]) -> Self {
        let mut a_fast = vec![vec![0.0; 3]; 3];
        let mut a_slow = vec![vec![0.0; 3]; 3];
        set_edge(&mut a_fast, &w, 0, 1, k_fast);
        set_edge(&mut a_slow, &w, 1, 2, k_slow);
        Self {
            species: vec!["a".into(), "b".into(), "c".into()],
            a_slow,
            a_fast,
            delta: delta.to_vec(),
        }
    }

    /// Complete graph on `n` species with random weights and random symmetric
    /// edge weights; edges `{2k, 2k+1}` are fast, all others slow.
    pub fn random_detailed_balance(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let mut a_fast = vec![vec![0.0; n]; n];
        let mut a_slow = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in i + 1..n {
                let k = rng.gen_range(0.5..2.0);
                if j == i + 1 && i % 2 == 0 {
                    set_edge(&mut a_fast, &w, i, j, k);
                } else {
                    set_edge(&mut a_slow, &w, i, j, k);
                }
            }
        }
        Self {
            species: (0..n).map(|i| format!("s{i}")).collect(),
            a_slow,
            a_fast,
            delta: (0..n).map(|_| rng.gen_range(0.5..2.0)).collect(),
        }
    }

    /// Multiplies the rate `j -> i` by `factor` and restores the column sum.
    pub fn perturbed(&self, i: usize, j: usize, factor: f64) -> Self {
        let mut out = self.clone();
        for m in [&mut out.a_slow, &mut out.a_fast] {
            let old = m[i][j];
            m[i][j] = old * factor;
            m[j][j] -= old * (factor - 1.0);
        }
        out
    }
}

fn set_edge(a: &mut [Vec<f64>], w: &[f64], i: usize, j: usize, k: f64) {
    let aij = k * (w[i] / w[j]).sqrt();
    let aji = k * (w[j] / w[i]).sqrt();
    a[i][j] += aij;
    a[j][i] += aji;
    a[j][j] -= aij;
    a[i][i] -= aji;
}

/// Normalized null vector of a generator by Grassmann-Taksar-Heyman state
/// reduction, which avoids subtractions and keeps componentwise relative accuracy
/// even when rates span many orders of magnitude.
pub fn stationary_vector(a: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = a.len();
    if n == 0 || a.iter().any(|r| r.len() != n) {
        return Err(Error::Shape("generator must be square".into()));
    }
    // p[k][j]: rate k -> j
    let mut p: Vec<Vec<f64>> = (0..n).map(|k| (0..n).map(|j| if j == k { 0.0 } else { a[j][k] }).collect()).collect();
    for k in (1..n).rev() {
        let s: f64 = p[k][..k].iter().sum();
        if !(s > 0.0) {
            return Err(Error::Domain(format!("state {k} cannot reach the states before it")));
        }
        for i in 0..k {
            p[i][k] /= s;
        }
        for i in 0..k {
            let pik = p[i][k];
            if pik != 0.0 {
                for j in 0..k {
                    if j != i {
                        p[i][j] += pik * p[k][j];
                    }
                }
            }
        }
    }
    let mut w = vec![0.0; n];
    w[0] = 1.0;
    for k in 1..n {
        w[k] = (0..k).map(|i| w[i] * p[i][k]).sum();
    }
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / total).collect())
}

/// Limit of `w^eps` as `eps -> 0`, by balancing along a spanning tree with the
/// limiting rate ratios. `None` if the limiting rate graph is disconnected.
pub fn limit_stationary_vector(gen: &MarkovGenerator) -> Option<Vec<f64>> {
    let n = gen.n_species();
    let ratio = |i: usize, j: usize| -> Option<f64> {
        // w_i / w_j = A_ij / A_ji at leading order in eps
        let (fij, fji) = (gen.a_fast[i][j], gen.a_fast[j][i]);
        if fij > 0.0 && fji > 0.0 {
            Some(fij / fji)
        } else if fij == 0.0 && fji == 0.0 && gen.a_slow[i][j] > 0.0 && gen.a_slow[j][i] > 0.0 {
            Some(gen.a_slow[i][j] / gen.a_slow[j][i])
        } else {
            None
        }
    };
    let mut w = vec![f64::NAN; n];
    w[0] = 1.0;
    let mut stack = vec![0];
    while let Some(j) = stack.pop() {
        for i in 0..n {
            if w[i].is_nan() {
                if let Some(r) = ratio(i, j) {
                    w[i] = r * w[j];
                    stack.push(i);
                }
            }
        }
    }
    if w.iter().any(|x| x.is_nan()) {
        return None;
    }
    let s: f64 = w.iter().sum();
    Some(w.into_iter().map(|x| x / s).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeneratorReport {
    pub valid: bool,
    pub failures: Vec<String>,
    /// `(eps, w^eps)` over the sweep.
    pub w_eps: Vec<(f64, Vec<f64>)>,
    pub w_limit: Option<Vec<f64>>,
    /// `max_i |w^eps_i - w_limit_i|` over the sweep.
    pub limit_errors: Vec<f64>,
    pub max_balance_defect: f64,
}

impl GeneratorReport {
    pub fn into_result(self) -> Result<Self> {
        if self.valid {
            Ok(self)
        } else {
            Err(Error::Domain(format!("invalid generator: {}", self.failures.join("; "))))
        }
    }
}

pub fn validate_generator(gen: &MarkovGenerator) -> GeneratorReport {
    validate_generator_over(gen, &DEFAULT_EPS_SWEEP)
}

pub fn validate_generator_over(gen: &MarkovGenerator, sweep: &[f64]) -> GeneratorReport {
    let mut report = GeneratorReport {
        valid: false,
        failures: Vec::new(),
        w_eps: Vec::new(),
        w_limit: None,
        limit_errors: Vec::new(),
        max_balance_defect: 0.0,
    };
    if let Err(e) = gen.check_shape() {
        report.failures.push(e.to_string());
        return report;
    }
    let n = gen.n_species();
    for (name, m) in [("A_slow", &gen.a_slow), ("A_fast", &gen.a_fast)] {
        let scale = m.iter().flatten().fold(0.0f64, |a, x| a.max(x.abs())).max(1.0);
        for j in 0..n {
            let s: f64 = (0..n).map(|i| m[i][j]).sum();
            if s.abs() > TOL_GENERATOR * scale {
                report.failures.push(format!("{name} column {j} sums to {s:e}"));
            }
            for i in 0..n {
                if i != j && m[i][j] < 0.0 {
                    report.failures.push(format!("{name}[{i}][{j}] = {} is negative", m[i][j]));
                }
            }
        }
    }
    if !report.failures.is_empty() {
        return report;
    }
    for &eps in sweep {
        let a = gen.assembled(eps);
        let w = match stationary_vector(&a) {
            Ok(w) => w,
            Err(e) => {
                report.failures.push(format!("eps = {eps:e}: no stationary vector ({e})"));
                continue;
            }
        };
        if w.iter().any(|x| !(*x > 0.0)) {
            report.failures.push(format!("eps = {eps:e}: stationary vector not positive"));
        }
        let mut defect = 0.0f64;
        for i in 0..n {
            for j in i + 1..n {
                let (f, b) = (a[i][j] * w[j], a[j][i] * w[i]);
                let d = (f - b).abs() / f.abs().max(b.abs()).max(f64::MIN_POSITIVE);
                defect = defect.max(if f == b { 0.0 } else { d });
            }
        }
        report.max_balance_defect = report.max_balance_defect.max(defect);
        if defect > TOL_GENERATOR {
            report
                .failures
                .push(format!("eps = {eps:e}: detailed balance violated (relative defect {defect:e})"));
        }
        report.w_eps.push((eps, w));
    }
    report.w_limit = limit_stationary_vector(gen);
    match &report.w_limit {
        None => report.failures.push("limiting rate graph is not connected".into()),
        Some(wl) => {
            if wl.iter().any(|x| !(*x > 0.0)) {
                report.failures.push("limit stationary vector not positive".into());
            }
            report.limit_errors = report
                .w_eps
                .iter()
                .map(|(_, w)| w.iter().zip(wl).fold(0.0f64, |a, (x, y)| a.max((x - y).abs())))
                .collect();
            let errs = &report.limit_errors;
            if errs.windows(2).any(|p| p[1] > p[0] + 1e-12) {
                report.failures.push(format!("w^eps does not approach w_limit monotonically: {errs:?}"));
            }
            if let (Some(&last), Some(&eps)) = (errs.last(), sweep.last()) {
                if last > 1e-9f64.max(100.0 * eps) {
                    report.failures.push(format!("w^eps at eps = {eps:e} is {last:e} away from w_limit"));
                }
            }
        }
    }
    report.valid = report.failures.is_empty();
    report
}

/// Symmetric edge weights `kappa_ij = A_ij sqrt(w_j / w_i)` and their split
/// `kappa = slow + fast / eps`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KappaCoefficients {
    pub epsilon: f64,
    pub total: Vec<Vec<f64>>,
    pub slow: Vec<Vec<f64>>,
    pub fast: Vec<Vec<f64>>,
    pub w: Vec<f64>,
}

impl KappaCoefficients {
    pub fn max_asymmetry(&self) -> f64 {
        let n = self.total.len();
        let mut out = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                out = out.max((self.total[i][j] - self.total[j][i]).abs());
            }
        }
        out
    }

    /// One mobility edge per connected pair, weight `(kappa_ij + kappa_ji) / 2`.
    pub fn mobility(&self, gen: &MarkovGenerator) -> Mobility {
        Mobility {
            delta: gen.delta.clone(),
            edges: gen
                .edges()
                .into_iter()
                .map(|(i, j)| Edge {
                    i,
                    j,
                    kappa: 0.5 * (self.total[i][j] + self.total[j][i]),
                })
                .collect(),
        }
    }
}

pub fn kappa_coefficients(gen: &MarkovGenerator, epsilon: f64) -> Result<KappaCoefficients> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Domain(format!("epsilon = {epsilon} must be positive")));
    }
    validate_generator_over(gen, &[epsilon]).into_result()?;
    let a = gen.assembled(epsilon);
    let w = stationary_vector(&a)?;
    let n = gen.n_species();
    let weigh = |m: &[Vec<f64>]| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| (0..n).map(|j| if i == j { 0.0 } else { m[i][j] * (w[j] / w[i]).sqrt() }).collect())
            .collect()
    };
    Ok(KappaCoefficients {
        epsilon,
        total: weigh(&a),
        slow: weigh(&gen.a_slow),
        fast: weigh(&gen.a_fast),
        w,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultispeciesDissipation {
    pub breakdown: DissipationBreakdown,
    pub slow_vel: f64,
    pub slow_slope: f64,
    pub fast_vel: f64,
    pub fast_slope: f64,
}

pub fn multispecies_dissipation(
    traj: &Trajectory,
    gen: &MarkovGenerator,
    tilt: &Tilt,
    epsilon: f64,
) -> Result<MultispeciesDissipation> {
    multispecies_dissipation_with(traj, gen, tilt, epsilon, TimeRule::default())
}

pub fn multispecies_dissipation_with(
    traj: &Trajectory,
    gen: &MarkovGenerator,
    tilt: &Tilt,
    epsilon: f64,
    rule: TimeRule,
) -> Result<MultispeciesDissipation> {
    if traj.n_species() != gen.n_species() {
        return Err(Error::Shape("trajectory and generator disagree on the species count".into()));
    }
    let kappa = kappa_coefficients(gen, epsilon)?;
    let mobility = kappa.mobility(gen);
    let wv = stationary_measure_weighted(&traj.grid, &kappa.w, tilt)?;
    let (breakdown, per_edge) = network_dissipation(traj, &mobility, &wv, rule)?;
    let mut out = MultispeciesDissipation {
        breakdown,
        slow_vel: 0.0,
        slow_slope: 0.0,
        fast_vel: 0.0,
        fast_slope: 0.0,
    };
    for (edge, (vel, sl)) in mobility.edges.iter().zip(per_edge) {
        if gen.is_fast_edge(edge.i, edge.j) {
            out.fast_vel += vel;
            out.fast_slope += sl;
        } else {
            out.slow_vel += vel;
            out.slow_slope += sl;
        }
    }
    Ok(out)
}

/// Untilted network reaction-diffusion solve; the initial state must have total mass one.
pub fn solve_network(
    grid: &Grid,
    initial: &State,
    gen: &MarkovGenerator,
    epsilon: f64,
    config: &SolverConfig,
) -> Result<Trajectory> {
    validate_generator_over(gen, &[epsilon]).into_result()?;
    initial.check_probability(grid, 1e-9)?;
    let tilt = Tilt::zero(grid, gen.n_species());
    let stepper = Stepper::network(grid, initial, gen.assembled(epsilon), &gen.delta, &tilt, config)?;
    integrate(stepper, config)
}

/// Connected components of the fast-edge graph.
pub fn fast_components(gen: &MarkovGenerator) -> Vec<Vec<usize>> {
    let n = gen.n_species();
    let mut label = vec![usize::MAX; n];
    let mut comps = Vec::new();
    for s in 0..n {
        if label[s] != usize::MAX {
            continue;
        }
        let id = comps.len();
        let mut comp = vec![s];
        label[s] = id;
        let mut k = 0;
        while k < comp.len() {
            let i = comp[k];
            for j in 0..n {
                if label[j] == usize::MAX && gen.is_fast_edge(i, j) {
                    label[j] = id;
                    comp.push(j);
                }
            }
            k += 1;
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps
}

/// Sums densities over each fast component.
pub fn coarse_grain_network(state: &State, components: &[Vec<usize>]) -> State {
    let n = state.n_cells();
    State::from_raw(
        components
            .iter()
            .map(|comp| (0..n).map(|k| comp.iter().map(|&i| state.species(i)[k]).sum()).collect())
            .collect(),
    )
}

/// Splits each coarse density inside its component in proportion to `w_limit`.
pub fn lift_network(hat: &State, components: &[Vec<usize>], w_limit: &[f64]) -> Result<State> {
    if hat.n_species() != components.len() {
        return Err(Error::Shape("one coarse density per component expected".into()));
    }
    let mut c = vec![vec![0.0; hat.n_cells()]; w_limit.len()];
    for (comp, ch) in components.iter().zip(hat.densities()) {
        let wsum: f64 = comp.iter().map(|&i| w_limit[i]).sum();
        for &i in comp {
            c[i] = ch.iter().map(|x| w_limit[i] / wsum * x).collect();
        }
    }
    Ok(State::from_raw(c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dissipation::dissipation_functional;
    use crate::functionals::slope_general;
    use crate::solver::solve_eps_system;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn eq2() -> (SystemParams, MarkovGenerator) {
        let p = SystemParams::new([1.0, 2.0], 1.0, 3.0, 0.1).unwrap();
        let g = MarkovGenerator::two_species(&p);
        (p, g)
    }

    #[test]
    fn two_species_generator_is_valid_with_known_weights() {
        let (_, g) = eq2();
        let r = validate_generator(&g);
        assert!(r.valid, "{:?}", r.failures);
        for (_, w) in &r.w_eps {
            assert!((w[0] - 0.75).abs() < 1e-15 && (w[1] - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn kappa_of_two_species_is_one_over_eps() {
        let (_, g) = eq2();
        for eps in [1e-1, 1e-2, 1e-3, 1e-4, 1e-8] {
            let k = kappa_coefficients(&g, eps).unwrap();
            let rel = (k.total[0][1] * eps - 1.0).abs();
            assert!(rel <= 4.0 * f64::EPSILON, "eps {eps}: {rel:e}");
            assert!(k.max_asymmetry() <= 1e-13 / eps);
        }
    }

    #[test]
    fn reduction_matches_dense_null_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 2..7 {
            let mut a = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        a[i][j] = rng.gen_range(0.1..3.0);
                        a[j][j] -= a[i][j];
                    }
                }
            }
            let mut m = a.clone();
            m[n - 1] = vec![1.0; n];
            let mut rhs = vec![0.0; n];
            rhs[n - 1] = 1.0;
            let dense = crate::linalg::solve_dense(m, rhs).unwrap();
            let w = stationary_vector(&a).unwrap();
            for (x, y) in w.iter().zip(&dense) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn no_fast_part_gives_eps_independent_weights() {
        let mut g = MarkovGenerator::chain3([0.5, 0.3, 0.2], 1.0, 2.0, [1.0; 3]);
        for i in 0..3 {
            for j in 0..3 {
                g.a_slow[i][j] += g.a_fast[i][j];
                g.a_fast[i][j] = 0.0;
            }
        }
        let r = validate_generator(&g);
        assert!(r.valid, "{:?}", r.failures);
        let w0 = &r.w_eps[0].1;
        for (_, w) in &r.w_eps {
            for (a, b) in w.iter().zip(w0) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn chain_weights_match_tree_balancing() {
        // tree balancing: w1/w0 = A10/A01, w2/w1 = A21/A12
        let g = MarkovGenerator::chain3([0.5, 0.3, 0.2], 3.0, 0.7, [1.0; 3]);
        let r = validate_generator(&g);
        assert!(r.valid, "{:?}", r.failures);
        for (eps, w) in &r.w_eps {
            let a = g.assembled(*eps);
            let mut t = [1.0, a[1][0] / a[0][1], 0.0];
            t[2] = t[1] * a[2][1] / a[1][2];
            let s: f64 = t.iter().sum();
            for (x, y) in w.iter().zip(t) {
                assert!((x - y / s).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn symmetric_generator_kappa_is_rate() {
        let k = 1.7;
        let g = MarkovGenerator {
            species: vec!["a".into(), "b".into(), "c".into()],
            a_slow: vec![vec![-2.0 * k, k, k], vec![k, -2.0 * k, k], vec![k, k, -2.0 * k]],
            a_fast: vec![vec![0.0; 3]; 3],
            delta: vec![1.0; 3],
        };
        let kc = kappa_coefficients(&g, 0.5).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!((kc.total[i][j] - k).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn random_network_accepted_and_perturbation_rejected() {
        let g = MarkovGenerator::random_detailed_balance(4, 7);
        let r = validate_generator(&g);
        assert!(r.valid, "{:?}", r.failures);
        let bad = g.perturbed(0, 2, 1.5);
        let r = validate_generator(&bad);
        assert!(!r.valid);
        assert!(r.failures.iter().any(|f| f.contains("detailed balance")), "{:?}", r.failures);
        assert!(kappa_coefficients(&bad, 0.1).is_err());
    }

    #[test]
    fn sign_and_column_failures_are_itemized() {
        let (_, mut g) = eq2();
        g.a_slow[0][1] = -0.1;
        g.a_slow[1][1] = 0.1;
        g.a_fast[0][0] += 0.5;
        let r = validate_generator(&g);
        assert!(!r.valid);
        assert!(r.failures.iter().any(|f| f.contains("negative")));
        assert!(r.failures.iter().any(|f| f.contains("A_fast column 0")));
    }

    #[test]
    fn json_schema_is_strict() {
        let ok = r#"{"species":["a","b"],"A_slow":[[0,0],[0,0]],"A_fast":[[-1,2],[1,-2]],"delta":[1,2]}"#;
        let g = MarkovGenerator::from_json_str(ok).unwrap();
        assert!(validate_generator(&g).valid);
        let extra = r#"{"species":["a","b"],"A_slow":[[0,0],[0,0]],"A_fast":[[-1,2],[1,-2]],"delta":[1,2],"x":1}"#;
        assert!(MarkovGenerator::from_json_str(extra).is_err());
        let ragged = r#"{"species":["a","b"],"A_slow":[[0,0],[0]],"A_fast":[[-1,2],[1,-2]],"delta":[1,2]}"#;
        assert!(MarkovGenerator::from_json_str(ragged).is_err());
    }

    #[test]
    fn two_species_network_dissipation_matches_pair_functional() {
        let (p, g) = eq2();
        let grid = Grid::new(20).unwrap();
        let eps = 0.1;
        let c1 = grid.sample(|x| 0.75 * (1.0 + 0.4 * (std::f64::consts::PI * x).cos()));
        let c2 = grid.sample(|x| 0.25 * (1.0 - 0.3 * (std::f64::consts::PI * x).cos()));
        let init = State::new(&grid, vec![c1, c2]).unwrap();
        let tilt = Tilt::zero(&grid, 2);
        let cfg = SolverConfig::new(1e-3, 0.01).unwrap();
        let traj = solve_eps_system(&grid, &init, &p.with_epsilon(eps), &tilt, &cfg).unwrap();
        let a = dissipation_functional(&traj, &p, &tilt, eps).unwrap();
        let b = multispecies_dissipation(&traj, &g, &tilt, eps).unwrap();
        assert!((a.total() - b.breakdown.total()).abs() <= 1e-10 * a.total());
        assert_eq!(b.slow_vel + b.slow_slope, 0.0);
        assert!((b.fast_slope - a.slope_react).abs() <= 1e-10 * a.slope_react);
    }

    #[test]
    fn equilibrated_states_have_no_reaction_slope() {
        let g = MarkovGenerator::chain3([0.5, 0.3, 0.2], 3.0, 0.7, [1.0, 2.0, 0.5]);
        let grid = Grid::new(12).unwrap();
        let kc = kappa_coefficients(&g, 0.01).unwrap();
        let tilt = Tilt::zero(&grid, 3);
        let wv = stationary_measure_weighted(&grid, &kc.w, &tilt).unwrap();
        let mob = kc.mobility(&g);
        let profile = grid.sample(|x| 1.0 + 0.5 * x);
        let eq = State::from_raw((0..3).map(|i| profile.iter().map(|p| p * wv.cell[i][0]).collect()).collect());
        assert!(slope_general(&grid, &eq, &mob, &wv).unwrap().react.abs() < 1e-14);

        // equal rho on the fast edge only
        let rho = [1.0, 1.0, 2.0];
        let off = State::from_raw((0..3).map(|i| vec![rho[i] * wv.cell[i][0]; 12]).collect());
        let fast = Mobility { delta: vec![0.0; 3], edges: vec![mob.edges[0]] };
        let slow = Mobility { delta: vec![0.0; 3], edges: vec![mob.edges[1]] };
        assert!(g.is_fast_edge(mob.edges[0].i, mob.edges[0].j));
        assert_eq!(slope_general(&grid, &off, &fast, &wv).unwrap().react, 0.0);
        assert!(slope_general(&grid, &off, &slow, &wv).unwrap().react > 0.0);
    }

    #[test]
    fn network_solver_conserves_mass_and_positivity() {
        let g = MarkovGenerator::random_detailed_balance(4, 3);
        let grid = Grid::new(30).unwrap();
        let init = State::new(
            &grid,
            (0..4)
                .map(|i| grid.sample(|x| 0.25 * (1.0 + 0.5 * ((i + 1) as f64 * 3.0 * x).cos())))
                .collect(),
        )
        .unwrap();
        let m0 = crate::state::total_mass(&grid, &init);
        let init = State::new(&grid, init.densities().iter().map(|s| s.iter().map(|x| x / m0).collect()).collect()).unwrap();
        let cfg = SolverConfig::new(1e-3, 0.05).unwrap();
        let traj = solve_network(&grid, &init, &g, 1e-3, &cfg).unwrap();
        for s in &traj.states {
            assert!((crate::state::total_mass(&grid, s) - 1.0).abs() < 1e-12);
            assert!(s.min_density() > 0.0);
        }
        assert!(crate::state::gce_residual(&traj).unwrap().max_abs() < 1e-9);
    }

    #[test]
    fn fast_components_and_lift_roundtrip() {
        let g = MarkovGenerator::random_detailed_balance(4, 11);
        let comps = fast_components(&g);
        assert_eq!(comps, vec![vec![0, 1], vec![2, 3]]);
        let wl = limit_stationary_vector(&g).unwrap();
        let hat = State::from_raw(vec![vec![0.4, 0.6], vec![0.6, 0.4]]);
        let lifted = lift_network(&hat, &comps, &wl).unwrap();
        let back = coarse_grain_network(&lifted, &comps);
        for (a, b) in back.densities().iter().flatten().zip(hat.densities().iter().flatten()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn kappa_symmetric_on_random_networks(seed in 0u64..10_000, n in 2usize..7, le in -6.0f64..0.0) {
            let g = MarkovGenerator::random_detailed_balance(n, seed);
            let eps = 10f64.powf(le);
            let k = kappa_coefficients(&g, eps).unwrap();
            for i in 0..n {
                for j in 0..n {
                    let scale = k.total[i][j].abs().max(1.0);
                    prop_assert!((k.total[i][j] - k.total[j][i]).abs() <= 1e-13 * scale);
                    let split = k.slow[i][j] + k.fast[i][j] / eps;
                    prop_assert!((split - k.total[i][j]).abs() <= 1e-12 * scale);
                }
            }
        }

        #[test]
        fn fast_slow_labels_do_not_depend_on_eps(seed in 0u64..1000) {
            let g = MarkovGenerator::random_detailed_balance(5, seed);
            let k1 = kappa_coefficients(&g, 1e-1).unwrap();
            let k2 = kappa_coefficients(&g, 1e-5).unwrap();
            for (i, j) in g.edges() {
                prop_assert_eq!(k1.fast[i][j] > 0.0, k2.fast[i][j] > 0.0);
                prop_assert_eq!(k1.fast[i][j] > 0.0, g.is_fast_edge(i, j));
            }
        }
    }
}
