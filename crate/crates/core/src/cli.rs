//! Experiment configuration, the studies behind the `edpflow` binary, and
//! report emission.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::coarsegrain::{build_recovery_sequence, coarse_grain, coarse_params, lift, reconstruct_from_coarse, RecoveryExponents};
use crate::dissipation::{dissipation_functional, effective_dissipation, effective_edb_residual, lifted_energy};
use crate::error::{Error, Result};
use crate::functionals::{energy, stationary_measure, StationaryMeasure};
use crate::grid::Grid;
use crate::io::{write_table, write_trajectory_csv};
use crate::multispecies::{kappa_coefficients, validate_generator, MarkovGenerator};
use crate::params::{SystemParams, Tilt};
use crate::solver::{graded_times, integrate_on, solve_effective, solve_eps_system, SolverConfig, Stepper};
use crate::state::{State, Trajectory};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

/// Acceptance thresholds used for the pass/fail flags.
pub mod thresholds {
    pub const MIXED_FIT_REL: f64 = 0.02;
    pub const DEFECT_SLOPE: f64 = 0.9;
    pub const EDB_ORDER: f64 = 0.8;
    pub const EDB_FINEST_REL: f64 = 1e-3;
    pub const RECOVERY_COST: f64 = 1e-4;
    pub const KAPPA_SYMMETRY: f64 = 1e-13;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    EpsSweep,
    EdbRefinement,
    MixedDiffusionFit,
    RecoveryStudy,
    MultispeciesCheck,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub n_cells: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsSpec {
    pub delta: [f64; 2],
    pub alpha: f64,
    pub beta: f64,
}

impl ParamsSpec {
    pub fn at(&self, epsilon: f64) -> Result<SystemParams> {
        SystemParams::new(self.delta, self.alpha, self.beta, epsilon)
    }
}

/// Potentials `V_1, V_2` on `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TiltSpec {
    #[default]
    Zero,
    /// `V_i = offset_i + slope_i x`.
    Affine { offset: [f64; 2], slope: [f64; 2] },
    /// `V_i = amplitude_i cos(frequency_i pi x)`.
    Cosine { amplitude: [f64; 2], frequency: [f64; 2] },
}

impl TiltSpec {
    pub fn build(&self, grid: &Grid) -> Result<Tilt> {
        match *self {
            TiltSpec::Zero => Ok(Tilt::zero(grid, 2)),
            TiltSpec::Affine { offset, slope } => Tilt::from_fn(grid, 2, |i, x| offset[i] + slope[i] * x),
            TiltSpec::Cosine { amplitude, frequency } => {
                Tilt::from_fn(grid, 2, |i, x| amplitude[i] * (frequency[i] * PI * x).cos())
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, TiltSpec::Zero)
    }
}

/// Initial data with total mass one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSpec {
    /// `c_hat = 1 + amplitude cos(pi x)` split along the slow manifold.
    SlowManifold { amplitude: f64 },
    /// `c_i = mass_i (1 + amplitude_i cos(pi x))`.
    Product { mass: [f64; 2], amplitude: [f64; 2] },
}

impl Default for InitialSpec {
    fn default() -> Self {
        InitialSpec::SlowManifold { amplitude: 0.5 }
    }
}

impl InitialSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |a: f64| !(a.abs() < 1.0);
        match *self {
            InitialSpec::SlowManifold { amplitude } if bad(amplitude) => {
                Err(Error::Config("initial.amplitude must lie in (-1, 1)".into()))
            }
            InitialSpec::Product { mass, amplitude } => {
                if amplitude.iter().any(|a| bad(*a)) {
                    return Err(Error::Config("initial.amplitude entries must lie in (-1, 1)".into()));
                }
                if mass.iter().any(|m| !(*m > 0.0)) || (mass[0] + mass[1] - 1.0).abs() > 1e-12 {
                    return Err(Error::Config("initial.mass must be positive and sum to 1".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn build(&self, grid: &Grid, params: &SystemParams, tilt: &Tilt) -> Result<State> {
        match *self {
            InitialSpec::SlowManifold { amplitude } => {
                let hat = grid.sample(|x| 1.0 + amplitude * (PI * x).cos());
                let cp = coarse_params(grid, params, tilt)?;
                let wv = stationary_measure(grid, params, tilt)?;
                State::new(grid, lift(&cp, &wv, &hat))
            }
            InitialSpec::Product { mass, amplitude } => State::new(
                grid,
                (0..2).map(|i| grid.sample(|x| mass[i] * (1.0 + amplitude[i] * (PI * x).cos()))).collect(),
            ),
        }
    }
}

/// Geometric step growth from `dt0_fraction * eps` up to the solver `dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradedSpec {
    pub dt0_fraction: f64,
    pub growth: f64,
}

impl Default for GradedSpec {
    fn default() -> Self {
        Self {
            dt0_fraction: 0.1,
            growth: 1.02,
        }
    }
}

fn default_levels() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub grid: GridSpec,
    pub solver: SolverConfig,
    pub params: ParamsSpec,
    #[serde(default)]
    pub tilt: TiltSpec,
    #[serde(default)]
    pub initial: InitialSpec,
    pub epsilons: Vec<f64>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// `edb_refinement`: number of simultaneous `(h, dt)` halvings plus one.
    #[serde(default = "default_levels")]
    pub levels: usize,
    /// `eps_sweep`: step grading for the initial layer; `null` for uniform steps.
    #[serde(default)]
    pub graded_steps: Option<GradedSpec>,
    /// `eps_sweep`: also evaluate the dissipation breakdown per run.
    #[serde(default)]
    pub dissipation: bool,
    /// Dump every computed trajectory as CSV.
    #[serde(default)]
    pub write_trajectories: bool,
    /// `multispecies_check`: optional generator document to validate as well.
    #[serde(default)]
    pub generator_file: Option<PathBuf>,
}

const TOP_KEYS: &[&str] = &[
    "kind",
    "grid",
    "solver",
    "params",
    "tilt",
    "initial",
    "epsilons",
    "output_dir",
    "seed",
    "levels",
    "graded_steps",
    "dissipation",
    "write_trajectories",
    "generator_file",
];
const NESTED_KEYS: &[(&str, &[&str])] = &[
    ("grid", &["n_cells"]),
    ("solver", &["dt", "t_final", "scheme", "record_every", "crank_nicolson"]),
    ("params", &["delta", "alpha", "beta"]),
    ("graded_steps", &["dt0_fraction", "growth"]),
];

/// Every key of `doc` (top level and the fixed nested objects) that the schema does not know.
pub fn unknown_keys(doc: &Value) -> Vec<String> {
    let mut out = Vec::new();
    if let Some(obj) = doc.as_object() {
        for k in obj.keys() {
            if !TOP_KEYS.contains(&k.as_str()) {
                out.push(k.clone());
            }
        }
        for (name, keys) in NESTED_KEYS {
            if let Some(inner) = obj.get(*name).and_then(Value::as_object) {
                out.extend(inner.keys().filter(|k| !keys.contains(&k.as_str())).map(|k| format!("{name}.{k}")));
            }
        }
    }
    out
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("not valid JSON: {e}")))?;
        let unknown = unknown_keys(&doc);
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Error::Config(m);
        if self.grid.n_cells < 4 {
            return Err(cfg("grid.n_cells must be at least 4".into()));
        }
        self.solver.validate().map_err(|e| cfg(format!("solver: {e}")))?;
        if self.epsilons.is_empty() {
            return Err(cfg("epsilons must not be empty".into()));
        }
        if self.epsilons.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return Err(cfg("epsilons must be positive and finite".into()));
        }
        if self.epsilons.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(cfg("epsilons must be strictly decreasing".into()));
        }
        for &e in &self.epsilons {
            self.params.at(e).map_err(|err| cfg(format!("params: {err}")))?;
        }
        self.initial.validate()?;
        if let Some(g) = self.graded_steps {
            if !(g.dt0_fraction > 0.0 && g.growth >= 1.0 && g.growth.is_finite()) {
                return Err(cfg("graded_steps needs dt0_fraction > 0 and growth >= 1".into()));
            }
        }
        if self.kind == ExperimentKind::EdbRefinement && self.levels < 2 {
            return Err(cfg("levels must be at least 2".into()));
        }
        if self.kind == ExperimentKind::RecoveryStudy && self.solver.record_every != 1 {
            return Err(cfg("recovery_study needs record_every = 1 (uniform steps)".into()));
        }
        if let Some(p) = &self.generator_file {
            if !p.is_file() {
                return Err(cfg(format!("generator_file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// A complete `mixed_diffusion_fit` configuration reproducing the reference setup.
    pub fn defaults() -> Self {
        Self::defaults_for(ExperimentKind::MixedDiffusionFit)
    }

    /// Reference configuration for each study.
    pub fn defaults_for(kind: ExperimentKind) -> Self {
        let base = Self {
            kind,
            grid: GridSpec { n_cells: 200 },
            solver: SolverConfig::new(1e-4, 0.1).expect("valid"),
            params: ParamsSpec {
                delta: [1.0, 2.0],
                alpha: 1.0,
                beta: 3.0,
            },
            tilt: TiltSpec::Zero,
            initial: InitialSpec::default(),
            epsilons: vec![1e-1, 1e-2, 1e-3, 1e-4],
            output_dir: PathBuf::from("out/mixed_diffusion_fit"),
            seed: 0,
            levels: default_levels(),
            graded_steps: None,
            dissipation: false,
            write_trajectories: false,
            generator_file: None,
        };
        let smooth_tilt = TiltSpec::Cosine {
            amplitude: [0.5, 0.3],
            frequency: [1.0, 2.0],
        };
        match kind {
            ExperimentKind::MixedDiffusionFit => base,
            ExperimentKind::EpsSweep => Self {
                initial: InitialSpec::Product {
                    mass: [0.5, 0.5],
                    amplitude: [0.5, 0.5],
                },
                epsilons: vec![1e-1, 1e-2, 1e-3, 1e-4, 1e-5],
                graded_steps: Some(GradedSpec::default()),
                output_dir: PathBuf::from("out/eps_sweep"),
                ..base
            },
            ExperimentKind::EdbRefinement => Self {
                grid: GridSpec { n_cells: 25 },
                solver: SolverConfig::new(4e-3, 0.1).expect("valid"),
                tilt: smooth_tilt,
                initial: InitialSpec::Product {
                    mass: [0.5, 0.5],
                    amplitude: [0.5, -0.3],
                },
                epsilons: vec![1e-1],
                output_dir: PathBuf::from("out/edb_refinement"),
                ..base
            },
            ExperimentKind::RecoveryStudy => Self {
                grid: GridSpec { n_cells: 50 },
                solver: SolverConfig::new(1e-3, 0.1).expect("valid"),
                tilt: smooth_tilt,
                epsilons: vec![1e-1, 1e-2, 1e-3, 1e-4, 1e-5],
                output_dir: PathBuf::from("out/recovery_study"),
                ..base
            },
            ExperimentKind::MultispeciesCheck => Self {
                grid: GridSpec { n_cells: 50 },
                solver: SolverConfig::new(1e-3, 0.05).expect("valid"),
                epsilons: vec![1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6],
                seed: 20_240_601,
                output_dir: PathBuf::from("out/multispecies_check"),
                ..base
            },
        }
    }
}

/// `2 int c_hat cos(pi x) dx`, summing species if there are several.
pub fn cosine_mode(grid: &Grid, state: &State) -> f64 {
    let xs = grid.centers();
    let total: f64 = (0..state.n_cells())
        .map(|k| {
            let c: f64 = state.densities().iter().map(|s| s[k]).sum();
            c * (PI * xs[k]).cos()
        })
        .sum();
    2.0 * total / grid.n_cells() as f64
}

/// Least-squares slope and intercept of `y` against `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    let n = x.len() as f64;
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Fit("need at least two points".into()));
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if !(sxx > 0.0) || !sxy.is_finite() {
        return Err(Error::Fit("degenerate abscissae".into()));
    }
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// Slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(Error::Fit("log-log fit needs positive data".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    Ok(linear_fit(&lx, &ly)?.0)
}

/// Decay rate of the first cosine mode divided by `pi^2`: the measured
/// diffusion coefficient of a trajectory started from `1 + a cos(pi x)`.
pub fn fit_decay_rate(traj: &Trajectory) -> Result<f64> {
    let amps: Vec<f64> = traj.states.iter().map(|s| cosine_mode(&traj.grid, s)).collect();
    let scale = traj.states[0].densities().iter().flatten().fold(0.0f64, |a, x| a.max(x.abs()));
    if amps.iter().any(|a| !(a.abs() > 1e-12 * scale.max(f64::MIN_POSITIVE)) || !a.is_finite()) {
        return Err(Error::Fit("cosine mode amplitude vanishes or is not finite".into()));
    }
    if amps.windows(2).any(|w| w[0].signum() != w[1].signum()) {
        return Err(Error::Fit("cosine mode changes sign".into()));
    }
    let logs: Vec<f64> = amps.iter().map(|a| a.abs().ln()).collect();
    let (slope, _) = linear_fit(&traj.times, &logs)?;
    Ok(-slope / (PI * PI))
}

/// `int (sqrt(rho_1) - sqrt(rho_2))^2 dx` with `rho_i = c_i / w_i^V`.
pub fn manifold_defect_density(grid: &Grid, state: &State, wv: &StationaryMeasure) -> f64 {
    let vals: Vec<f64> = (0..state.n_cells())
        .map(|k| {
            let r1 = state.species(0)[k] / wv.cell[0][k];
            let r2 = state.species(1)[k] / wv.cell[1][k];
            (r1.sqrt() - r2.sqrt()).powi(2)
        })
        .collect();
    grid.integrate(&vals)
}

/// Trapezoid rule in time of the manifold defect density along a trajectory.
pub fn manifold_defect_integral(traj: &Trajectory, wv: &StationaryMeasure) -> f64 {
    let d: Vec<f64> = traj.states.iter().map(|s| manifold_defect_density(&traj.grid, s, wv)).collect();
    traj.times.windows(2).zip(d.windows(2)).map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1])).sum()
}

/// Two-species solve on step times graded from `dt0_fraction * eps` up to `config.dt`.
pub fn solve_eps_graded(
    grid: &Grid,
    initial: &State,
    params: &SystemParams,
    tilt: &Tilt,
    config: &SolverConfig,
    graded: GradedSpec,
) -> Result<Trajectory> {
    let dt0 = (graded.dt0_fraction * params.epsilon).min(config.dt);
    let times = graded_times(dt0, graded.growth, config.dt, config.t_final)?;
    integrate_on(Stepper::eps_system(grid, initial, params, tilt, config)?, &times, config.record_every)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub passed: bool,
    pub fitted: BTreeMap<String, f64>,
    pub checks: Vec<Check>,
    pub notes: Vec<String>,
    pub files: Vec<String>,
}

impl Report {
    fn new(kind: ExperimentKind, seed: u64) -> Self {
        Self {
            kind,
            seed,
            passed: true,
            fitted: BTreeMap::new(),
            checks: Vec::new(),
            notes: Vec::new(),
            files: Vec::new(),
        }
    }

    /// Records `value >= threshold` (or `<=` when `at_most`).
    fn check(&mut self, name: impl Into<String>, value: f64, threshold: f64, at_most: bool) {
        let passed = if at_most { value <= threshold } else { value >= threshold };
        self.passed &= passed;
        self.checks.push(Check {
            name: name.into(),
            value,
            threshold,
            passed,
        });
    }

    fn flag(&mut self, name: impl Into<String>, ok: bool) {
        self.check(name, if ok { 1.0 } else { 0.0 }, 1.0, false);
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("experiment: {:?}\nseed: {}\n", self.kind, self.seed);
        for (k, v) in &self.fitted {
            s += &format!("{k}: {v:.6e}\n");
        }
        for c in &self.checks {
            s += &format!(
                "{} {}: value {:.6e}, threshold {:.6e}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.value,
                c.threshold
            );
        }
        for n in &self.notes {
            s += &format!("note: {n}\n");
        }
        s += &format!("overall: {}\n", if self.passed { "PASS" } else { "FAIL" });
        s
    }
}

fn eps_tag(eps: f64) -> String {
    format!("{eps:e}").replace('-', "m").replace('.', "p")
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

/// Runs `f` over the epsilons in parallel and returns the results in the order of the list.
fn par_eps<T: Send, F>(epsilons: &[f64], f: F) -> Result<Vec<T>>
where
    F: Fn(f64) -> Result<T> + Sync + Send,
{
    let mut out: Vec<(f64, T)> = epsilons.par_iter().map(|&e| f(e).map(|r| (e, r))).collect::<Result<_>>()?;
    out.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(out.into_iter().map(|(_, r)| r).collect())
}

/// Runs the configured study with at most `threads` workers and writes the report files.
pub fn run_experiment(config: &ExperimentConfig, threads: Option<usize>) -> Result<Report> {
    config.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    std::fs::create_dir_all(&config.output_dir)?;
    let mut report = pool.install(|| match config.kind {
        ExperimentKind::MixedDiffusionFit => mixed_diffusion_fit(config),
        ExperimentKind::EpsSweep => eps_sweep(config),
        ExperimentKind::EdbRefinement => edb_refinement(config),
        ExperimentKind::RecoveryStudy => recovery_study(config),
        ExperimentKind::MultispeciesCheck => multispecies_check(config),
    })?;
    let json_path = config.output_dir.join("summary.json");
    let txt_path = config.output_dir.join("summary.txt");
    report.files.push("summary.json".into());
    report.files.push("summary.txt".into());
    std::fs::write(&json_path, serde_json::to_string_pretty(&report)?)?;
    std::fs::write(&txt_path, report.to_text())?;
    Ok(report)
}

fn maybe_dump(config: &ExperimentConfig, report: &mut Report, name: String, traj: &Trajectory) -> Result<()> {
    if config.write_trajectories {
        write_trajectory_csv(traj, &config.output_dir.join(&name))?;
        report.files.push(name);
    }
    Ok(())
}

fn mixed_diffusion_fit(config: &ExperimentConfig) -> Result<Report> {
    let mut report = Report::new(config.kind, config.seed);
    let grid = Grid::new(config.grid.n_cells)?;
    let tilt = config.tilt.build(&grid)?;
    let target = config.params.at(config.epsilons[0])?.mixed_delta();
    let runs = par_eps(&config.epsilons, |eps| {
        let p = config.params.at(eps)?;
        let init = config.initial.build(&grid, &p, &tilt)?;
        let traj = solve_eps_system(&grid, &init, &p, &tilt, &config.solver)?;
        let fit = fit_decay_rate(&traj)?;
        Ok((eps, fit, traj))
    })?;
    let p0 = config.params.at(config.epsilons[0])?;
    let hat0 = coarse_grain(&config.initial.build(&grid, &p0, &tilt)?)?;
    let eff = solve_effective(&grid, &hat0, &p0, &tilt, &config.solver)?;
    let eff_fit = fit_decay_rate(&eff)?;
    let mut rows = Vec::new();
    let mut errs = Vec::new();
    for (eps, fit, traj) in &runs {
        let rel = (fit - target).abs() / target;
        rows.push(vec![*eps, *fit, rel]);
        errs.push(rel);
        let series: Vec<Vec<f64>> = traj.times.iter().zip(&traj.states).map(|(t, s)| vec![*t, cosine_mode(&grid, s)]).collect();
        let name = format!("run_eps_{}.csv", eps_tag(*eps));
        write_table(&config.output_dir.join(&name), &["t", "mode"], &series)?;
        report.files.push(name);
        maybe_dump(config, &mut report, format!("traj_eps_{}.csv", eps_tag(*eps)), traj)?;
    }
    write_table(&config.output_dir.join("mixed_diffusion_fit.csv"), &["epsilon", "fitted_delta", "rel_error"], &rows)?;
    report.files.push("mixed_diffusion_fit.csv".into());
    report.fitted.insert("delta_hat_target".into(), target);
    report.fitted.insert("delta_hat_effective_solver".into(), eff_fit);
    let (last_eps, last_fit, _) = runs.last().expect("nonempty");
    report.fitted.insert(format!("delta_hat_at_eps_{last_eps:e}"), *last_fit);
    if !config.tilt.is_zero() {
        report.notes.push("tilted run: the effective coefficient varies in space, the fitted value is indicative only".into());
    }
    report.check("rel_error_at_smallest_eps", *errs.last().expect("nonempty"), thresholds::MIXED_FIT_REL, true);
    if errs.len() > 1 {
        report.flag("rel_error_monotone_in_eps", strictly_decreasing(&errs));
    }
    Ok(report)
}

fn eps_sweep(config: &ExperimentConfig) -> Result<Report> {
    let mut report = Report::new(config.kind, config.seed);
    let grid = Grid::new(config.grid.n_cells)?;
    let tilt = config.tilt.build(&grid)?;
    let runs = par_eps(&config.epsilons, |eps| {
        let p = config.params.at(eps)?;
        let init = config.initial.build(&grid, &p, &tilt)?;
        let traj = match config.graded_steps {
            Some(g) => solve_eps_graded(&grid, &init, &p, &tilt, &config.solver, g)?,
            None => solve_eps_system(&grid, &init, &p, &tilt, &config.solver)?,
        };
        let wv = stationary_measure(&grid, &p, &tilt)?;
        let defect = manifold_defect_integral(&traj, &wv);
        let breakdown = if config.dissipation {
            let d = dissipation_functional(&traj, &p, &tilt, eps)?;
            let drop = energy(&grid, traj.first(), &p, &tilt)? - energy(&grid, traj.last(), &p, &tilt)?;
            Some((d, d.total() - drop))
        } else {
            None
        };
        let series: Vec<Vec<f64>> = traj
            .times
            .iter()
            .zip(&traj.states)
            .map(|(t, s)| Ok(vec![*t, manifold_defect_density(&grid, s, &wv), energy(&grid, s, &p, &tilt)?]))
            .collect::<Result<_>>()?;
        Ok((eps, defect, breakdown, series, traj))
    })?;
    let mut rows = Vec::new();
    let mut brows = Vec::new();
    for (eps, defect, breakdown, series, traj) in &runs {
        rows.push(vec![*eps, *defect, defect / eps]);
        if let Some((d, res)) = breakdown {
            brows.push(vec![*eps, d.vel_diff, d.vel_react, d.slope_diff, d.slope_react, d.total(), *res]);
        }
        let name = format!("run_eps_{}.csv", eps_tag(*eps));
        write_table(&config.output_dir.join(&name), &["t", "defect_density", "energy"], series)?;
        report.files.push(name);
        maybe_dump(config, &mut report, format!("traj_eps_{}.csv", eps_tag(*eps)), traj)?;
    }
    write_table(&config.output_dir.join("eps_sweep.csv"), &["epsilon", "defect", "ratio"], &rows)?;
    report.files.push("eps_sweep.csv".into());
    if !brows.is_empty() {
        write_table(
            &config.output_dir.join("dissipation.csv"),
            &["epsilon", "vel_diff", "vel_react", "slope_diff", "slope_react", "total", "edb_residual"],
            &brows,
        )?;
        report.files.push("dissipation.csv".into());
    }
    if rows.len() >= 2 {
        let eps: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        let def: Vec<f64> = rows.iter().map(|r| r[1]).collect();
        let slope = loglog_slope(&eps, &def)?;
        report.fitted.insert("defect_loglog_slope".into(), slope);
        report.check("defect_loglog_slope", slope, thresholds::DEFECT_SLOPE, false);
    }
    Ok(report)
}

/// One row of a refinement study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RefinementLevel {
    pub n_cells: usize,
    pub dt: f64,
    pub energy_drop: f64,
    pub residual: f64,
}

/// EDB residuals of the two-species system (`Some(eps)`) or the effective system (`None`)
/// on `levels` simultaneous halvings of `h` and `dt`.
pub fn edb_levels(
    base_cells: usize,
    solver: &SolverConfig,
    params: &ParamsSpec,
    tilt: &TiltSpec,
    initial: &InitialSpec,
    epsilon: Option<f64>,
    levels: usize,
) -> Result<Vec<RefinementLevel>> {
    (0..levels)
        .into_par_iter()
        .map(|l| {
            let n = base_cells << l;
            let dt = solver.dt / (1u64 << l) as f64;
            let cfg = SolverConfig { dt, ..*solver };
            let grid = Grid::new(n)?;
            let t = tilt.build(&grid)?;
            let p = params.at(epsilon.unwrap_or(1.0))?;
            let init = initial.build(&grid, &p, &t)?;
            let (drop, residual) = match epsilon {
                Some(eps) => {
                    let traj = solve_eps_system(&grid, &init, &p, &t, &cfg)?;
                    let drop = energy(&grid, traj.first(), &p, &t)? - energy(&grid, traj.last(), &p, &t)?;
                    let d = dissipation_functional(&traj, &p, &t, eps)?;
                    (drop, d.total() - drop)
                }
                None => {
                    let hat = solve_effective(&grid, &coarse_grain(&init)?, &p, &t, &cfg)?;
                    let drop = lifted_energy(&grid, hat.first().species(0), &p, &t)?
                        - lifted_energy(&grid, hat.last().species(0), &p, &t)?;
                    (drop, effective_edb_residual(&hat, &p, &t)?)
                }
            };
            Ok(RefinementLevel {
                n_cells: n,
                dt,
                energy_drop: drop,
                residual,
            })
        })
        .collect()
}

/// Fitted order of `|residual|` against `h`.
pub fn refinement_order(levels: &[RefinementLevel]) -> Result<f64> {
    let h: Vec<f64> = levels.iter().map(|l| 1.0 / l.n_cells as f64).collect();
    let r: Vec<f64> = levels.iter().map(|l| l.residual.abs()).collect();
    loglog_slope(&h, &r)
}

fn edb_refinement(config: &ExperimentConfig) -> Result<Report> {
    let mut report = Report::new(config.kind, config.seed);
    let mut systems: Vec<Option<f64>> = config.epsilons.iter().map(|e| Some(*e)).collect();
    systems.push(None);
    let results: Vec<Vec<RefinementLevel>> = systems
        .par_iter()
        .map(|s| {
            edb_levels(config.grid.n_cells, &config.solver, &config.params, &config.tilt, &config.initial, *s, config.levels)
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (sys, levels) in systems.iter().zip(&results) {
        let label = match sys {
            Some(e) => format!("eps_{e:e}"),
            None => "effective".to_string(),
        };
        for (l, lv) in levels.iter().enumerate() {
            rows.push(vec![
                sys.unwrap_or(0.0),
                l as f64,
                lv.n_cells as f64,
                lv.dt,
                lv.energy_drop,
                lv.residual,
                lv.residual.abs() / lv.energy_drop,
            ]);
        }
        let order = refinement_order(levels)?;
        let finest = levels.last().expect("levels >= 2");
        report.fitted.insert(format!("{label}_order"), order);
        report.check(format!("{label}_order"), order, thresholds::EDB_ORDER, false);
        report.check(
            format!("{label}_finest_relative_residual"),
            finest.residual.abs() / finest.energy_drop,
            thresholds::EDB_FINEST_REL,
            true,
        );
    }
    write_table(
        &config.output_dir.join("edb_refinement.csv"),
        &["epsilon", "level", "n_cells", "dt", "energy_drop", "residual", "relative_residual"],
        &rows,
    )?;
    report.files.push("edb_refinement.csv".into());
    Ok(report)
}

/// Per-epsilon diagnostics of a recovery sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RecoveryRow {
    pub epsilon: f64,
    pub gamma: f64,
    pub reaction_cost: f64,
    pub d_eps: f64,
    pub d_0: f64,
}

impl RecoveryRow {
    pub fn gap(&self) -> f64 {
        self.d_eps - self.d_0
    }
}

/// Builds the recovery sequence of `limit` at each epsilon and evaluates both functionals on it.
pub fn recovery_rows(limit: &Trajectory, params: &ParamsSpec, tilt: &Tilt, epsilons: &[f64]) -> Result<Vec<RecoveryRow>> {
    par_eps(epsilons, |eps| {
        let p = params.at(eps)?;
        let rs = build_recovery_sequence(limit, &p, tilt, eps, RecoveryExponents::default())?;
        let traj = &rs.reconstruction.traj;
        let d = dissipation_functional(traj, &p, tilt, eps)?;
        let d0 = effective_dissipation(traj, &p, tilt)?;
        Ok(RecoveryRow {
            epsilon: eps,
            gamma: rs.gamma,
            reaction_cost: d.flux_vel_react.ok_or(Error::NoFluxData)?,
            d_eps: d.total(),
            d_0: d0.value,
        })
    })
}

fn recovery_study(config: &ExperimentConfig) -> Result<Report> {
    let mut report = Report::new(config.kind, config.seed);
    let grid = Grid::new(config.grid.n_cells)?;
    let tilt = config.tilt.build(&grid)?;
    let p = config.params.at(config.epsilons[0])?;
    let hat0 = coarse_grain(&config.initial.build(&grid, &p, &tilt)?)?;
    let hat = solve_effective(&grid, &hat0, &p, &tilt, &config.solver)?;
    let limit = reconstruct_from_coarse(&hat, &p, &tilt)?.traj;
    maybe_dump(config, &mut report, "traj_limit.csv".into(), &limit)?;
    let rows = recovery_rows(&limit, &config.params, &tilt, &config.epsilons)?;
    let table: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| vec![r.epsilon, r.gamma, r.reaction_cost, r.d_eps, r.d_0, r.gap()])
        .collect();
    write_table(
        &config.output_dir.join("recovery_study.csv"),
        &["epsilon", "gamma", "reaction_cost_term", "D_eps", "D_0", "gap"],
        &table,
    )?;
    report.files.push("recovery_study.csv".into());
    let costs: Vec<f64> = rows.iter().map(|r| r.reaction_cost).collect();
    let gaps: Vec<f64> = rows.iter().map(|r| r.gap().abs()).collect();
    if rows.len() >= 2 {
        let eps: Vec<f64> = rows.iter().map(|r| r.epsilon).collect();
        if let Ok(s) = loglog_slope(&eps, &costs) {
            report.fitted.insert("reaction_cost_loglog_slope".into(), s);
        }
        if let Ok(s) = loglog_slope(&eps, &gaps) {
            report.fitted.insert("gap_loglog_slope".into(), s);
        }
        report.flag("reaction_cost_monotone", strictly_decreasing(&costs));
        report.flag("gap_monotone", strictly_decreasing(&gaps));
    }
    report.check("reaction_cost_at_smallest_eps", *costs.last().expect("nonempty"), thresholds::RECOVERY_COST, true);
    Ok(report)
}

fn multispecies_check(config: &ExperimentConfig) -> Result<Report> {
    let mut report = Report::new(config.kind, config.seed);
    let p = config.params.at(config.epsilons[0])?;
    let two = MarkovGenerator::two_species(&p);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let net = MarkovGenerator::random_detailed_balance(4, rng.gen());
    let (i, j) = (0, 2);
    let bad = net.perturbed(i, j, 1.5);
    let mut gens = vec![("two_species".to_string(), two.clone(), true), ("random_network".to_string(), net, true)];
    gens.push(("perturbed_network".to_string(), bad, false));
    if let Some(path) = &config.generator_file {
        gens.push(("generator_file".to_string(), MarkovGenerator::from_json_file(path)?, true));
    }
    let mut rows = Vec::new();
    for (g_idx, (name, g, expect_valid)) in gens.iter().enumerate() {
        let rep = validate_generator(g);
        report.flag(format!("{name}_valid_is_{expect_valid}"), rep.valid == *expect_valid);
        if !rep.valid {
            for f in &rep.failures {
                report.notes.push(format!("{name}: {f}"));
            }
            continue;
        }
        for &eps in &config.epsilons {
            let k = kappa_coefficients(g, eps)?;
            let scale = k.total.iter().flatten().fold(0.0f64, |a, x| a.max(x.abs()));
            let asym = k.max_asymmetry() / scale.max(1.0);
            rows.push(vec![g_idx as f64, eps, asym, k.total[0][1] * eps]);
            report.check(format!("{name}_kappa_symmetry_eps_{eps:e}"), asym, thresholds::KAPPA_SYMMETRY, true);
        }
    }
    for &eps in &config.epsilons {
        let k = kappa_coefficients(&two, eps)?;
        report.check(format!("two_species_kappa12_times_eps_minus_one_eps_{eps:e}"), (k.total[0][1] * eps - 1.0).abs(), 4.0 * f64::EPSILON, true);
    }
    write_table(
        &config.output_dir.join("multispecies.csv"),
        &["generator", "epsilon", "kappa_relative_asymmetry", "kappa12_times_eps"],
        &rows,
    )?;
    report.files.push("multispecies.csv".into());
    let legend: Vec<String> = gens.iter().enumerate().map(|(k, (n, _, _))| format!("{k}: {n}")).collect();
    std::fs::write(config.output_dir.join("generators.txt"), legend.join("\n") + "\n")?;
    report.files.push("generators.txt".into());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_recovers_exact_heat_mode() {
        let grid = Grid::new(64).unwrap();
        let delta = 1.37;
        let times: Vec<f64> = (0..=20).map(|m| m as f64 * 5e-3).collect();
        let states = times
            .iter()
            .map(|t| State::new(&grid, vec![grid.sample(|x| 1.0 + 0.5 * (-delta * PI * PI * t).exp() * (PI * x).cos())]).unwrap())
            .collect();
        let traj = Trajectory::new(grid, times, states, None).unwrap();
        assert!((fit_decay_rate(&traj).unwrap() - delta).abs() < 1e-6);
    }

    #[test]
    fn fit_rejects_degenerate_mode() {
        let grid = Grid::new(16).unwrap();
        let s = State::uniform(&grid, &[1.0]);
        let traj = Trajectory::new(grid, vec![0.0, 0.1], vec![s.clone(), s], None).unwrap();
        assert!(matches!(fit_decay_rate(&traj), Err(Error::Fit(_))));
    }

    #[test]
    fn effective_solver_fit_is_close_to_mixed_delta() {
        let grid = Grid::new(100).unwrap();
        let p = SystemParams::new([1.0, 2.0], 1.0, 3.0, 1e-3).unwrap();
        let hat = State::new(&grid, vec![grid.sample(|x| 1.0 + 0.5 * (PI * x).cos())]).unwrap();
        let cfg = SolverConfig::new(1e-3, 0.05).unwrap();
        let traj = solve_effective(&grid, &hat, &p, &Tilt::zero(&grid, 2), &cfg).unwrap();
        assert!((fit_decay_rate(&traj).unwrap() - 1.25).abs() < 0.01);
    }

    fn base_json() -> Value {
        serde_json::to_value(ExperimentConfig::defaults()).unwrap()
    }

    #[test]
    fn defaults_roundtrip_through_json() {
        let text = serde_json::to_string(&ExperimentConfig::defaults()).unwrap();
        assert_eq!(ExperimentConfig::from_json_str(&text).unwrap(), ExperimentConfig::defaults());
    }

    #[test]
    fn schema_errors_list_every_unknown_key() {
        let mut v = base_json();
        v["bogus"] = 1.into();
        v["params"]["gamma"] = 2.into();
        let err = ExperimentConfig::from_json_str(&v.to_string()).unwrap_err().to_string();
        assert!(err.contains("bogus") && err.contains("params.gamma"), "{err}");
    }

    #[test]
    fn epsilon_list_is_checked() {
        let mut v = base_json();
        v["epsilons"] = serde_json::json!([]);
        assert!(matches!(ExperimentConfig::from_json_str(&v.to_string()), Err(Error::Config(_))));
        v["epsilons"] = serde_json::json!([1e-2, 1e-1]);
        assert!(ExperimentConfig::from_json_str(&v.to_string()).is_err());
        v["epsilons"] = serde_json::json!([1e-1, -1e-2]);
        assert!(ExperimentConfig::from_json_str(&v.to_string()).is_err());
    }

    #[test]
    fn physical_parameters_have_no_defaults() {
        for key in ["params", "epsilons", "grid", "solver"] {
            let mut v = base_json();
            v.as_object_mut().unwrap().remove(key);
            assert!(ExperimentConfig::from_json_str(&v.to_string()).is_err(), "{key}");
        }
        let mut v = base_json();
        v["params"].as_object_mut().unwrap().remove("alpha");
        assert!(ExperimentConfig::from_json_str(&v.to_string()).is_err());
    }

    #[test]
    fn tilt_specs_parse() {
        let mut v = base_json();
        v["tilt"] = serde_json::json!({"kind": "cosine", "amplitude": [0.5, 0.1], "frequency": [1.0, 2.0]});
        let c = ExperimentConfig::from_json_str(&v.to_string()).unwrap();
        let grid = Grid::new(8).unwrap();
        let t = c.tilt.build(&grid).unwrap();
        assert!((t.cell(0)[0] - 0.5 * (PI * grid.center(0)).cos()).abs() < 1e-15);
        v["tilt"] = serde_json::json!({"kind": "affine", "offset": [0.0, 1.0], "slope": [1.0, 0.0], "extra": 1});
        assert!(ExperimentConfig::from_json_str(&v.to_string()).is_err());
    }

    #[test]
    fn missing_generator_file_is_a_config_error() {
        let mut v = base_json();
        v["kind"] = "multispecies_check".into();
        v["generator_file"] = "/nonexistent/gen.json".into();
        assert!(matches!(ExperimentConfig::from_json_str(&v.to_string()), Err(Error::Config(_))));
    }

    #[test]
    fn initial_data_has_unit_mass_and_lies_on_manifold() {
        let grid = Grid::new(20).unwrap();
        let p = SystemParams::new([1.0, 2.0], 1.0, 3.0, 0.1).unwrap();
        let tilt = TiltSpec::Cosine { amplitude: [0.3, -0.2], frequency: [1.0, 1.0] }.build(&grid).unwrap();
        let s = InitialSpec::SlowManifold { amplitude: 0.5 }.build(&grid, &p, &tilt).unwrap();
        assert!((crate::state::total_mass(&grid, &s) - 1.0).abs() < 1e-14);
        let wv = stationary_measure(&grid, &p, &tilt).unwrap();
        assert!(manifold_defect_density(&grid, &s, &wv) < 1e-28);
    }

    #[test]
    fn small_runs_write_reports() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = ExperimentConfig::defaults();
        c.grid.n_cells = 20;
        c.solver = SolverConfig::new(1e-3, 0.01).unwrap();
        c.epsilons = vec![1e-1, 1e-2];
        for kind in [
            ExperimentKind::MixedDiffusionFit,
            ExperimentKind::EpsSweep,
            ExperimentKind::RecoveryStudy,
            ExperimentKind::MultispeciesCheck,
        ] {
            c.kind = kind;
            c.output_dir = dir.path().join(format!("{kind:?}"));
            let r = run_experiment(&c, Some(2)).unwrap();
            for f in &r.files {
                assert!(c.output_dir.join(f).is_file(), "{f}");
            }
            let text = std::fs::read_to_string(c.output_dir.join("summary.txt")).unwrap();
            assert!(text.contains("overall:"));
        }
    }

    #[test]
    fn reports_are_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = ExperimentConfig::defaults();
        c.kind = ExperimentKind::EpsSweep;
        c.grid.n_cells = 16;
        c.solver = SolverConfig::new(1e-3, 0.01).unwrap();
        c.epsilons = vec![1e-1, 1e-2, 1e-3];
        c.graded_steps = Some(GradedSpec::default());
        c.initial = InitialSpec::Product { mass: [0.5, 0.5], amplitude: [0.5, 0.5] };
        c.output_dir = dir.path().join("a");
        run_experiment(&c, Some(3)).unwrap();
        c.output_dir = dir.path().join("b");
        run_experiment(&c, Some(1)).unwrap();
        for f in ["eps_sweep.csv", "summary.json"] {
            assert_eq!(
                std::fs::read(dir.path().join("a").join(f)).unwrap(),
                std::fs::read(dir.path().join("b").join(f)).unwrap()
            );
        }
    }
}
