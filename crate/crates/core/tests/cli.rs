use std::path::Path;
use std::process::{Command, Output};

use edpflow::io::read_trajectory_csv;
use edpflow::total_mass;
use serde_json::{json, Value};

fn edpflow(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_edpflow"));
    cmd.args(args);
    match threads {
        Some(t) => cmd.env("EDPFLOW_THREADS", t),
        None => cmd.env_remove("EDPFLOW_THREADS"),
    };
    cmd.output().unwrap()
}

fn defaults(kind: &str) -> Value {
    let out = edpflow(&["export-defaults", "--kind", kind], None);
    assert_eq!(out.status.code(), Some(0));
    serde_json::from_slice(&out.stdout).unwrap()
}

/// A fast mixed-diffusion config writing into `dir`.
fn small_mixed(dir: &Path, epsilons: &[f64]) -> Value {
    let mut cfg = defaults("mixed_diffusion_fit");
    cfg["grid"]["n_cells"] = json!(40);
    cfg["solver"]["dt"] = json!(1e-3);
    cfg["solver"]["t_final"] = json!(0.05);
    cfg["epsilons"] = json!(epsilons);
    cfg["output_dir"] = json!(dir.join("out"));
    cfg
}

fn write_config(dir: &Path, cfg: &Value) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn exported_defaults_validate() {
    let dir = tempfile::tempdir().unwrap();
    for kind in ["mixed_diffusion_fit", "eps_sweep", "edb_refinement", "recovery_study", "multispecies_check"] {
        let path = write_config(dir.path(), &defaults(kind));
        let out = edpflow(&["validate", &path], None);
        assert_eq!(out.status.code(), Some(0), "{kind}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn unknown_kind_is_a_config_error() {
    assert_eq!(edpflow(&["export-defaults", "--kind", "nope"], None).status.code(), Some(2));
}

#[test]
fn unknown_keys_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_mixed(dir.path(), &[1e-1]);
    cfg["colour"] = json!("blue");
    cfg["solver"]["tolerance"] = json!(1);
    let path = write_config(dir.path(), &cfg);
    let out = edpflow(&["run", &path], None);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("colour") && err.contains("solver.tolerance"), "{err}");
}

#[test]
fn invalid_values_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    for eps in [json!([]), json!([1e-2, 1e-1]), json!([-1e-1])] {
        let mut cfg = small_mixed(dir.path(), &[1e-1]);
        cfg["epsilons"] = eps;
        let path = write_config(dir.path(), &cfg);
        assert_eq!(edpflow(&["validate", &path], None).status.code(), Some(2));
    }
    assert_eq!(edpflow(&["run", "/nonexistent/config.json"], None).status.code(), Some(2));
}

#[test]
fn bad_thread_count_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &small_mixed(dir.path(), &[1e-1]));
    assert_eq!(edpflow(&["run", &path], Some("0")).status.code(), Some(2));
    assert_eq!(edpflow(&["run", &path], Some("many")).status.code(), Some(2));
}

#[test]
fn missed_threshold_exits_one() {
    // A single large epsilon leaves the fit several percent off the limit coefficient.
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &small_mixed(dir.path(), &[1e-1]));
    let out = edpflow(&["run", &path], Some("1"));
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stdout));
    let summary: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["passed"], json!(false));
}

#[test]
fn passing_run_writes_outputs_and_is_thread_independent() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_mixed(dir.path(), &[1e-2, 1e-3, 1e-4]);
    cfg["write_trajectories"] = json!(true);
    let path = write_config(dir.path(), &cfg);
    let out = edpflow(&["run", &path], Some("3"));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let out_dir = dir.path().join("out");
    let table = std::fs::read_to_string(out_dir.join("mixed_diffusion_fit.csv")).unwrap();
    assert!(table.starts_with("epsilon,fitted_delta,rel_error"));
    assert_eq!(table.lines().count(), 4);

    let mut runs: Vec<_> = std::fs::read_dir(&out_dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_str().unwrap().starts_with("traj_eps_"))
        .collect();
    runs.sort();
    assert_eq!(runs.len(), 3);
    for run in &runs {
        let traj = read_trajectory_csv(run).unwrap();
        assert_eq!(traj.grid.n_cells(), 40);
        assert!(traj.states.iter().all(|s| (total_mass(&traj.grid, s) - 1.0).abs() <= 1e-12));
    }

    let first = std::fs::read_to_string(table_path(&out_dir)).unwrap();
    let out = edpflow(&["run", &path], Some("1"));
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(table_path(&out_dir)).unwrap(), first);
}

fn table_path(dir: &Path) -> std::path::PathBuf {
    dir.join("mixed_diffusion_fit.csv")
}
