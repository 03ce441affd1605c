//! CSV export and import of trajectories, plus a small table writer.
//!
//! Trajectory rows are `(t, x, c1..cI[, J1..JI, b1..bI])`, one per time and
//! cell. On row `(t_m, cell k)` the flux columns hold `J` on the right face
//! `k + 1` and `b` in cell `k` for the interval `[t_m, t_{m+1}]`; they are
//! empty on the final time.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::state::{FluxAssignment, State, Trajectory};

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.17e}")
}

pub fn trajectory_headers(n_species: usize, with_fluxes: bool) -> Vec<String> {
    let mut h = vec!["t".to_string(), "x".to_string()];
    h.extend((1..=n_species).map(|i| format!("c{i}")));
    if with_fluxes {
        h.extend((1..=n_species).map(|i| format!("J{i}")));
        h.extend((1..=n_species).map(|i| format!("b{i}")));
    }
    h
}

pub fn write_trajectory<W: Write>(traj: &Trajectory, out: W) -> Result<()> {
    let ns = traj.n_species();
    let fluxes = traj.fluxes.as_deref();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(trajectory_headers(ns, fluxes.is_some()))?;
    let xs = traj.grid.centers();
    for (m, (t, s)) in traj.times.iter().zip(&traj.states).enumerate() {
        for (k, x) in xs.iter().enumerate() {
            let mut row = vec![fmt_f64(*t), fmt_f64(*x)];
            row.extend((0..ns).map(|i| fmt_f64(s.species(i)[k])));
            if let Some(f) = fluxes {
                match f.get(m) {
                    Some(fa) => {
                        row.extend((0..ns).map(|i| fmt_f64(fa.j[i][k + 1])));
                        row.extend((0..ns).map(|i| fmt_f64(fa.b[i][k])));
                    }
                    None => row.extend(std::iter::repeat_n(String::new(), 2 * ns)),
                }
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_trajectory_csv(traj: &Trajectory, path: &Path) -> Result<()> {
    write_trajectory(traj, std::fs::File::create(path)?)
}

fn parse(field: &str, line: usize) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|e| Error::Config(format!("line {line}: cannot parse {field:?}: {e}")))
}

/// Reads a trajectory written by [`write_trajectory`]; the grid size is the
/// number of rows sharing the first time.
pub fn read_trajectory<R: Read>(input: R) -> Result<Trajectory> {
    let mut r = csv::Reader::from_reader(input);
    let headers: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let ncols = headers.len();
    let (ns, with_fluxes) = if ncols >= 4 && (ncols - 2).is_multiple_of(3) && headers.get(2 + (ncols - 2) / 3).is_some_and(|h| h == "J1") {
        ((ncols - 2) / 3, true)
    } else {
        (ncols.saturating_sub(2), false)
    };
    if ns == 0 || headers != trajectory_headers(ns, with_fluxes) {
        return Err(Error::Config(format!("unexpected trajectory header {headers:?}")));
    }
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        rows.push((line + 2, rec?));
    }
    if rows.is_empty() {
        return Err(Error::Config("trajectory file has no rows".into()));
    }
    let t0 = parse(&rows[0].1[0], rows[0].0)?;
    let mut n = 0;
    while n < rows.len() && parse(&rows[n].1[0], rows[n].0)? == t0 {
        n += 1;
    }
    if rows.len() % n != 0 {
        return Err(Error::Shape(format!("{} rows are not a multiple of {n} cells", rows.len())));
    }
    let grid = Grid::new(n)?;
    let n_times = rows.len() / n;
    let mut times = Vec::with_capacity(n_times);
    let mut states = Vec::with_capacity(n_times);
    let mut fluxes = Vec::new();
    for m in 0..n_times {
        let block = &rows[m * n..(m + 1) * n];
        let t = parse(&block[0].1[0], block[0].0)?;
        let mut c = vec![vec![0.0; n]; ns];
        let mut fa = FluxAssignment::zeros(&grid, ns);
        let mut has_flux = false;
        for (k, (line, rec)) in block.iter().enumerate() {
            if parse(&rec[0], *line)? != t {
                return Err(Error::Shape(format!("line {line}: time changes inside a block of {n} cells")));
            }
            for i in 0..ns {
                c[i][k] = parse(&rec[2 + i], *line)?;
            }
            if with_fluxes && !rec[2 + ns].trim().is_empty() {
                has_flux = true;
                for i in 0..ns {
                    fa.j[i][k + 1] = parse(&rec[2 + ns + i], *line)?;
                    fa.b[i][k] = parse(&rec[2 + 2 * ns + i], *line)?;
                }
            }
        }
        if with_fluxes {
            if has_flux != (m + 1 < n_times) {
                return Err(Error::Shape(format!("flux columns must be filled exactly on non-final times (t = {t})")));
            }
            if has_flux {
                fluxes.push(fa);
            }
        }
        times.push(t);
        states.push(State::new(&grid, c)?);
    }
    Trajectory::new(grid, times, states, with_fluxes.then_some(fluxes))
}

pub fn read_trajectory_csv(path: &Path) -> Result<Trajectory> {
    read_trajectory(std::fs::File::open(path)?)
}

/// Writes a header and numeric rows.
pub fn write_table(path: &Path, headers: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(headers)?;
    for row in rows {
        if row.len() != headers.len() {
            return Err(Error::Shape(format!("row of {} values for {} columns", row.len(), headers.len())));
        }
        w.write_record(row.iter().map(|x| fmt_f64(*x)))?;
    }
    w.flush()?;
    Ok(())
}
