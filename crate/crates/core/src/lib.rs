#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]
//! Gradient structures for fast-slow linear reaction-drift-diffusion systems
//! on the unit interval: solvers, energies, De Giorgi dissipation functionals,
//! coarse-graining and reconstruction.

pub mod cli;
pub mod coarsegrain;
pub mod dissipation;
pub mod error;
pub mod functionals;
pub mod grid;
pub mod io;
pub mod linalg;
pub mod multispecies;
pub mod params;
pub mod solver;
pub mod state;

pub use error::{Error, Result};
pub use grid::Grid;
pub use params::{SystemParams, Tilt};
pub use state::{gce_residual, total_mass, FluxAssignment, GceResidual, State, Trajectory};
