//! Numerical laboratory for compressible current-vortex sheets in ideal MHD:
//! symmetric-hyperbolic assembly, the flattened free-boundary problem, a
//! Lax-Friedrichs linear solver with a characteristic boundary closure, and a
//! smoothed Newton (Nash-Moser type) iteration with full error bookkeeping.

pub mod error;
pub mod stencil;
pub mod eos_state;
pub mod mhd_system;
pub mod function_spaces;
pub mod geometry_transform;
pub mod linearized_solver;

pub use error::{CvsError, Result};
pub mod approx_solution;
pub mod nash_moser;
pub mod invariants;
pub mod runner;
