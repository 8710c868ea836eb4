//! Numerical laboratory for forward–backward SDEs whose drivers carry
//! polynomial cross terms such as `y·|z|²`.
//!
//! The crate covers Brownian path generation, forward simulation, driver
//! construction and checking, regression Monte Carlo for the backward
//! equation, finite-difference PDE references, large-deviation action
//! minimization and the small-noise sweep utilities used by the `fbsde`
//! command-line tool.

pub mod bsde;
pub mod drivers;
pub mod error;
pub mod experiments;
pub mod forward;
pub mod grid;
pub mod ldp;
mod par;
pub mod pde;
mod quad;
pub mod regression;
pub mod stats;
pub mod sweep;

pub use error::{LabError, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub use forward::{
    measure_perturbation_gap, perturbation_gap_table, simulate_forward, simulate_forward_from, solve_deterministic_flow, CoefFn,
    ForwardModel, ForwardPaths, GapRow, ProbeReport,
};
pub use grid::{make_grid, sample_ensemble, BrownianSource, PathEnsemble, TimeGrid};
