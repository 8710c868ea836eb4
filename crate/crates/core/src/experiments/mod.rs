//! Shipped applications and the configuration layer used by the command line.

pub mod burgers;
pub mod ns2d;
pub mod suites;
