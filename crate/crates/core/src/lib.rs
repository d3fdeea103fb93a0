//! Particle solver for McKean-Vlasov forward-backward SDEs: empirical measures and Wasserstein
//! distances, Lions derivatives, small-time and long-horizon decoupling-field solvers, master
//! equation residuals, mean-field control, and a Riccati oracle for linear-quadratic problems.

pub mod catalog;
pub mod checks;
pub mod cli;
pub mod config;
pub mod control;
pub mod error;
pub mod fbsde;
pub mod field;
pub mod grid;
pub mod lions;
pub mod lq_oracle;
pub mod master;
pub mod measure;
pub mod rng;
pub mod scenario;

pub use error::{Error, Result};
