//! Numerical laboratory for small-amplitude relativistic membranes in the
//! light-cone gauge: spectral torus calculus, Poisson brackets, the
//! transverse membrane system, a degenerate linear wave solver, a
//! Nash-Moser iteration on the rescaled problem and a direct reference
//! integrator.

pub mod error;
pub mod brackets;
pub mod config;
pub mod degenerate;
pub mod grid;
pub mod membrane;
pub mod nash_moser;
pub mod oracle;
pub mod rescale;

pub use error::{LabError, Result};
