//! Simulation of quantum state transfer, networking and memory with
//! three-level Λ atoms crossing two-mode cavities in the dispersive regime.
//!
//! Units are dimensionless: `ħ = 1`, the atom-field coupling sets the scale
//! (`g = 1`) and times are in units of `1/g`.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod hilbert;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod protocols;

pub use error::{Error, Result};
