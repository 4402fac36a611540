//! Numerical laboratory for ultrasound-modulated electrical impedance
//! tomography in two dimensions.
//!
//! The crate synthesises modulated boundary measurements from a forward
//! conductivity model, recovers the internal functional `H = sigma |grad u|^2`,
//! and reconstructs `sigma` by marching the resulting quasilinear hyperbolic
//! equation away from a spacelike part of the boundary.

// Index loops mirror the stencils; negated comparisons reject NaN on purpose.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod cgo;
pub mod cli;
pub mod config;
pub mod elliptic;
pub mod error;
pub mod field;
pub mod geometry;
pub mod hypersolve;
pub mod linalg;
pub mod lorentz;
pub mod march;
pub mod modulation;

pub use error::{Error, Result};
