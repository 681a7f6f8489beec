//! Numerical spectral geometry on model Riemannian manifolds.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod geometry;
pub mod hamflow;
pub mod parametrix;
pub mod quad;
pub mod schrodinger;
pub mod spectrum;
pub mod wavefront;
pub mod wavetrace;

pub use error::{Error, Result};
