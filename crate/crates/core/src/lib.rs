//! Lowering of small neural-network graphs to plans made only of matrix
//! operations, with every nonlinear operator replaced by a piecewise-linear
//! table, plus an analytical cost model for running those plans on a
//! systolic-array GEMM accelerator.
//!
//! Pipeline: [`profiler`] finds operator input ranges, [`pwl`] builds tables,
//! [`lowering`] turns an [`ir::Graph`] into a [`lowering::LoweredPlan`],
//! [`gemmsim`] estimates latency and energy, and [`training`] fine-tunes the
//! approximated network.

pub mod error;
pub mod gemmsim;
pub mod ir;
pub mod lowering;
pub mod models;
pub mod profiler;
pub mod pwl;
pub mod training;

pub use error::{Error, ErrorKind, Result};
