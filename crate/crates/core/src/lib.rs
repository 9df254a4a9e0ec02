//! Sparse identification of ODE models.
//!
//! States on a collocation grid and the parameters of an error network are
//! estimated jointly by Levenberg-Marquardt. Each damped step is solved by a
//! dynamic-programming elimination over contiguous batches of grid intervals,
//! so batches can be processed in parallel. The same elimination, run at zero
//! damping around a trained optimum, predicts the cost of removing each network
//! edge and drives a backward-elimination pruning loop.
//!
//! Module map:
//!
//! * [`model`]: dynamics `f = f_phys + f_net`, measurement maps, built-in networks.
//! * [`grid`]: discretization points containing every measurement time.
//! * [`residual`]: residual blocks, cost and gradient of the discretized problem.
//! * [`qr`]: quadratic sum-of-squares blocks and their partial minimization.
//! * [`dense`]: reference LM step via block-arrowhead normal equations.
//! * [`parallel`]: partitioned elimination, back-substitution and the LM driver.
//! * [`sparsify`]: linearized removal estimates and the pruning loop.
//! * [`experiments`]: Lorenz and forced Van der Pol ground-truth generators.
//! * [`data`], [`config`], [`pipeline`]: file formats and the end-to-end run.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod dense;
pub mod error;
pub mod exec;
pub mod experiments;
pub mod grid;
pub mod integrate;
pub mod lm;
pub mod model;
pub mod parallel;
pub mod pipeline;
pub mod qr;
pub mod residual;
pub mod sparsify;

pub use error::{Error, Result};
