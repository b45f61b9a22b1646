//! Simulation and verification of a fixed-rate, two-mode (zoom-in / zoom-out)
//! encoder–controller pair for the scalar system
//!
//! ```text
//! X[n+1] = A[n] X[n] + W[n] - U[n]
//! ```
//!
//! where the gains `A[n]` and disturbances `W[n]` are i.i.d. with unbounded
//! support and the controller receives exactly `R` bits per step.
//!
//! Layout:
//!
//! - [`stochastic`]: laws of `A` and `W`, sampling, and the moments the
//!   strategy and its analysis need.
//! - [`codec`]: the uniform partition, symbol encoding, emergency codeword,
//!   rate, and the tracker update implied by a received symbol.
//! - [`control`]: encoder / controller / plant steps and full trials.
//! - [`analysis`]: frozen sequences, round-end times, the dominating sequence,
//!   feasibility of the constants, drift diagnostics and moment oracles.
//! - [`harness`]: Monte Carlo ensembles, verdicts and sweeps.
//!
//! Trials are independent and run through [`parallel`], which uses rayon when
//! the `parallel` feature is enabled and plain iterators otherwise.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod codec;
pub mod control;
mod error;
pub mod harness;
pub mod parallel;
pub mod stats;
pub mod stochastic;

pub use error::{Error, Result};
