//! Physics-informed residual training with NTK-based adaptive loss weights.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`] – scalar computation graphs with exact first/second input
//!   derivatives and parameter gradients of those derivatives.
//! * [`model`] – tanh multilayer perceptrons, Xavier initialisation, flat
//!   parameter vectors, and a batched dense evaluator used on hot paths.
//! * [`problems`] – residual assemblies for the 1D Poisson, 1D wave and
//!   quadratically parameterised regression problems.
//! * [`ntk_exact`] – the exact kernel `K = ∇Rᵀ∇R`, block traces, trace-ratio
//!   weights and a cyclic Jacobi eigensolver.
//! * [`ntk_sketch`] – randomized predictor-step estimates of `K g`, Monte Carlo
//!   and moving-average kernel estimates, and trace estimators.
//! * [`trainer`] – gradient descent with fixed, exact or estimated weights and
//!   convergence diagnostics.

pub mod autodiff;
pub mod error;
pub mod model;
pub mod ntk_exact;
pub mod ntk_sketch;
pub mod par;
pub mod problems;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
