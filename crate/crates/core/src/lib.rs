//! Model-free Q-learning for linear-quadratic output regulation.
//!
//! The learner consumes nothing but persistently exciting input-output data:
//! it builds a non-minimal state from lagged inputs and outputs, evaluates
//! policies through a generalized discrete-time Lyapunov equation and improves
//! them until the output-feedback gain converges. No plant matrices appear
//! anywhere in this crate.

pub mod datagen;
pub mod error;
pub mod matlib;
pub mod nonmin;
pub mod qlearn;

pub use error::{Error, Result};
