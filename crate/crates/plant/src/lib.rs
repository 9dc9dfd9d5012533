//! Ground-truth plants and model-based oracles.
//!
//! This crate owns everything the learner must never see: state-space
//! matrices, state trajectories, Riccati-based optimal gains and the
//! model-based policy-iteration reference. The learner crate has no
//! dependency on this one; data flows only through serialized
//! [`qreg_core::datagen::IoDataset`] values.

pub mod collect;
pub mod error;
pub mod lti;
pub mod oracle;

pub use error::{Error, Result};
pub use lti::LtiSystem;
