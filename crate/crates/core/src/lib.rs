//! Differentially private sign-based federated learning.
//!
//! Parties compress their clipped gradients to one bit per coordinate with
//! the noisy sign compressor in [`privacy`], the server aggregates by
//! majority vote (optionally with error feedback), and the [`federation`]
//! simulator drives the rounds, Byzantine parties and wire accounting. The
//! [`experiment`] module turns a configuration into a metrics CSV.

pub mod adversary;
pub mod data;
mod error;
pub mod experiment;
pub mod federation;
pub mod model;
pub mod privacy;
pub mod rng;
pub mod vector;

pub use error::{Error, Result};
pub use vector::{GradVector, SignVector};
