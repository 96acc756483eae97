//! Domain expansion for small latent-variable generators.
//!
//! A pretrained generator's latent space is split into a base subspace that
//! keeps the source domain and dormant directions that are repurposed, one
//! per new domain. Training applies each adaptation loss only on its own
//! shifted subspace while replay regularization pins the base subspace to a
//! frozen copy of the source generator.

pub mod cli;
pub mod error;
pub mod eval;
pub mod generator;
pub mod latent;
pub mod numerics;
pub mod scene;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
