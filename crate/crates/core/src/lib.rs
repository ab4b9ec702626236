//! Offline meta-RL laboratory built around contrastive task representations.

pub mod collect;
pub mod contrast;
pub mod envs;
pub mod error;
pub mod evalkit;
pub mod metarl;
pub mod numcore;
pub mod taskenc;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
