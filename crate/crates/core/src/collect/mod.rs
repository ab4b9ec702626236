//! Behavior-policy training and the offline datasets it leaves behind.

mod behavior;
mod dataset;
pub mod sac;

pub use behavior::{checkpoint_return, train_behavior_policy, Checkpoint, CheckpointPool};
pub(crate) use behavior::uniform_action;
pub use dataset::{sample_context, OfflineDataset, TransitionTuple};
pub use sac::{
    polyak, sac_critic_target, EntropyCoefficient, SacBatch, SacConfig, SacLearner, SacNetworks, SacParams, UpdateInfo,
};
