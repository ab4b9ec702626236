//! Offline training of the representation-conditioned actor/critic together
//! with the context aggregator, under several representation-learning modes.

mod modes;
mod train;

pub use modes::{
    build_mode, focal_dml_loss, focal_dml_with_grad, mode_names, project_descriptor, supervised_encoder_loss, Corro,
    Focal, ModeSettings, OfflinePearl, ReprMode, Supervised,
};
pub use train::{act, train_meta_policy, MetaConfig, MetaPolicy, MetaPolicyParams, MetaTrainer, MetaTraining, MetricRecord};
