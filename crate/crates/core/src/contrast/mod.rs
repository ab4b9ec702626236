//! Contrastive training of the transition encoder: the InfoNCE loss,
//! negative-pair strategies, the CVAE behind the generative strategy, and an
//! exact oracle for the mutual-information bound.

mod cvae;
mod infonce;
mod oracle;
mod relabel;
mod strategies;
mod train;

pub use cvae::{cvae_loss, train_cvae, Cvae, CvaeConfig, CvaeGradients, CvaeLoss, CvaeParams};
pub use infonce::{info_nce_loss, info_nce_with_grad, InfoNce};
pub use oracle::{mi_oracle, OracleResult, Tabulation};
pub use relabel::{train_relabel_models, RelabelConfig, RelabelModels};
pub use strategies::{
    build_strategy, default_strategy, strategy_names, CrossTaskNegatives, GenerativeNegatives, NegativeSampler,
    RandomizeNegatives, RelabelNegatives, StrategySettings,
};
pub use train::{
    contrastive_loss_and_grad, mean_contrastive_loss, sample_contrast_batch, train_transition_encoder, ContrastConfig,
    ContrastOutcome, ContrastSample,
};
