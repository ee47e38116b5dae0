//! One-class softmax training: loss, Adam, learning-rate schedule,
//! class-balanced batching and the training loop.

mod ocs;
mod optim;
mod sampler;
mod trainer;

pub use ocs::{ocs_loss, OcsParams};
pub use optim::{adam_step, Adam, AdamHyper, AdamMoments};
pub use sampler::{balanced_batches, crop_or_wrap};
pub use trainer::{
    lr_at, missing_features, score_utterances, train, EpochStats, TrainConfig, TrainLayout, TrainSummary,
};
