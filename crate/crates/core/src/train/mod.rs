//! Training regimes: joint nested training, iterative pruning with
//! increasing or decreasing sparsity, and BN post-training.

mod bn;
mod common;
mod dress;
mod iterative;
pub mod record;

pub use bn::{bn_posttrain, bn_posttrain_params};
pub use common::evaluate;
pub use dress::{compute_loss_weights, dress_step_gradient, dress_train, pretrain, DressOutcome, StepGradient};
pub use iterative::{iterative_decreased, iterative_increased, IterativeOutcome, PruneScheduler};
pub use record::{cosine, CosineSample, CosineTrace, EpochRow, RunMetadata, RunRecord};
