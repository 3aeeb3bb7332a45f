//! Training procedures: baselines, block-wise IR training and its ablations,
//! SGD with milestone schedules, magnitude pruning and evaluation.

mod config;
mod prune;
mod run;
mod sgd;

pub use config::{lr_at_epoch, TrainConfig, Variant};
pub use prune::{magnitude_prune, prunable, PruneScope, PruneSpec};
pub use run::{evaluate, fine_tune, train, EpochRow, Metric, Net, RunReport};
pub use sgd::{sgd_step, SgdConfig};
