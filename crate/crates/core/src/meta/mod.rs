//! Bi-level meta-training: shared inner step, MFL update of the extractor,
//! first-order MIL update of the head initialization, and one-shot
//! fine-tuning.

mod bilevel;
mod finetune;
mod optim;
mod train;

pub use bilevel::{
    check_hypergradient, hypergradient, inner_step, mfl_outer_step, mil_outer_step, params_tape, HypergradMode, Hypergrad,
};
pub use finetune::{fine_tune, FineTuneConfig, FineTuneOutcome};
pub use optim::{poly_lr, Nesterov};
pub use train::{
    joint_step, mean_seg_loss, meta_train, mfl_forward, run_episode, sample_episode_datasets, validation_loss, Algorithm,
    BatchSource, EpisodeTrace, MetaState, MflForward, Snapshot, TrainConfig, TrainEvent, TrainOutcome,
};
