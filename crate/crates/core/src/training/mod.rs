//! Fine-tuning of lowered plans through their piecewise-linear tables.
//!
//! Gradients flow through every primitive by hand-written reverse passes;
//! a table lookup passes back the slope of the segment its input fell in.
//! Tables stay fixed, only the trainable constants move.

mod backward;
mod data;
mod finetune;
mod pipeline;

pub use backward::{backward, pwl_gradient};
pub use data::{two_blobs, Dataset};
pub use finetune::{
    accuracy_gap, apply_weights, finetune, history_to_csv, loss_and_gradients, trainable_weights, plan_accuracy, AccuracyGap, EpochMetrics, FinetuneResult, Head,
    TrainConfig,
};
pub use pipeline::{approximate_and_retrain, PipelineOutcome};
