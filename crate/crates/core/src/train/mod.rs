//! Losses, optimizer, learning-rate schedule and the stage drivers.

pub mod config;
pub mod loss;
pub mod optim;
pub mod report;
pub mod schedule;
pub mod stages;

pub use config::{MixOrder, StageKind, TrainConfig};
pub use loss::{
    dataset_nll, loss_and_grads, loss_value, masked_nll_loss, orth_loss, record_objective,
    record_orth_loss, LossValues, Objective,
};
pub use optim::{adamw_step, adamw_update, clip_grad_norm, AdamW, OptimizerState};
pub use report::{StageReport, StepRecord};
pub use schedule::{cosine_warmup_lr, warmup_steps};
pub use stages::{run_da, run_mka, run_pretrain, train_loop, StopHook};
