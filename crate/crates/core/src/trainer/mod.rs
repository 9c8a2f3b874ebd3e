//! Optimizer, schedule, checkpoints and the staged training pipeline:
//! denoising pretraining, single-source finetuning, extension and
//! multi-source finetuning.

mod checkpoint;
mod optim;
mod stage;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Stage, MAGIC};
pub use optim::{adam_update, clip_global_norm, lr_inverse_sqrt, AdamConfig, AdamState};
pub use stage::{
    evaluate_loss, extend_to_msg, train_stage, FreezePolicy, Init, LossReport, Objective, StageConfig, StageData,
    TrainReport,
};
