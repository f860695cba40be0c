//! Optimization, schedules, the train/eval loop and checkpoints.

mod checkpoint;
mod loss;
mod optim;
mod schedule;
mod trainer;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, MAGIC, VERSION,
};
pub use loss::{label_smoothed_cross_entropy, smooth_targets};
pub use optim::{adamw_step, AdamWConfig, OptimState};
pub use schedule::{cosine_warmup_lr, ScheduleConfig};
pub use trainer::{
    evaluate, fit, train_epoch, EpochRow, EvalResult, TrainConfig, TrainReport, TrainState,
};
