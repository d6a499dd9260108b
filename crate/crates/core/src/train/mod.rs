//! Optimizer, learning-rate schedule and the training loop.

mod optim;
mod schedule;
mod trainer;

pub use optim::{AdamW, AdamWConfig, OPTIM_M_PREFIX, OPTIM_V_PREFIX};
pub use schedule::{cosine_warm_restart_lr, steps_per_cycle};
pub use trainer::{sample_order, Sample, StepLog, TrainConfig, Trainer, CHECKPOINT_FILE, LOG_FILE, LOG_HEADER};
