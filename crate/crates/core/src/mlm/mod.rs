//! Masked-LM pretraining: corruption, loss, optimizer and schedule.

pub mod adam;
pub mod loss;
pub mod masking;
pub mod schedule;
pub mod trainer;

pub use adam::{adam_step, clip_global_norm, AdamConfig, AdamState, OptimError};
pub use loss::{mlm_loss, LossError, MlmLoss};
pub use masking::{apply_masking, MaskAction, MaskingError, MaskingPolicy};
pub use schedule::{lr_at, warmup_steps, LinearSchedule};
pub use trainer::{evaluate, MetricRecord, TrainError, TrainState, Trainer, TrainerConfig};
