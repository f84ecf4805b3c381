//! Masked-MSE training with Adam, exponential learning-rate decay, early
//! stopping and best-on-validation checkpoints.

mod adam;
mod checkpoint;
mod config;
mod trainer;

pub use adam::{adam_step, AdamState};
pub use checkpoint::Checkpoint;
pub use config::{early_stop, lr_schedule, TrainConfig};
pub use trainer::{
    evaluate_loss, initial_params, mse_loss, train, train_from, write_log, EpochLog, TrainOutcome, Trainer,
};
