//! Margin loss, optimiser, schedule and the training loop.

pub mod loss;
pub mod optim;
mod trainer;

pub use trainer::{train, train_from, LogRow, TrainConfig, TrainData, TrainOutcome, LOG_HEADER};
