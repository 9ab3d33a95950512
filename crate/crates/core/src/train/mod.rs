//! Losses, reverse pass through the fit, optimizer and training loop.

pub mod adam;
pub mod config;
pub mod loss;
pub mod pipeline;
pub mod trainer;

pub use config::TrainConfig;
pub use loss::{LossTerms, LossWeights};
pub use pipeline::{FitSettings, TermScales};
pub use trainer::{batch_objective, gradient_check, recorded_config, train, BatchResult, GradientCheck, EpochMetrics, TrainSample, TrainSummary};
