//! Loss mathematics and the head training loop.

mod adam;
mod config;
mod history;
pub mod math;
mod trainer;

pub use adam::{Adam, AdamParams};
pub use config::TrainConfig;
pub use history::{EpochRecord, TrainingHistory};
pub use math::{cross_entropy_lsr, relu, softmax, softmax_rows, SmoothedTarget};
pub use trainer::{dropout_sweep, evaluate_features, train, train_features, FeatureSet, Trainer, DROPOUT_GRID};
