//! CIFAR-10 ingestion, SGD training, experiment configuration and report
//! emission around the `sbattn` core.

pub mod checks;
pub mod config;
pub mod data;
pub mod error;
pub mod report;
pub mod train;

pub use config::ExperimentConfig;
pub use data::{load_cifar10, Dataset, Split};
pub use error::{HarnessError, Result};
pub use train::{lr_at, sgd_step, train_eval, RunReport, Schedule, TrainConfig};
