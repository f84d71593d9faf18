//! Reproducible experiments: dataset generation, training, the adaptation
//! grid and result aggregation.

pub mod config;
pub mod dataset;
pub mod evaluate;
pub mod report;
pub mod train;

pub use config::{DataConfig, ExperimentConfig, Split, TrainConfig};
pub use evaluate::{run_adapt_eval, Cell, Evaluation};
pub use report::run_report;
pub use train::run_train;
