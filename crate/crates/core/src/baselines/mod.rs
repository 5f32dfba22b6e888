//! Reference predictors: category-pair statistics and a layout-blind MLP.

mod mlp;
mod stats;

pub use mlp::{record_categories, MlpInput, PairwiseMlp, DEFAULT_HIDDEN};
pub use stats::{PairStats, PairStatsTable, Statistic, StatsPredictor, MODE_BIN_WIDTH};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("training set has no target instances")]
    EmptyDataset,
    #[error("the commonsense MLP needs a knowledge snapshot")]
    MissingKnowledge,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}
