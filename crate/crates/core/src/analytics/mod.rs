//! Ensemble voting, confusion matrices, dice, click attention, statistics and
//! report files.

mod confusion;
mod masks;
pub mod report;
mod stats;
mod vote;

use thiserror::Error;

use crate::stimuli::StimuliError;

pub use confusion::{matrix_correlation, ConfusionMatrix, CorrelationMode};
pub use masks::{aggregate_click_attention, click_sequence_colors, dice, RED, YELLOW};
pub use stats::{one_way_anova, pearson, ptukey, tukey_pairwise, StatsResult, TukeyComparison};
pub use vote::{
    collect_pair_logits, simple_vote, tally, weighted_vote, PairLogits, VoteMethod, VoteTally,
};

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("vote input: {0}")]
    VoteInput(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error(transparent)]
    Stimuli(#[from] StimuliError),
    #[error(transparent)]
    Training(#[from] crate::training::TrainingError),
    #[error(transparent)]
    Saliency(#[from] crate::saliency::SaliencyError),
    #[error(transparent)]
    Trial(#[from] crate::trial::TrialError),
    #[error(transparent)]
    Png(#[from] png::EncodingError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
