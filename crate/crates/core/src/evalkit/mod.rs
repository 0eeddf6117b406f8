//! Memorization, the accuracy metric suite, and per-cluster detection of
//! superficial forgetting.
//!
//! All metrics are percentages in `[0, 100]`. An item is memorized when the
//! argmax over its three candidates is the gold answer; ties go to the
//! lowest token id.

mod metrics;
mod report;
mod superficial;

use thiserror::Error;

use crate::microlm::ModelError;

pub use metrics::{
    accuracy, ma_from, memorization, memorization_many, metric_suite, score_from, EvalReport,
    ItemOutcome, MemoTable, Memorizer, SameAnswerSubtotals, SplitName,
};
pub use report::{
    emit_report, read_report, write_score_table, ScoreRow, CSV_HEADER, RECORDS_FILE, SCORES_FILE,
};
pub use superficial::{classify_superficial, forget_knowledge, SuperficialVerdict};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("score is undefined: no items for {0}")]
    UndefinedScore(String),
    #[error("unknown cluster id {0}")]
    UnknownCluster(String),
    #[error("report file {path} line {line}: {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;
