//! Metrics, per-task evaluation, order-permutation summaries, learning curves
//! and the teacher-split analysis.

mod metrics;
mod report;
mod split;

pub use metrics::{evaluate_task, exact_match, predict_answer, score_samples, token_f1, MetricRecord, TaskScore};
pub use report::{
    all_orders, learning_curves, order_tasks, permutation_harness, population_std, summarize, write_curve_csv, CurveRow,
    MethodSummary, OrderResult, PermutationReport, TaskStat, MAX_PERMUTED_TASKS,
};
pub use split::{teacher_split_analysis, SplitAnalysis};

use crate::model::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("model vocabulary {model} differs from task vocabulary {vocab}")]
    VocabMismatch { model: usize, vocab: usize },
    #[error("task {0} has an empty test split")]
    EmptyTestSet(String),
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("{tasks} tasks exceed the permutation limit of {max}")]
    TooManyTasks { tasks: usize, max: usize },
    #[error("report is incomplete: expected {expected} evaluation rows, found {got}")]
    IncompleteReport { expected: usize, got: usize },
    #[error("stream run failed: {0}")]
    Run(Box<crate::lifelong::LifelongError>),
    #[error(transparent)]
    Model(#[from] ModelError),
}
