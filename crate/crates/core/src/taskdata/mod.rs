//! Shared vocabulary, the single-sequence sample encoding, pseudo-sample
//! parsing and synthetic task generators.

mod generate;
mod sample;
mod vocab;

pub use generate::{generate_task, GeneratorKind, Metric, TaskDataset, TaskSpec};
pub(crate) use generate::mix as mix_seed;
pub use sample::{encode_sample, make_lm_prefix, parse_pseudo, RejectReason, Sample, SampleRecord};
pub use vocab::{bos_token, Vocabulary, ANS_TOKEN, EOS_TOKEN, PAD_TOKEN};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("duplicate task {0:?}")]
    DuplicateTask(String),
    #[error("duplicate token {0:?}")]
    DuplicateToken(String),
    #[error("token {0:?} uses reserved <...> syntax")]
    ReservedToken(String),
    #[error(
        "task {task_id}: encoded length {total} (context {context}, question {question}, answer {answer}) exceeds context length {limit}"
    )]
    Overflow { task_id: String, context: usize, question: usize, answer: usize, total: usize, limit: usize },
    #[error("task {task_id}: alphabet has {got} symbols, generator needs {needed}")]
    AlphabetTooSmall { task_id: String, needed: usize, got: usize },
    #[error("task {task_id}: {reason}")]
    InvalidSpec { task_id: String, reason: String },
}
