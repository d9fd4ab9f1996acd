//! Stream drivers: distillation streams, pseudo-replay baseline, plain
//! sequential finetuning and the multitask upper bound.

mod pseudo;
mod stream;
mod teacher;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AutodiffError};
use crate::distill::{DistillError, DistillKind, LossKind};
use crate::eval::{EvalError, MetricRecord};
use crate::model::{ModelConfig, ModelError};
use crate::taskdata::DataError;

pub use pseudo::{apportion, pseudo_count, sample_pseudo_data, PseudoDataset, PseudoTaskStats};
pub use stream::{
    pseudo_batches_per_epoch, run_finetune_stream, run_l2kd_stream, run_lamol_stream, run_method, run_multitask, NoObserver,
    RunObserver,
};
pub use teacher::{train_teacher, GoldTeachers, Teacher, TeacherModel, TeacherPool, TeacherProvider};

#[derive(Debug, thiserror::Error)]
pub enum LifelongError {
    #[error("invalid stream config: {0}")]
    InvalidConfig(String),
    #[error("task {0} has no training samples")]
    EmptyTask(String),
    #[error(
        "teacher for task {task_id} reached {score:.1}% exact match after {epochs} epochs, below the {threshold:.1}% gate; \
         the stream cannot distill from it (raise epochs or model size, or simplify the task)"
    )]
    TeacherGate { task_id: String, score: f64, threshold: f64, epochs: usize },
    #[error("every teacher decode for task {task_id} was truncated; nothing left to distill")]
    AllDecodesTruncated { task_id: String },
    #[error("training diverged (non-finite loss or parameters) on task {task_id} at step {step}")]
    Diverged { task_id: String, step: usize, partial: Option<Box<RunReport>> },
    #[error("observer failed: {0}")]
    Observer(String),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Training procedure applied to a task stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "finetune")]
    Finetune,
    #[serde(rename = "lamol")]
    Lamol,
    #[serde(rename = "l2kd-word")]
    L2kdWord,
    #[serde(rename = "l2kd-seq")]
    L2kdSeq,
    #[serde(rename = "l2kd-seqsoft")]
    L2kdSeqSoft,
    #[serde(rename = "multitask")]
    Multitask,
    #[serde(rename = "multitask-seqkd")]
    MultitaskSeqKd,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Finetune,
        Method::Lamol,
        Method::L2kdWord,
        Method::L2kdSeq,
        Method::L2kdSeqSoft,
        Method::Multitask,
        Method::MultitaskSeqKd,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Finetune => "finetune",
            Method::Lamol => "lamol",
            Method::L2kdWord => "l2kd-word",
            Method::L2kdSeq => "l2kd-seq",
            Method::L2kdSeqSoft => "l2kd-seqsoft",
            Method::Multitask => "multitask",
            Method::MultitaskSeqKd => "multitask-seqkd",
        }
    }

    /// Objective applied to new-task samples.
    pub fn distill_kind(&self) -> DistillKind {
        match self {
            Method::Finetune | Method::Lamol | Method::Multitask => DistillKind::Nll,
            Method::L2kdWord => DistillKind::WordKd,
            Method::L2kdSeq | Method::MultitaskSeqKd => DistillKind::SeqKd,
            Method::L2kdSeqSoft => DistillKind::SeqKdSoft,
        }
    }

    pub fn loss_kind(&self, temperature: f64) -> Result<LossKind, DistillError> {
        match self.distill_kind() {
            DistillKind::Nll => Ok(LossKind::nll()),
            kind => LossKind::new(kind, temperature),
        }
    }

    pub fn is_multitask(&self) -> bool {
        matches!(self, Method::Multitask | Method::MultitaskSeqKd)
    }

    pub fn uses_replay(&self) -> bool {
        !matches!(self, Method::Finetune) && !self.is_multitask()
    }

    pub fn is_l2kd(&self) -> bool {
        matches!(self, Method::L2kdWord | Method::L2kdSeq | Method::L2kdSeqSoft)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method {s:?} (expected one of {})", Method::ALL.map(|m| m.name()).join(", ")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    /// Pseudo-samples generated per new-task training sample.
    pub gamma: f64,
    pub epochs_per_task: usize,
    /// Distillation temperature for the soft kinds.
    pub temperature: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// `vocab_size` is filled in from the vocabulary at run time.
    pub model: ModelConfig,
    pub optimizer: AdamConfig,
    /// Weight of the LM term relative to the QA term.
    pub lm_weight: f64,
    /// Candidates kept when sampling pseudo-data.
    pub top_k: usize,
    /// Generation attempts allowed per requested pseudo-sample.
    pub retry_factor: usize,
    /// Fresh optimizer state and warmup at every task boundary.
    pub reset_optimizer: bool,
    /// Minimum teacher test exact match (percent) before distilling.
    pub teacher_gate: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            gamma: 0.2,
            epochs_per_task: 9,
            temperature: LossKind::DEFAULT_TEMPERATURE,
            batch_size: 8,
            seed: 0,
            model: ModelConfig::default(),
            optimizer: AdamConfig::default(),
            lm_weight: 1.0,
            top_k: 20,
            retry_factor: 5,
            reset_optimizer: true,
            teacher_gate: 95.0,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<(), LifelongError> {
        let bad = |m: String| Err(LifelongError::InvalidConfig(m));
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be >= 0, got {}", self.gamma));
        }
        if self.epochs_per_task == 0 {
            return bad("epochs_per_task must be >= 1".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lm_weight >= 0.0 && self.lm_weight.is_finite()) {
            return bad(format!("lm_weight must be >= 0, got {}", self.lm_weight));
        }
        if self.top_k == 0 {
            return bad("top_k must be >= 1".into());
        }
        if self.retry_factor == 0 {
            return bad("retry_factor must be >= 1".into());
        }
        if !(0.0..=100.0).contains(&self.teacher_gate) {
            return bad(format!("teacher_gate must lie in [0, 100], got {}", self.teacher_gate));
        }
        self.optimizer.validate().map_err(|e| LifelongError::InvalidConfig(format!("optimizer: {e}")))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchSource {
    New,
    Pseudo,
}

/// One optimizer step in the audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// 1-based global epoch.
    pub epoch: usize,
    pub training_task: String,
    pub source: BatchSource,
    pub loss_kind: DistillKind,
    /// Distinct task ids of the samples in the batch.
    pub batch_tasks: Vec<String>,
    pub batch_size: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSummary {
    pub task_id: String,
    pub test_exact_match: f64,
    /// Parameter checksum when distillation on this task started and ended.
    pub checksum_before: Option<u64>,
    pub checksum_after: Option<u64>,
    /// Training samples whose teacher decode was truncated and dropped.
    pub truncated_decodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalScore {
    pub task_id: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub order: Vec<String>,
    pub seed: u64,
    pub epochs_per_task: usize,
    pub total_epochs: usize,
    /// Pseudo-sample rate actually used (0 for methods without replay).
    pub gamma: f64,
    /// Global epochs after which the training task changes.
    pub boundaries: Vec<usize>,
    pub records: Vec<MetricRecord>,
    pub pseudo: Vec<PseudoDataset>,
    pub teachers: Vec<TeacherSummary>,
    pub steps: Vec<StepRecord>,
    pub final_scores: Vec<FinalScore>,
    pub final_average: f64,
    pub completed: bool,
}

impl RunReport {
    pub fn final_score(&self, task_id: &str) -> Option<f64> {
        self.final_scores.iter().find(|s| s.task_id == task_id).map(|s| s.value)
    }

    /// Score of `eval_task` at the end of 1-based global `epoch`.
    pub fn score_at(&self, epoch: usize, eval_task: &str) -> Option<f64> {
        self.records.iter().find(|r| r.epoch == epoch && r.eval_task == eval_task).map(|r| r.value)
    }

    /// Writes the per-epoch rows as CSV: `epoch,training_task,eval_task,metric,value`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.records {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests;
