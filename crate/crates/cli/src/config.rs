use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use l2kd::autodiff::AdamConfig;
use l2kd::lifelong::{Method, StreamConfig};
use l2kd::model::ModelConfig;
use l2kd::taskdata::{generate_task, TaskDataset, TaskSpec, Vocabulary};

use crate::CliError;

/// Name of the fully-defaulted config echoed into every output directory.
pub const RESOLVED_CONFIG: &str = "resolved-config.json";

/// Flat experiment config. Every stream setting is an explicit top-level
/// field so the resolved file is a complete, diff-able record of the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub tasks: Vec<TaskSpec>,
    /// Stream order as task ids; empty means the order of `tasks`.
    pub order: Vec<String>,
    pub method: Method,
    /// Methods compared by `permute`; empty means just `method`.
    pub methods: Vec<Method>,
    pub out_dir: PathBuf,
    /// Save every teacher checkpoint next to the report.
    pub retain_teachers: bool,
    /// Train and retain teachers even for methods that do not distill, so
    /// `analyze` can split student accuracy by teacher correctness.
    pub split_analysis: bool,

    pub gamma: f64,
    pub epochs_per_task: usize,
    pub temperature: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub optimizer: AdamConfig,
    pub lm_weight: f64,
    pub top_k: usize,
    pub retry_factor: usize,
    pub reset_optimizer: bool,
    pub teacher_gate: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = StreamConfig::default();
        Self {
            tasks: Vec::new(),
            order: Vec::new(),
            method: Method::Lamol,
            methods: Vec::new(),
            out_dir: PathBuf::from("runs"),
            retain_teachers: true,
            split_analysis: false,
            gamma: s.gamma,
            epochs_per_task: s.epochs_per_task,
            temperature: s.temperature,
            batch_size: s.batch_size,
            seed: s.seed,
            model: s.model,
            optimizer: s.optimizer,
            lm_weight: s.lm_weight,
            top_k: s.top_k,
            retry_factor: s.retry_factor,
            reset_optimizer: s.reset_optimizer,
            teacher_gate: s.teacher_gate,
        }
    }
}

/// Tasks, vocabulary and stream settings derived from a validated config.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub vocab: Vocabulary,
    /// Datasets in stream order.
    pub tasks: Vec<TaskDataset>,
    pub stream: StreamConfig,
}

impl Prepared {
    pub fn order(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.task_id().to_string()).collect()
    }
}

fn field(name: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{name}: {e}"))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| field(&path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn stream_config(&self) -> StreamConfig {
        StreamConfig {
            gamma: self.gamma,
            epochs_per_task: self.epochs_per_task,
            temperature: self.temperature,
            batch_size: self.batch_size,
            seed: self.seed,
            model: self.model,
            optimizer: self.optimizer.clone(),
            lm_weight: self.lm_weight,
            top_k: self.top_k,
            retry_factor: self.retry_factor,
            reset_optimizer: self.reset_optimizer,
            teacher_gate: self.teacher_gate,
        }
    }

    /// `methods`, or `[method]` when none are listed.
    pub fn compared_methods(&self) -> Vec<Method> {
        if self.methods.is_empty() {
            vec![self.method]
        } else {
            self.methods.clone()
        }
    }

    /// Task ids in stream order.
    pub fn stream_order(&self) -> Vec<String> {
        if self.order.is_empty() {
            self.tasks.iter().map(|t| t.task_id.clone()).collect()
        } else {
            self.order.clone()
        }
    }

    /// Checks every field and builds the datasets. Errors name the offending field.
    pub fn prepare(&self) -> Result<Prepared, CliError> {
        if self.tasks.is_empty() {
            return Err(field("tasks", "at least one task is required"));
        }
        let stream = self.stream_config();
        stream.validate().map_err(|e| {
            // The core message already leads with the field name.
            CliError::Config(e.to_string().trim_start_matches("invalid stream config: ").to_string())
        })?;
        let mut seen = HashSet::new();
        for m in &self.methods {
            if !seen.insert(*m) {
                return Err(field("methods", format!("{m} listed twice")));
            }
        }
        let ids: Vec<&str> = self.tasks.iter().map(|t| t.task_id.as_str()).collect();
        let order = self.stream_order();
        let mut sorted_order: Vec<&str> = order.iter().map(String::as_str).collect();
        let mut sorted_ids = ids.clone();
        sorted_order.sort_unstable();
        sorted_ids.sort_unstable();
        if sorted_order != sorted_ids {
            return Err(field("order", format!("{order:?} is not a permutation of the task ids {ids:?}")));
        }
        for t in &self.tasks {
            t.validate().map_err(|e| field(&format!("tasks[{}]", t.task_id), e))?;
        }
        let vocab = Vocabulary::build(&self.tasks).map_err(|e| field("tasks", e))?;
        let model = ModelConfig { vocab_size: vocab.len(), ..self.model };
        model.validate().map_err(|e| field("model", e))?;
        let mut tasks = Vec::with_capacity(order.len());
        for id in &order {
            let spec = self.tasks.iter().find(|t| &t.task_id == id).expect("order checked above");
            tasks.push(generate_task(spec, &vocab, model.context_len).map_err(|e| field(&format!("tasks[{id}]"), e))?);
        }
        Ok(Prepared { vocab, tasks, stream })
    }

    /// Creates `out_dir` and checks it accepts files.
    pub fn ensure_out_dir(&self) -> Result<(), CliError> {
        let probe = self.out_dir.join(".write-check");
        fs::create_dir_all(&self.out_dir)
            .and_then(|()| fs::write(&probe, b""))
            .and_then(|()| fs::remove_file(&probe))
            .map_err(|e| field("out_dir", format!("{} is not writable: {e}", self.out_dir.display())))
    }

    /// Writes the config with every default and derived list spelled out.
    pub fn write_resolved(&self, dir: &Path) -> Result<(), CliError> {
        let resolved = RunConfig { order: self.stream_order(), methods: self.compared_methods(), ..self.clone() };
        let text = serde_json::to_string_pretty(&resolved).expect("config serializes");
        fs::write(dir.join(RESOLVED_CONFIG), text + "\n").map_err(|e| CliError::io(dir.join(RESOLVED_CONFIG), e))
    }
}
