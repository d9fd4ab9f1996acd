use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::train::train_step;
use super::{LifelongError, StreamConfig};
use crate::autodiff::{AdamState, Tensor};
use crate::distill::{LossKind, OneHotTeacher, PreparedSample};
use crate::eval::evaluate_task;
use crate::model::{LanguageModel, LogitsModel, ModelConfig, ModelError};
use crate::taskdata::{mix_seed, TaskDataset, Vocabulary};

/// The frozen model behind a teacher.
#[derive(Debug, Clone)]
pub enum TeacherModel {
    Trained(LanguageModel),
    /// Puts all mass on the gold continuation; used as a reference.
    Gold(OneHotTeacher),
}

impl LogitsModel for TeacherModel {
    fn vocab_size(&self) -> usize {
        match self {
            TeacherModel::Trained(m) => m.vocab_size(),
            TeacherModel::Gold(m) => m.vocab_size(),
        }
    }

    fn context_len(&self) -> usize {
        match self {
            TeacherModel::Trained(m) => m.context_len(),
            TeacherModel::Gold(m) => m.context_len(),
        }
    }

    fn logits(&self, tokens: &[usize]) -> Result<Tensor, ModelError> {
        match self {
            TeacherModel::Trained(m) => m.logits(tokens),
            TeacherModel::Gold(m) => m.logits(tokens),
        }
    }
}

/// A single-task teacher. Only shared references are ever handed out, so its
/// parameters cannot change while a student distills from it.
#[derive(Debug)]
pub struct Teacher {
    pub task_id: String,
    model: TeacherModel,
    /// Test exact match (percent).
    pub test_exact_match: f64,
    /// Task ids of every sample the teacher was trained on.
    pub seen_tasks: Vec<String>,
}

impl Teacher {
    pub fn model(&self) -> &TeacherModel {
        &self.model
    }

    pub fn language_model(&self) -> Option<&LanguageModel> {
        match &self.model {
            TeacherModel::Trained(m) => Some(m),
            TeacherModel::Gold(_) => None,
        }
    }

    pub fn checksum(&self) -> Option<u64> {
        self.language_model().map(|m| m.params().checksum())
    }
}

/// Source of per-task teachers for the distillation drivers.
pub trait TeacherProvider {
    fn teacher(&mut self, task: &TaskDataset, vocab: &Vocabulary, config: &StreamConfig) -> Result<Arc<Teacher>, LifelongError>;
}

fn task_seed(seed: u64, task_id: &str) -> u64 {
    // FNV-1a of the task id, so a task's teacher is the same in every order.
    let h = task_id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3));
    mix_seed(seed, h)
}

pub(crate) fn resolved_model_config(config: &StreamConfig, vocab: &Vocabulary) -> ModelConfig {
    ModelConfig { vocab_size: vocab.len(), ..config.model }
}

/// Trains a fresh model on `task` alone with the QA+LM NLL objective for
/// `epochs_per_task` epochs. No quality gate is applied here.
pub fn train_teacher(task: &TaskDataset, vocab: &Vocabulary, config: &StreamConfig) -> Result<Teacher, LifelongError> {
    config.validate()?;
    if task.train.is_empty() {
        return Err(LifelongError::EmptyTask(task.task_id().to_string()));
    }
    let seed = task_seed(config.seed, task.task_id());
    let mut model = LanguageModel::new(resolved_model_config(config, vocab), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 1));
    let prepared: Vec<PreparedSample> =
        task.train.iter().map(|s| PreparedSample { sample: s.clone(), teacher_probs: None }).collect();
    let batches = prepared.len().div_ceil(config.batch_size);
    let mut adam = AdamState::new(config.optimizer.clone(), model.params(), config.epochs_per_task * batches);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut step = 0;
    for epoch in 0..config.epochs_per_task {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &prepared[i]).collect();
            if train_step(&mut model, &mut adam, &batch, LossKind::nll(), config.lm_weight)?.is_none() {
                return Err(LifelongError::Diverged { task_id: task.task_id().to_string(), step, partial: None });
            }
            step += 1;
        }
        log::debug!("teacher {} epoch {} done", task.task_id(), epoch + 1);
    }
    let score = evaluate_task(&model, vocab, task)?;
    Ok(Teacher {
        task_id: task.task_id().to_string(),
        model: TeacherModel::Trained(model),
        test_exact_match: score.exact_match,
        seen_tasks: vec![task.task_id().to_string()],
    })
}

fn gate(teacher: &Teacher, config: &StreamConfig) -> Result<(), LifelongError> {
    if teacher.test_exact_match < config.teacher_gate {
        return Err(LifelongError::TeacherGate {
            task_id: teacher.task_id.clone(),
            score: teacher.test_exact_match,
            threshold: config.teacher_gate,
            epochs: config.epochs_per_task,
        });
    }
    Ok(())
}

/// Trains teachers on demand and caches them by task and training settings,
/// so repeated streams over the same tasks reuse them. Enforces the quality gate.
#[derive(Debug, Clone, Default)]
pub struct TeacherPool {
    cache: HashMap<String, Arc<Teacher>>,
    latest: HashMap<String, Arc<Teacher>>,
    trained: usize,
}

impl TeacherPool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of teachers trained (cache misses) so far.
    pub fn trained(&self) -> usize {
        self.trained
    }

    /// Most recently provided teacher for `task_id`.
    pub fn get(&self, task_id: &str) -> Option<Arc<Teacher>> {
        self.latest.get(task_id).cloned()
    }

    fn key(task: &TaskDataset, vocab: &Vocabulary, c: &StreamConfig) -> String {
        serde_json::to_string(&(
            &task.spec,
            resolved_model_config(c, vocab),
            &c.optimizer,
            c.epochs_per_task,
            c.batch_size,
            c.seed,
            c.lm_weight,
        ))
        .expect("plain data serializes")
    }
}

impl TeacherProvider for TeacherPool {
    fn teacher(&mut self, task: &TaskDataset, vocab: &Vocabulary, config: &StreamConfig) -> Result<Arc<Teacher>, LifelongError> {
        let key = Self::key(task, vocab, config);
        let teacher = match self.cache.get(&key) {
            Some(t) => t.clone(),
            None => {
                let t = Arc::new(train_teacher(task, vocab, config)?);
                log::info!("teacher {}: test exact match {:.1}", t.task_id, t.test_exact_match);
                self.trained += 1;
                self.cache.insert(key, t.clone());
                t
            }
        };
        self.latest.insert(task.task_id().to_string(), teacher.clone());
        gate(&teacher, config)?;
        Ok(teacher)
    }
}

/// Teachers that reproduce each task's gold training data exactly.
#[derive(Debug, Default)]
pub struct GoldTeachers;

impl TeacherProvider for GoldTeachers {
    fn teacher(&mut self, task: &TaskDataset, vocab: &Vocabulary, config: &StreamConfig) -> Result<Arc<Teacher>, LifelongError> {
        let model = OneHotTeacher::new(&task.train, vocab, config.model.context_len);
        Ok(Arc::new(Teacher {
            task_id: task.task_id().to_string(),
            model: TeacherModel::Gold(model),
            test_exact_match: 100.0,
            seen_tasks: vec![task.task_id().to_string()],
        }))
    }
}
