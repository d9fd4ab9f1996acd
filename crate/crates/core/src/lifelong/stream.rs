use std::collections::HashSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::pseudo::{pseudo_count, sample_pseudo_data};
use super::teacher::resolved_model_config;
use super::train::{train_step, StepLog};
use super::{
    BatchSource, FinalScore, LifelongError, Method, RunReport, StreamConfig, Teacher, TeacherProvider, TeacherSummary,
};
use crate::autodiff::AdamState;
use crate::distill::{prepare_new_sample, DistillKind, LossKind, PreparedSample};
use crate::eval::{evaluate_task, MetricRecord};
use crate::model::LanguageModel;
use crate::taskdata::{mix_seed, TaskDataset, Vocabulary};

const STUDENT_TAG: u64 = 0x5354_5544;
const SHUFFLE_TAG: u64 = 0x5348_5546;
const MULTITASK_LABEL: &str = "multitask";

/// Hooks called as a run progresses (checkpointing, progress output).
pub trait RunObserver {
    fn epoch_finished(&mut self, _epoch: usize, _student: &LanguageModel, _records: &[MetricRecord]) -> Result<(), LifelongError> {
        Ok(())
    }

    fn task_finished(&mut self, _index: usize, _task_id: &str, _student: &LanguageModel) -> Result<(), LifelongError> {
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct NoObserver;

impl RunObserver for NoObserver {}

/// `floor(gamma * new_batches)`.
pub fn pseudo_batches_per_epoch(gamma: f64, new_batches: usize) -> usize {
    pseudo_count(gamma, new_batches)
}

fn check_tasks(tasks: &[TaskDataset], vocab: &Vocabulary) -> Result<(), LifelongError> {
    if tasks.is_empty() {
        return Err(LifelongError::InvalidConfig("task stream is empty".into()));
    }
    let mut seen = HashSet::new();
    for t in tasks {
        if !seen.insert(t.task_id()) {
            return Err(LifelongError::InvalidConfig(format!("task {} appears twice in the stream", t.task_id())));
        }
        vocab.bos(t.task_id())?;
        if t.train.is_empty() {
            return Err(LifelongError::EmptyTask(t.task_id().to_string()));
        }
    }
    Ok(())
}

fn evaluate_all(
    student: &LanguageModel,
    vocab: &Vocabulary,
    tasks: &[TaskDataset],
    epoch: usize,
    training_task: &str,
) -> Result<Vec<MetricRecord>, LifelongError> {
    tasks
        .iter()
        .map(|t| {
            let score = evaluate_task(student, vocab, t)?;
            Ok(MetricRecord {
                epoch,
                training_task: training_task.to_string(),
                eval_task: t.task_id().to_string(),
                metric: t.spec.metric.name().to_string(),
                value: score.value,
            })
        })
        .collect()
}

fn empty_report(method: Method, tasks: &[TaskDataset], config: &StreamConfig, gamma: f64, total_epochs: usize) -> RunReport {
    RunReport {
        method,
        order: tasks.iter().map(|t| t.task_id().to_string()).collect(),
        seed: config.seed,
        epochs_per_task: config.epochs_per_task,
        total_epochs,
        gamma,
        boundaries: Vec::new(),
        records: Vec::new(),
        pseudo: Vec::new(),
        teachers: Vec::new(),
        steps: Vec::new(),
        final_scores: Vec::new(),
        final_average: 0.0,
        completed: false,
    }
}

fn finish(mut report: RunReport, log: StepLog) -> RunReport {
    report.steps = log.records;
    let last = report.records.iter().map(|r| r.epoch).max().unwrap_or(0);
    report.final_scores = report
        .records
        .iter()
        .filter(|r| r.epoch == last)
        .map(|r| FinalScore { task_id: r.eval_task.clone(), value: r.value })
        .collect();
    let n = report.final_scores.len().max(1) as f64;
    report.final_average = report.final_scores.iter().map(|s| s.value).sum::<f64>() / n;
    report.completed = true;
    report
}

fn diverged(report: &RunReport, log: &StepLog, task_id: &str) -> LifelongError {
    let mut partial = report.clone();
    partial.steps = log.records.clone();
    LifelongError::Diverged { task_id: task_id.to_string(), step: log.records.len(), partial: Some(Box::new(partial)) }
}

fn prepare_all(
    teacher: Option<&Arc<Teacher>>,
    vocab: &Vocabulary,
    task: &TaskDataset,
    loss: LossKind,
) -> Result<(Vec<PreparedSample>, usize), LifelongError> {
    let mut out = Vec::with_capacity(task.train.len());
    let mut truncated = 0;
    for s in &task.train {
        match prepare_new_sample(teacher.map(|t| t.model()), vocab, s, loss)? {
            Some(p) => out.push(p),
            None => truncated += 1,
        }
    }
    if truncated > 0 {
        log::warn!("task {}: {truncated} truncated teacher decodes dropped", task.task_id());
    }
    if out.is_empty() {
        return Err(LifelongError::AllDecodesTruncated { task_id: task.task_id().to_string() });
    }
    Ok((out, truncated))
}

/// Runs `method` over `tasks` in the given order.
pub fn run_method(
    method: Method,
    tasks: &[TaskDataset],
    vocab: &Vocabulary,
    config: &StreamConfig,
    teachers: &mut dyn TeacherProvider,
    observer: &mut dyn RunObserver,
) -> Result<RunReport, LifelongError> {
    config.validate()?;
    check_tasks(tasks, vocab)?;
    if method.is_multitask() {
        multitask(method, tasks, vocab, config, teachers, observer)
    } else {
        sequential(method, tasks, vocab, config, teachers, observer)
    }
}

fn sequential(
    method: Method,
    tasks: &[TaskDataset],
    vocab: &Vocabulary,
    config: &StreamConfig,
    teachers: &mut dyn TeacherProvider,
    observer: &mut dyn RunObserver,
) -> Result<RunReport, LifelongError> {
    let loss = method.loss_kind(config.temperature)?;
    let gamma = if method.uses_replay() { config.gamma } else { 0.0 };
    if method == Method::Finetune && config.gamma != 0.0 {
        log::info!("finetune: gamma {} overridden to 0", config.gamma);
    }
    let bs = config.batch_size;
    let epochs = config.epochs_per_task;
    let mut student = LanguageModel::new(resolved_model_config(config, vocab), mix_seed(config.seed, STUDENT_TAG))?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, SHUFFLE_TAG));
    let mut report = empty_report(method, tasks, config, gamma, epochs * tasks.len());
    let mut log = StepLog { records: Vec::new() };

    // Planned steps for a schedule spanning the whole stream.
    let stream_steps: usize = tasks
        .iter()
        .enumerate()
        .map(|(m, t)| {
            let nb = t.train.len().div_ceil(bs);
            let npb = if m > 0 && gamma > 0.0 { pseudo_batches_per_epoch(gamma, nb) } else { 0 };
            epochs * (nb + npb)
        })
        .sum();
    let mut adam: Option<AdamState> = None;
    let mut epoch_global = 0;

    for (m, task) in tasks.iter().enumerate() {
        let task_id = task.task_id();
        let teacher = if loss.kind.needs_teacher() { Some(teachers.teacher(task, vocab, config)?) } else { None };
        let checksum_before = teacher.as_ref().and_then(|t| t.checksum());
        let (prepared, truncated) = prepare_all(teacher.as_ref(), vocab, task, loss)?;

        let prev: Vec<&str> = tasks[..m].iter().map(TaskDataset::task_id).collect();
        let mut pseudo_samples: Vec<PreparedSample> = Vec::new();
        if gamma > 0.0 && m > 0 {
            let count = pseudo_count(gamma, task.train.len());
            let set = sample_pseudo_data(&student, vocab, task_id, &prev, count, config.top_k, config.retry_factor, &mut rng)?;
            if set.shortfall() > 0 {
                log::warn!("task {task_id}: pseudo-data short by {} after retry cap", set.shortfall());
            }
            pseudo_samples = set.samples.iter().map(|s| PreparedSample { sample: s.clone(), teacher_probs: None }).collect();
            report.pseudo.push(set);
        }

        let nb = prepared.len().div_ceil(bs);
        let npb = if pseudo_samples.is_empty() { 0 } else { pseudo_batches_per_epoch(gamma, nb) };
        if config.reset_optimizer || adam.is_none() {
            let total = if config.reset_optimizer { epochs * (nb + npb) } else { stream_steps };
            adam = Some(AdamState::new(config.optimizer.clone(), student.params(), total));
        }
        let adam = adam.as_mut().expect("initialized above");

        let mut order: Vec<usize> = (0..prepared.len()).collect();
        let mut pseudo_order: Vec<usize> = (0..pseudo_samples.len()).collect();
        for _ in 0..epochs {
            epoch_global += 1;
            order.shuffle(&mut rng);
            pseudo_order.shuffle(&mut rng);
            let mut plan = vec![BatchSource::New; nb];
            plan.extend(std::iter::repeat_n(BatchSource::Pseudo, npb));
            plan.shuffle(&mut rng);

            let mut new_chunks = order.chunks(bs);
            let mut cursor = 0usize;
            for source in plan {
                let (batch, kind): (Vec<&PreparedSample>, LossKind) = match source {
                    BatchSource::New => {
                        let chunk = new_chunks.next().expect("plan holds nb new batches");
                        (chunk.iter().map(|&i| &prepared[i]).collect(), loss)
                    }
                    BatchSource::Pseudo => {
                        let batch = (0..bs.min(pseudo_order.len()))
                            .map(|j| &pseudo_samples[pseudo_order[(cursor + j) % pseudo_order.len()]])
                            .collect();
                        cursor += bs;
                        // Replay never consults a teacher.
                        (batch, LossKind::nll())
                    }
                };
                match train_step(&mut student, adam, &batch, kind, config.lm_weight)? {
                    Some((value, lr)) => log.push(epoch_global, task_id, source, kind.kind, &batch, value, lr),
                    None => return Err(diverged(&report, &log, task_id)),
                }
            }
            let rows = evaluate_all(&student, vocab, tasks, epoch_global, task_id)?;
            observer.epoch_finished(epoch_global, &student, &rows)?;
            report.records.extend(rows);
        }

        if m + 1 < tasks.len() {
            report.boundaries.push(epoch_global);
        }
        if let Some(t) = &teacher {
            report.teachers.push(TeacherSummary {
                task_id: task_id.to_string(),
                test_exact_match: t.test_exact_match,
                checksum_before,
                checksum_after: t.checksum(),
                truncated_decodes: truncated,
            });
        }
        observer.task_finished(m, task_id, &student)?;
        log::info!("{method} task {task_id} done ({} steps so far)", log.records.len());
        // The teacher handle is dropped here, before the next task starts.
    }
    Ok(finish(report, log))
}

fn multitask(
    method: Method,
    tasks: &[TaskDataset],
    vocab: &Vocabulary,
    config: &StreamConfig,
    teachers: &mut dyn TeacherProvider,
    observer: &mut dyn RunObserver,
) -> Result<RunReport, LifelongError> {
    let loss = method.loss_kind(config.temperature)?;
    let bs = config.batch_size;
    let total_epochs = config.epochs_per_task * tasks.len();
    let mut report = empty_report(method, tasks, config, 0.0, total_epochs);

    let mut prepared = Vec::new();
    for task in tasks {
        let teacher = if loss.kind.needs_teacher() { Some(teachers.teacher(task, vocab, config)?) } else { None };
        let (items, truncated) = prepare_all(teacher.as_ref(), vocab, task, loss)?;
        prepared.extend(items);
        if let Some(t) = &teacher {
            report.teachers.push(TeacherSummary {
                task_id: task.task_id().to_string(),
                test_exact_match: t.test_exact_match,
                checksum_before: t.checksum(),
                checksum_after: t.checksum(),
                truncated_decodes: truncated,
            });
        }
    }

    let mut student = LanguageModel::new(resolved_model_config(config, vocab), mix_seed(config.seed, STUDENT_TAG))?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, SHUFFLE_TAG));
    let nb = prepared.len().div_ceil(bs);
    let mut adam = AdamState::new(config.optimizer.clone(), student.params(), total_epochs * nb);
    let mut log = StepLog { records: Vec::new() };
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    // Seq-KD targets are teacher decodes: hard NLL on the rewritten samples.
    let step_kind = if loss.kind == DistillKind::SeqKd { LossKind::nll() } else { loss };
    for epoch in 1..=total_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs) {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &prepared[i]).collect();
            match train_step(&mut student, &mut adam, &batch, step_kind, config.lm_weight)? {
                Some((value, lr)) => log.push(epoch, MULTITASK_LABEL, BatchSource::New, loss.kind, &batch, value, lr),
                None => return Err(diverged(&report, &log, MULTITASK_LABEL)),
            }
        }
        let rows = evaluate_all(&student, vocab, tasks, epoch, MULTITASK_LABEL)?;
        observer.epoch_finished(epoch, &student, &rows)?;
        report.records.extend(rows);
    }
    observer.task_finished(0, MULTITASK_LABEL, &student)?;
    Ok(finish(report, log))
}

/// Distillation stream: each task's new samples use `kind` against a fresh
/// single-task teacher; replayed pseudo-samples use NLL.
pub fn run_l2kd_stream(
    tasks: &[TaskDataset],
    vocab: &Vocabulary,
    config: &StreamConfig,
    kind: DistillKind,
    teachers: &mut dyn TeacherProvider,
) -> Result<RunReport, LifelongError> {
    let method = match kind {
        DistillKind::WordKd => Method::L2kdWord,
        DistillKind::SeqKd => Method::L2kdSeq,
        DistillKind::SeqKdSoft => Method::L2kdSeqSoft,
        DistillKind::Nll => return Err(LifelongError::InvalidConfig("distillation stream needs a KD loss kind".into())),
    };
    run_method(method, tasks, vocab, config, teachers, &mut NoObserver)
}

/// Pseudo-replay baseline: NLL on new samples, no teachers.
pub fn run_lamol_stream(tasks: &[TaskDataset], vocab: &Vocabulary, config: &StreamConfig) -> Result<RunReport, LifelongError> {
    run_method(Method::Lamol, tasks, vocab, config, &mut NoTeachers, &mut NoObserver)
}

/// Sequential NLL training without replay.
pub fn run_finetune_stream(tasks: &[TaskDataset], vocab: &Vocabulary, config: &StreamConfig) -> Result<RunReport, LifelongError> {
    run_method(Method::Finetune, tasks, vocab, config, &mut NoTeachers, &mut NoObserver)
}

/// Joint training on the union of all tasks for `epochs_per_task * |tasks|` epochs.
pub fn run_multitask(
    tasks: &[TaskDataset],
    vocab: &Vocabulary,
    config: &StreamConfig,
    with_seq_kd: bool,
    teachers: &mut dyn TeacherProvider,
) -> Result<RunReport, LifelongError> {
    let method = if with_seq_kd { Method::MultitaskSeqKd } else { Method::Multitask };
    run_method(method, tasks, vocab, config, teachers, &mut NoObserver)
}

struct NoTeachers;

impl TeacherProvider for NoTeachers {
    fn teacher(&mut self, task: &TaskDataset, _: &Vocabulary, _: &StreamConfig) -> Result<Arc<Teacher>, LifelongError> {
        Err(LifelongError::InvalidConfig(format!("no teacher available for task {}", task.task_id())))
    }
}
