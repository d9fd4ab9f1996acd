use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::model::{greedy_decode, LogitsModel};
use crate::taskdata::{Metric, Sample, TaskDataset, Vocabulary};

fn strip_eos(seq: &[usize], eos: usize) -> &[usize] {
    match seq.iter().position(|&t| t == eos) {
        Some(i) => &seq[..i],
        None => seq,
    }
}

/// 1 when the sequences agree up to the first end-of-sequence token, else 0.
pub fn exact_match(prediction: &[usize], gold: &[usize], eos: usize) -> u8 {
    u8::from(strip_eos(prediction, eos) == strip_eos(gold, eos))
}

/// Token-multiset F1 in `[0, 100]`. Both empty scores 100, one empty 0.
pub fn token_f1(prediction: &[usize], gold: &[usize]) -> f64 {
    match (prediction.is_empty(), gold.is_empty()) {
        (true, true) => return 100.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for &g in gold {
        *counts.entry(g).or_default() += 1;
    }
    let mut common = 0usize;
    for &p in prediction {
        if let Some(c) = counts.get_mut(&p) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / prediction.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    100.0 * 2.0 * precision * recall / (precision + recall)
}

/// One per-epoch evaluation row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    /// 1-based global epoch.
    pub epoch: usize,
    pub training_task: String,
    pub eval_task: String,
    pub metric: String,
    pub value: f64,
}

/// Scores of one model on one task's test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task_id: String,
    pub metric: Metric,
    /// Configured metric, `[0, 100]`.
    pub value: f64,
    pub exact_match: f64,
    pub token_f1: f64,
    /// Per-sample exact-match outcome in test-set order.
    pub correct: Vec<bool>,
}

/// Greedy answer for a sample, decoded from its answer-separator prefix.
pub fn predict_answer<M: LogitsModel + ?Sized>(model: &M, vocab: &Vocabulary, sample: &Sample) -> Result<Vec<usize>, EvalError> {
    let prefix = sample.answer_prefix();
    let budget = model.context_len().saturating_sub(prefix.len());
    Ok(greedy_decode(model, prefix, vocab.eos(), budget)?.tokens)
}

/// Scores `model` on `samples` using `metric`.
pub fn score_samples<M: LogitsModel + ?Sized>(
    model: &M,
    vocab: &Vocabulary,
    task_id: &str,
    metric: Metric,
    samples: &[Sample],
) -> Result<TaskScore, EvalError> {
    if model.vocab_size() != vocab.len() {
        return Err(EvalError::VocabMismatch { model: model.vocab_size(), vocab: vocab.len() });
    }
    if samples.is_empty() {
        return Err(EvalError::EmptyTestSet(task_id.to_string()));
    }
    let mut correct = Vec::with_capacity(samples.len());
    let mut f1 = 0.0;
    for s in samples {
        let pred = predict_answer(model, vocab, s)?;
        correct.push(exact_match(&pred, &s.answer, vocab.eos()) == 1);
        f1 += token_f1(&pred, &s.answer);
    }
    let n = samples.len() as f64;
    let em = 100.0 * correct.iter().filter(|&&c| c).count() as f64 / n;
    let f1 = f1 / n;
    let value = match metric {
        Metric::ExactMatch => em,
        Metric::TokenF1 => f1,
    };
    Ok(TaskScore { task_id: task_id.to_string(), metric, value, exact_match: em, token_f1: f1, correct })
}

/// Greedy-decodes every test answer and aggregates the task's metric.
pub fn evaluate_task<M: LogitsModel + ?Sized>(model: &M, vocab: &Vocabulary, task: &TaskDataset) -> Result<TaskScore, EvalError> {
    score_samples(model, vocab, task.task_id(), task.spec.metric, &task.test)
}
