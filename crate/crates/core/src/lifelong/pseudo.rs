use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::{top_k_sample, LogitsModel, ModelError};
use crate::taskdata::{make_lm_prefix, parse_pseudo, Sample, Vocabulary};

/// `floor(gamma * n)`, tolerant of representation error in `gamma`.
pub fn pseudo_count(gamma: f64, n: usize) -> usize {
    (gamma * n as f64 + 1e-9).floor() as usize
}

/// Splits `count` as evenly as possible over `parts`; earlier parts take the remainder.
pub fn apportion(count: usize, parts: usize) -> Vec<usize> {
    if parts == 0 {
        return Vec::new();
    }
    (0..parts).map(|i| count / parts + usize::from(i < count % parts)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoTaskStats {
    pub task_id: String,
    pub requested: usize,
    pub accepted: usize,
    pub attempts: usize,
    /// Rejection reason -> count.
    pub rejected: BTreeMap<String, usize>,
}

/// Replay set for previous tasks (`D_prev`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoDataset {
    /// Task being learned when this set was sampled.
    pub for_task: String,
    pub requested: usize,
    pub per_task: Vec<PseudoTaskStats>,
    #[serde(skip)]
    pub samples: Vec<Sample>,
}

impl PseudoDataset {
    pub fn accepted(&self) -> usize {
        self.samples.len()
    }

    /// True when some task fell short of its quota after the retry cap.
    pub fn shortfall(&self) -> usize {
        self.per_task.iter().map(|t| t.requested - t.accepted).sum()
    }
}

/// Samples `count` pseudo-samples from `student`, split uniformly over
/// `prev_tasks`. Each task gets at most `retry_factor` attempts per requested
/// sample; unmet quotas are reported, not raised.
#[allow(clippy::too_many_arguments)]
pub fn sample_pseudo_data<M: LogitsModel + ?Sized, R: Rng + ?Sized>(
    student: &M,
    vocab: &Vocabulary,
    for_task: &str,
    prev_tasks: &[&str],
    count: usize,
    top_k: usize,
    retry_factor: usize,
    rng: &mut R,
) -> Result<PseudoDataset, ModelError> {
    let quotas = apportion(count, prev_tasks.len());
    let k = top_k.min(student.vocab_size());
    let mut samples = Vec::with_capacity(count);
    let mut per_task = Vec::with_capacity(prev_tasks.len());
    for (&task, &quota) in prev_tasks.iter().zip(&quotas) {
        let prefix = make_lm_prefix(vocab, task).map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        let mut stats = PseudoTaskStats { task_id: task.to_string(), requested: quota, accepted: 0, attempts: 0, rejected: BTreeMap::new() };
        while stats.accepted < quota && stats.attempts < quota * retry_factor {
            stats.attempts += 1;
            let decoded = top_k_sample(student, &prefix, k, rng, vocab.eos(), student.context_len())?;
            let mut seq = prefix.clone();
            seq.extend_from_slice(&decoded.tokens);
            if decoded.truncated {
                *stats.rejected.entry("truncated".to_string()).or_default() += 1;
                continue;
            }
            seq.push(vocab.eos());
            match parse_pseudo(vocab, &seq) {
                Ok(s) => {
                    stats.accepted += 1;
                    samples.push(s);
                }
                Err(reason) => *stats.rejected.entry(reason.to_string()).or_default() += 1,
            }
        }
        per_task.push(stats);
    }
    Ok(PseudoDataset { for_task: for_task.to_string(), requested: count, per_task, samples })
}
