//! Training objectives: NLL, word-level KD, sequence-level KD (hard and soft),
//! each parameterized by the position `t0` where the summed loss starts.
//!
//! Every loss is a weighted cross-entropy over the rows of one student forward
//! pass on `encoded[..T-1]`; row `r` predicts token `r + 1`. Position 0 (the
//! task begin token) has no prefix and is never a target, so `t0 = 0` and
//! `t0 = 1` coincide.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::model::{greedy_decode, log_probs_with_temperature, LanguageModel, LogitsModel, ModelError};
use crate::taskdata::{DataError, Sample, Vocabulary};

#[derive(Debug, thiserror::Error)]
pub enum DistillError {
    #[error("loss offset t0={t0} outside a sequence of length {len}")]
    OffsetOutOfRange { t0: usize, len: usize },
    #[error("teacher decode for task {task_id} hit the length budget without end-of-sequence")]
    TruncatedDecode { task_id: String },
    #[error("temperature must be > 0, got {0}")]
    InvalidTemperature(f64),
    #[error("teacher vocabulary {teacher} differs from student vocabulary {student}")]
    VocabMismatch { student: usize, teacher: usize },
    #[error("teacher distribution has {got} values, expected {expected}")]
    DistributionShape { expected: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl From<crate::autodiff::AutodiffError> for DistillError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        DistillError::Model(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillKind {
    Nll,
    WordKd,
    SeqKdSoft,
    SeqKd,
}

impl DistillKind {
    pub fn needs_teacher(&self) -> bool {
        !matches!(self, DistillKind::Nll)
    }

    /// True for the kinds trained on teacher-decoded answers.
    pub fn uses_decode(&self) -> bool {
        matches!(self, DistillKind::SeqKd | DistillKind::SeqKdSoft)
    }

    pub fn name(&self) -> &'static str {
        match self {
            DistillKind::Nll => "nll",
            DistillKind::WordKd => "word_kd",
            DistillKind::SeqKdSoft => "seq_kd_soft",
            DistillKind::SeqKd => "seq_kd",
        }
    }
}

/// Loss family plus temperature (used by the soft kinds only).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossKind {
    pub kind: DistillKind,
    pub temperature: f64,
}

impl LossKind {
    pub const DEFAULT_TEMPERATURE: f64 = 2.0;

    pub fn new(kind: DistillKind, temperature: f64) -> Result<Self, DistillError> {
        check_tau(temperature)?;
        Ok(Self { kind, temperature })
    }

    pub fn nll() -> Self {
        Self { kind: DistillKind::Nll, temperature: 1.0 }
    }
}

fn check_tau(tau: f64) -> Result<(), DistillError> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(DistillError::InvalidTemperature(tau))
    }
}

fn check_offset(sample: &Sample, t0: usize) -> Result<(), DistillError> {
    if t0 >= sample.len() {
        return Err(DistillError::OffsetOutOfRange { t0, len: sample.len() });
    }
    Ok(())
}

/// Student inputs: every token except the last.
pub fn loss_inputs(sample: &Sample) -> &[usize] {
    &sample.encoded[..sample.len() - 1]
}

/// Row weights for `sum_{t >= t0}` over target positions `1..T`.
fn offset_weights(sample: &Sample, t0: usize) -> Vec<f64> {
    (1..sample.len()).map(|t| if t >= t0 { 1.0 } else { 0.0 }).collect()
}

/// Row weights for `L^QA + lm_weight * L^LM` in a single pass.
pub fn qa_lm_weights(sample: &Sample, lm_weight: f64) -> Vec<f64> {
    (1..sample.len()).map(|t| lm_weight + if t >= sample.a1 { 1.0 } else { 0.0 }).collect()
}

enum Targets<'a> {
    Hard(&'a [usize]),
    /// Row-major `rows x V` probabilities.
    Soft(&'a [f64]),
}

/// `-sum_r w_r sum_k target_{r,k} log softmax(logits_r / tau)_k`.
fn cross_entropy(tape: &mut Tape, logits: Var, targets: Targets<'_>, weights: &[f64], tau: f64) -> Result<Var, DistillError> {
    let shape = tape.shape(logits).to_vec();
    let (rows, vocab) = (shape[0], shape[1]);
    debug_assert_eq!(rows, weights.len());
    let mut mask = vec![0.0; rows * vocab];
    match targets {
        Targets::Hard(next) => {
            for (r, (&w, &tok)) in weights.iter().zip(next).enumerate() {
                mask[r * vocab + tok] = w;
            }
        }
        Targets::Soft(probs) => {
            if probs.len() != rows * vocab {
                return Err(DistillError::DistributionShape { expected: rows * vocab, got: probs.len() });
            }
            for (r, &w) in weights.iter().enumerate() {
                if w != 0.0 {
                    for k in 0..vocab {
                        mask[r * vocab + k] = w * probs[r * vocab + k];
                    }
                }
            }
        }
    }
    let scaled = if tau == 1.0 { logits } else { tape.scale(logits, 1.0 / tau)? };
    let logp = tape.log_softmax(scaled)?;
    let mask = tape.constant(shape, mask)?;
    let picked = tape.mul(mask, logp)?;
    let total = tape.reduce_sum(picked)?;
    Ok(tape.scale(total, -1.0)?)
}

/// Records the student forward pass for `sample`; returns `(T-1) x V` logits.
pub fn student_logits(student: &LanguageModel, tape: &mut Tape, binding: &[Var], sample: &Sample) -> Result<Var, DistillError> {
    Ok(student.forward(tape, binding, loss_inputs(sample))?)
}

/// Hard-target loss on precomputed student logits with explicit row weights.
pub fn weighted_nll(tape: &mut Tape, logits: Var, sample: &Sample, weights: &[f64]) -> Result<Var, DistillError> {
    cross_entropy(tape, logits, Targets::Hard(&sample.encoded[1..]), weights, 1.0)
}

/// Soft-target loss on precomputed student logits with explicit row weights.
pub fn weighted_soft(tape: &mut Tape, logits: Var, teacher_probs: &[f64], weights: &[f64], tau: f64) -> Result<Var, DistillError> {
    check_tau(tau)?;
    cross_entropy(tape, logits, Targets::Soft(teacher_probs), weights, tau)
}

/// Teacher next-token distributions at temperature `tau` along `sample`'s
/// prefixes, row-major `(T-1) x V`. Computed outside any tape.
pub fn teacher_distribution<T: LogitsModel + ?Sized>(teacher: &T, sample: &Sample, tau: f64) -> Result<Vec<f64>, DistillError> {
    check_tau(tau)?;
    let logits = teacher.logits(loss_inputs(sample))?;
    let vocab = logits.cols();
    let mut out = Vec::with_capacity(logits.numel());
    for r in 0..logits.rows() {
        let lp = log_probs_with_temperature(logits.row(r), tau)?;
        out.extend(lp.into_iter().map(f64::exp));
    }
    debug_assert_eq!(out.len(), (sample.len() - 1) * vocab);
    Ok(out)
}

fn check_vocab<T: LogitsModel + ?Sized>(student: &LanguageModel, teacher: &T) -> Result<(), DistillError> {
    if student.vocab_size() != teacher.vocab_size() {
        return Err(DistillError::VocabMismatch { student: student.vocab_size(), teacher: teacher.vocab_size() });
    }
    Ok(())
}

/// `sum_{t=t0}^{T-1} -log P(x_t | x_<t)`.
pub fn nll_loss(student: &LanguageModel, tape: &mut Tape, binding: &[Var], sample: &Sample, t0: usize) -> Result<Var, DistillError> {
    check_offset(sample, t0)?;
    let logits = student_logits(student, tape, binding, sample)?;
    weighted_nll(tape, logits, sample, &offset_weights(sample, t0))
}

/// Cross-entropy from teacher to student next-token distributions along the gold prefix.
#[allow(clippy::too_many_arguments)]
pub fn word_kd_loss<T: LogitsModel + ?Sized>(
    student: &LanguageModel,
    tape: &mut Tape,
    binding: &[Var],
    teacher: &T,
    sample: &Sample,
    t0: usize,
    tau: f64,
) -> Result<Var, DistillError> {
    check_offset(sample, t0)?;
    check_vocab(student, teacher)?;
    let probs = teacher_distribution(teacher, sample, tau)?;
    let logits = student_logits(student, tape, binding, sample)?;
    weighted_soft(tape, logits, &probs, &offset_weights(sample, t0), tau)
}

/// A sample whose answer was replaced by the teacher's greedy decode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedSample {
    pub sample: Sample,
    /// Decode ran out of room before end-of-sequence; excluded from training.
    pub truncated: bool,
}

/// Greedy-decodes the teacher's answer from the prefix ending at the answer separator.
pub fn teacher_decode_answer<T: LogitsModel + ?Sized>(teacher: &T, vocab: &Vocabulary, sample: &Sample) -> Result<DecodedSample, DistillError> {
    let prefix = sample.answer_prefix();
    // Leave room for the end-of-sequence token.
    let budget = teacher.context_len().saturating_sub(prefix.len() + 1);
    let decoded = greedy_decode(teacher, prefix, vocab.eos(), budget)?;
    let xhat = sample.with_answer(vocab, decoded.tokens)?;
    Ok(DecodedSample { sample: xhat, truncated: decoded.truncated })
}

fn untruncated(xhat: &DecodedSample) -> Result<&Sample, DistillError> {
    if xhat.truncated {
        return Err(DistillError::TruncatedDecode { task_id: xhat.sample.task_id.clone() });
    }
    Ok(&xhat.sample)
}

/// Hard NLL on the teacher's decoded sequence.
pub fn seq_kd_loss(student: &LanguageModel, tape: &mut Tape, binding: &[Var], xhat: &DecodedSample, t0: usize) -> Result<Var, DistillError> {
    nll_loss(student, tape, binding, untruncated(xhat)?, t0)
}

/// Word-level KD along the teacher's decoded prefix.
#[allow(clippy::too_many_arguments)]
pub fn seq_kd_soft_loss<T: LogitsModel + ?Sized>(
    student: &LanguageModel,
    tape: &mut Tape,
    binding: &[Var],
    teacher: &T,
    xhat: &DecodedSample,
    t0: usize,
    tau: f64,
) -> Result<Var, DistillError> {
    word_kd_loss(student, tape, binding, teacher, untruncated(xhat)?, t0, tau)
}

/// What the new-task objective trains on for one sample: the (possibly
/// teacher-rewritten) sequence plus soft targets when the kind needs them.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub sample: Sample,
    pub teacher_probs: Option<Vec<f64>>,
}

/// Applies the teacher side of `loss` to `sample`. Returns `None` when the
/// teacher decode was truncated.
pub fn prepare_new_sample<T: LogitsModel + ?Sized>(
    teacher: Option<&T>,
    vocab: &Vocabulary,
    sample: &Sample,
    loss: LossKind,
) -> Result<Option<PreparedSample>, DistillError> {
    let teacher = match (loss.kind, teacher) {
        (DistillKind::Nll, _) => return Ok(Some(PreparedSample { sample: sample.clone(), teacher_probs: None })),
        (_, Some(t)) => t,
        (_, None) => {
            return Err(DistillError::Model(ModelError::InvalidConfig(format!("{} needs a teacher", loss.kind.name()))))
        }
    };
    let target = if loss.kind.uses_decode() {
        let xhat = teacher_decode_answer(teacher, vocab, sample)?;
        if xhat.truncated {
            return Ok(None);
        }
        xhat.sample
    } else {
        sample.clone()
    };
    let teacher_probs = match loss.kind {
        DistillKind::WordKd | DistillKind::SeqKdSoft => Some(teacher_distribution(teacher, &target, loss.temperature)?),
        _ => None,
    };
    Ok(Some(PreparedSample { sample: target, teacher_probs }))
}

/// `L^QA + lm_weight * L^LM` for a prepared sample in one student pass.
pub fn prepared_loss(
    student: &LanguageModel,
    tape: &mut Tape,
    binding: &[Var],
    prepared: &PreparedSample,
    loss: LossKind,
    lm_weight: f64,
) -> Result<Var, DistillError> {
    let sample = &prepared.sample;
    let logits = student_logits(student, tape, binding, sample)?;
    let weights = qa_lm_weights(sample, lm_weight);
    match &prepared.teacher_probs {
        Some(p) => weighted_soft(tape, logits, p, &weights, loss.temperature),
        None => weighted_nll(tape, logits, sample, &weights),
    }
}

/// New-task objective `L^QA + L^LM` under `loss` (NLL, or one of the KD kinds).
/// Errors if the teacher decode is truncated.
pub fn new_task_loss<T: LogitsModel + ?Sized>(
    student: &LanguageModel,
    tape: &mut Tape,
    binding: &[Var],
    teacher: Option<&T>,
    vocab: &Vocabulary,
    sample: &Sample,
    loss: LossKind,
) -> Result<Var, DistillError> {
    check_tau(loss.temperature)?;
    if let Some(t) = teacher {
        check_vocab(student, t)?;
    }
    let prepared = prepare_new_sample(teacher, vocab, sample, loss)?
        .ok_or_else(|| DistillError::TruncatedDecode { task_id: sample.task_id.clone() })?;
    prepared_loss(student, tape, binding, &prepared, loss, 1.0)
}

/// Replay objective for a pseudo-sample: `L^QA + L^LM`, NLL only.
pub fn prev_task_loss(student: &LanguageModel, tape: &mut Tape, binding: &[Var], pseudo: &Sample) -> Result<Var, DistillError> {
    let logits = student_logits(student, tape, binding, pseudo)?;
    weighted_nll(tape, logits, pseudo, &qa_lm_weights(pseudo, 1.0))
}

/// Logit used for excluded tokens by [`OneHotTeacher`]; `exp` of it underflows to exactly 0.
const ONE_HOT_OFF: f64 = -1e30;

/// Reference teacher that puts all mass on the gold continuation of known
/// sequences. Prefixes it has not seen predict end-of-sequence.
#[derive(Debug, Clone)]
pub struct OneHotTeacher {
    sequences: Vec<Vec<usize>>,
    vocab_size: usize,
    context_len: usize,
    fallback: usize,
}

impl OneHotTeacher {
    pub fn new(samples: &[Sample], vocab: &Vocabulary, context_len: usize) -> Self {
        Self {
            sequences: samples.iter().map(|s| s.encoded.clone()).collect(),
            vocab_size: vocab.len(),
            context_len,
            fallback: vocab.eos(),
        }
    }
}

impl LogitsModel for OneHotTeacher {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn context_len(&self) -> usize {
        self.context_len
    }

    fn logits(&self, tokens: &[usize]) -> Result<crate::autodiff::Tensor, ModelError> {
        let gold = self.sequences.iter().find(|s| s.len() > tokens.len() && s.starts_with(tokens));
        let mut data = vec![ONE_HOT_OFF; tokens.len() * self.vocab_size];
        for r in 0..tokens.len() {
            let next = gold.map_or(self.fallback, |s| s[r + 1]);
            data[r * self.vocab_size + next] = 0.0;
        }
        Ok(crate::autodiff::Tensor::new(vec![tokens.len(), self.vocab_size], data)?)
    }
}
