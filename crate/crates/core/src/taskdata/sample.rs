use std::fmt;

use serde::{Deserialize, Serialize};

use super::{DataError, Vocabulary};

/// One task instance encoded as a single LM sequence:
/// `[BOS_task] ++ context ++ question ++ [ANS] ++ answer ++ [EOS]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sample {
    pub task_id: String,
    pub context: Vec<usize>,
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
    pub encoded: Vec<usize>,
    /// Index of the first answer token (one past ANS).
    pub a1: usize,
}

/// Human-readable form used for JSON-lines dumps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub task_id: String,
    pub context: String,
    pub question: String,
    pub answer: String,
}

impl Sample {
    /// Assembles a sample from token ids. `context_len` bounds the encoded length when given.
    pub fn from_parts(
        vocab: &Vocabulary,
        task_id: &str,
        context: Vec<usize>,
        question: Vec<usize>,
        answer: Vec<usize>,
        context_len: Option<usize>,
    ) -> Result<Self, DataError> {
        let bos = vocab.bos(task_id)?;
        let mut encoded = Vec::with_capacity(context.len() + question.len() + answer.len() + 3);
        encoded.push(bos);
        encoded.extend_from_slice(&context);
        encoded.extend_from_slice(&question);
        encoded.push(vocab.ans());
        let a1 = encoded.len();
        encoded.extend_from_slice(&answer);
        encoded.push(vocab.eos());
        if let Some(limit) = context_len {
            if encoded.len() > limit {
                return Err(DataError::Overflow {
                    task_id: task_id.to_string(),
                    context: context.len(),
                    question: question.len(),
                    answer: answer.len(),
                    total: encoded.len(),
                    limit,
                });
            }
        }
        Ok(Self { task_id: task_id.to_string(), context, question, answer, encoded, a1 })
    }

    /// Total encoded length `T`.
    pub fn len(&self) -> usize {
        self.encoded.len()
    }

    pub fn is_empty(&self) -> bool {
        self.encoded.is_empty()
    }

    /// `encoded[..a1]`: everything up to and including ANS.
    pub fn answer_prefix(&self) -> &[usize] {
        &self.encoded[..self.a1]
    }

    /// Same context and question with a different answer.
    pub fn with_answer(&self, vocab: &Vocabulary, answer: Vec<usize>) -> Result<Self, DataError> {
        Self::from_parts(vocab, &self.task_id, self.context.clone(), self.question.clone(), answer, None)
    }

    pub fn to_record(&self, vocab: &Vocabulary) -> SampleRecord {
        SampleRecord {
            task_id: self.task_id.clone(),
            context: vocab.detokenize(&self.context),
            question: vocab.detokenize(&self.question),
            answer: vocab.detokenize(&self.answer),
        }
    }
}

/// Tokenizes the three parts and builds the encoded sequence.
pub fn encode_sample(
    vocab: &Vocabulary,
    task_id: &str,
    context: &str,
    question: &str,
    answer: &str,
    context_len: usize,
) -> Result<Sample, DataError> {
    Sample::from_parts(
        vocab,
        task_id,
        vocab.tokenize(context)?,
        vocab.tokenize(question)?,
        vocab.tokenize(answer)?,
        Some(context_len),
    )
}

/// Single-token prompt used to sample pseudo-data for `task_id`.
pub fn make_lm_prefix(vocab: &Vocabulary, task_id: &str) -> Result<Vec<usize>, DataError> {
    Ok(vec![vocab.bos(task_id)?])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RejectReason {
    NoTaskToken,
    MissingEos,
    EarlyEos,
    NoAnswerSeparator,
    MultipleAnswerSeparators,
    SpecialTokenInBody,
    EmptyAnswer,
    QuestionMismatch,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RejectReason::NoTaskToken => "does not start with a task token",
            RejectReason::MissingEos => "not terminated by end-of-sequence",
            RejectReason::EarlyEos => "end-of-sequence before the end",
            RejectReason::NoAnswerSeparator => "no answer separator",
            RejectReason::MultipleAnswerSeparators => "more than one answer separator",
            RejectReason::SpecialTokenInBody => "special token inside the body",
            RejectReason::EmptyAnswer => "empty answer",
            RejectReason::QuestionMismatch => "question does not match the task",
        };
        f.write_str(s)
    }
}

/// Validates a full generated sequence (`BOS .. EOS`) and rebuilds the sample.
pub fn parse_pseudo(vocab: &Vocabulary, generated: &[usize]) -> Result<Sample, RejectReason> {
    let (&first, rest) = generated.split_first().ok_or(RejectReason::NoTaskToken)?;
    let task_id = vocab.task_of_bos(first).ok_or(RejectReason::NoTaskToken)?;
    let (&last, body) = rest.split_last().ok_or(RejectReason::MissingEos)?;
    if last != vocab.eos() {
        return Err(RejectReason::MissingEos);
    }
    if body.contains(&vocab.eos()) {
        return Err(RejectReason::EarlyEos);
    }
    let mut ans_positions = body.iter().enumerate().filter(|(_, &t)| t == vocab.ans()).map(|(i, _)| i);
    let ans_pos = ans_positions.next().ok_or(RejectReason::NoAnswerSeparator)?;
    if ans_positions.next().is_some() {
        return Err(RejectReason::MultipleAnswerSeparators);
    }
    if body.iter().enumerate().any(|(i, &t)| i != ans_pos && vocab.is_special(t)) {
        return Err(RejectReason::SpecialTokenInBody);
    }
    let (before, after) = (&body[..ans_pos], &body[ans_pos + 1..]);
    if after.is_empty() {
        return Err(RejectReason::EmptyAnswer);
    }
    let question = vocab.question(task_id).map_err(|_| RejectReason::NoTaskToken)?;
    if !before.ends_with(question) {
        return Err(RejectReason::QuestionMismatch);
    }
    let context = before[..before.len() - question.len()].to_vec();
    Sample::from_parts(vocab, task_id, context, question.to_vec(), after.to_vec(), None)
        .map_err(|_| RejectReason::NoTaskToken)
}
