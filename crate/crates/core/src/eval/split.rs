use serde::{Deserialize, Serialize};

use super::{evaluate_task, EvalError};
use crate::model::LogitsModel;
use crate::taskdata::{TaskDataset, Vocabulary};

/// Student exact-match accuracy overall and on the test questions the teacher
/// got right (group A) or wrong (group B). Empty groups are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAnalysis {
    pub task_id: String,
    pub n: usize,
    pub n_a: usize,
    pub n_b: usize,
    pub acc: f64,
    pub acc_a: Option<f64>,
    pub acc_b: Option<f64>,
}

impl SplitAnalysis {
    /// `|A|/N * acc_A + |B|/N * acc_B`.
    pub fn weighted_mean(&self) -> f64 {
        let n = self.n as f64;
        self.n_a as f64 / n * self.acc_a.unwrap_or(0.0) + self.n_b as f64 / n * self.acc_b.unwrap_or(0.0)
    }
}

fn group_acc(hits: impl Iterator<Item = bool>) -> (usize, Option<f64>) {
    let (mut n, mut ok) = (0usize, 0usize);
    for h in hits {
        n += 1;
        ok += usize::from(h);
    }
    (n, (n > 0).then(|| 100.0 * ok as f64 / n as f64))
}

pub fn teacher_split_analysis<S, T>(student: &S, teacher: &T, vocab: &Vocabulary, task: &TaskDataset) -> Result<SplitAnalysis, EvalError>
where
    S: LogitsModel + ?Sized,
    T: LogitsModel + ?Sized,
{
    let teacher_hits = evaluate_task(teacher, vocab, task)?.correct;
    let student_score = evaluate_task(student, vocab, task)?;
    let pairs: Vec<(bool, bool)> = teacher_hits.iter().copied().zip(student_score.correct.iter().copied()).collect();
    let (n_a, acc_a) = group_acc(pairs.iter().filter(|p| p.0).map(|p| p.1));
    let (n_b, acc_b) = group_acc(pairs.iter().filter(|p| !p.0).map(|p| p.1));
    Ok(SplitAnalysis {
        task_id: task.task_id().to_string(),
        n: pairs.len(),
        n_a,
        n_b,
        acc: student_score.exact_match,
        acc_a,
        acc_b,
    })
}
