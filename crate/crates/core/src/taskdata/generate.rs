//! Deterministic synthetic task generators.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize};

use super::{DataError, Sample, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    /// answer = context
    Copy,
    /// answer = context reversed
    Reverse,
    /// answer = context sorted by alphabet position
    Sort,
    /// answer = alphabet[(sum of positions) mod |alphabet|]
    AddMod,
    /// context = distinct (slot, value) pairs, answer = values in slot order
    SlotFill,
    /// answer = `pos` if first-half symbols outnumber second-half ones, else `neg`
    Classify,
}

/// Evaluation metric attached to a task.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    ExactMatch,
    TokenF1,
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::ExactMatch => "exact_match",
            Metric::TokenF1 => "token_f1",
        }
    }
}

const CLASS_LABELS: [&str; 2] = ["pos", "neg"];

fn alphabet_from_any<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<String>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Any {
        Text(String),
        List(Vec<String>),
    }
    Ok(match Any::deserialize(d)? {
        Any::Text(s) => s.split_whitespace().map(str::to_string).collect(),
        Any::List(v) => v,
    })
}

fn default_min_len() -> usize {
    2
}
fn default_max_len() -> usize {
    4
}
fn default_n_train() -> usize {
    200
}
fn default_n_test() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task_id: String,
    pub kind: GeneratorKind,
    /// Content symbols; accepts a whitespace-separated string or a list.
    #[serde(deserialize_with = "alphabet_from_any")]
    pub alphabet: Vec<String>,
    #[serde(default = "default_min_len")]
    pub min_len: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default)]
    pub seed: u64,
    /// Question text; defaults to a per-kind keyword.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default)]
    pub metric: Metric,
}

impl TaskSpec {
    pub fn new(task_id: &str, kind: GeneratorKind, alphabet: &str) -> Self {
        Self {
            task_id: task_id.to_string(),
            kind,
            alphabet: alphabet.split_whitespace().map(str::to_string).collect(),
            min_len: default_min_len(),
            max_len: default_max_len(),
            n_train: default_n_train(),
            n_test: default_n_test(),
            seed: 0,
            question: None,
            metric: Metric::ExactMatch,
        }
    }

    pub fn question_text(&self) -> String {
        self.question.clone().unwrap_or_else(|| {
            match self.kind {
                GeneratorKind::Copy => "copy",
                GeneratorKind::Reverse => "rev",
                GeneratorKind::Sort => "sort",
                GeneratorKind::AddMod => "sum",
                GeneratorKind::SlotFill => "slots",
                GeneratorKind::Classify => "label",
            }
            .to_string()
        })
    }

    /// Every content token this task can emit.
    pub fn content_tokens(&self) -> Vec<String> {
        let mut out = self.alphabet.clone();
        out.extend(self.question_text().split_whitespace().map(str::to_string));
        if self.kind == GeneratorKind::Classify {
            out.extend(CLASS_LABELS.iter().map(|s| s.to_string()));
        }
        out
    }

    fn slots(&self) -> usize {
        self.alphabet.len() / 2
    }

    /// Longest possible encoded sequence for this task.
    pub fn max_encoded_len(&self) -> usize {
        let q = self.question_text().split_whitespace().count();
        let (ctx, ans) = match self.kind {
            GeneratorKind::Copy | GeneratorKind::Reverse | GeneratorKind::Sort => (self.max_len, self.max_len),
            GeneratorKind::AddMod | GeneratorKind::Classify => (self.max_len, 1),
            GeneratorKind::SlotFill => (2 * self.max_len, self.max_len),
        };
        ctx + q + ans + 3
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let invalid = |reason: &str| Err(DataError::InvalidSpec { task_id: self.task_id.clone(), reason: reason.into() });
        if self.task_id.is_empty() || self.task_id.contains(char::is_whitespace) {
            return invalid("task_id must be a non-empty word");
        }
        if self.n_train == 0 || self.n_test == 0 {
            return invalid("n_train and n_test must be positive");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return invalid("need 1 <= min_len <= max_len");
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = self.alphabet.iter().find(|a| !seen.insert(a.as_str())) {
            return invalid(&format!("duplicate alphabet symbol {dup:?}"));
        }
        if self.question_text().split_whitespace().next().is_none() {
            return invalid("question must not be empty");
        }
        let needed = match self.kind {
            GeneratorKind::Copy | GeneratorKind::Reverse | GeneratorKind::Sort => 1,
            GeneratorKind::AddMod | GeneratorKind::Classify => 2,
            GeneratorKind::SlotFill => 2 * self.max_len,
        };
        if self.alphabet.len() < needed {
            return Err(DataError::AlphabetTooSmall {
                task_id: self.task_id.clone(),
                needed,
                got: self.alphabet.len(),
            });
        }
        Ok(())
    }

    fn position(&self, sym: &str) -> Result<usize, DataError> {
        self.alphabet.iter().position(|a| a == sym).ok_or_else(|| DataError::UnknownToken(sym.to_string()))
    }

    /// The exact answer this task defines for `context`.
    pub fn solve(&self, context: &[&str]) -> Result<Vec<String>, DataError> {
        let owned = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        Ok(match self.kind {
            GeneratorKind::Copy => owned(context),
            GeneratorKind::Reverse => context.iter().rev().map(|s| s.to_string()).collect(),
            GeneratorKind::Sort => {
                let mut idx = context.iter().map(|s| self.position(s)).collect::<Result<Vec<_>, _>>()?;
                idx.sort_unstable();
                idx.into_iter().map(|i| self.alphabet[i].clone()).collect()
            }
            GeneratorKind::AddMod => {
                let sum = context.iter().map(|s| self.position(s)).sum::<Result<usize, _>>()?;
                vec![self.alphabet[sum % self.alphabet.len()].clone()]
            }
            GeneratorKind::SlotFill => {
                if context.len() % 2 != 0 {
                    return Err(DataError::InvalidSpec {
                        task_id: self.task_id.clone(),
                        reason: "slot_fill context must be slot/value pairs".into(),
                    });
                }
                let mut pairs = context
                    .chunks(2)
                    .map(|p| Ok((self.position(p[0])?, p[1].to_string())))
                    .collect::<Result<Vec<_>, DataError>>()?;
                pairs.sort_by_key(|p| p.0);
                pairs.into_iter().map(|p| p.1).collect()
            }
            GeneratorKind::Classify => {
                let half = self.alphabet.len() / 2;
                let mut low = 0i64;
                for s in context {
                    low += if self.position(s)? < half { 1 } else { -1 };
                }
                let first_low = context.first().map(|s| self.position(s)).transpose()?.is_some_and(|p| p < half);
                let label = if low > 0 || (low == 0 && first_low) { CLASS_LABELS[0] } else { CLASS_LABELS[1] };
                vec![label.to_string()]
            }
        })
    }

    /// Context symbols for sample `index`; a pure function of `(seed, index)`.
    pub fn draw_context(&self, index: u64) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, index));
        let len = rng.random_range(self.min_len..=self.max_len);
        match self.kind {
            GeneratorKind::SlotFill => {
                let n = self.slots();
                let mut slots: Vec<usize> = (0..n).collect();
                slots.shuffle(&mut rng);
                let mut out = Vec::with_capacity(2 * len);
                for &s in &slots[..len] {
                    out.push(self.alphabet[s].clone());
                    out.push(self.alphabet[n + rng.random_range(0..self.alphabet.len() - n)].clone());
                }
                out
            }
            _ => (0..len).map(|_| self.alphabet[rng.random_range(0..self.alphabet.len())].clone()).collect(),
        }
    }
}

/// SplitMix64 finalizer, used to decorrelate per-sample seeds.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn mix(seed: u64, index: u64) -> u64 {
    splitmix(seed ^ splitmix(index))
}

/// Train and test splits for one task (`D_m`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskDataset {
    pub spec: TaskSpec,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl TaskDataset {
    pub fn task_id(&self) -> &str {
        &self.spec.task_id
    }

    /// Writes one JSON object per line: `task_id`, `context`, `question`, `answer`.
    pub fn write_jsonl<W: Write>(samples: &[Sample], vocab: &Vocabulary, mut w: W) -> std::io::Result<()> {
        for s in samples {
            serde_json::to_writer(&mut w, &s.to_record(vocab))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Generates the dataset. Train samples use indices `0..n_train`, test samples
/// `n_train..n_train + n_test`.
pub fn generate_task(spec: &TaskSpec, vocab: &Vocabulary, context_len: usize) -> Result<TaskDataset, DataError> {
    spec.validate()?;
    let question = vocab.tokenize(&spec.question_text())?;
    let make = |index: u64| -> Result<Sample, DataError> {
        let ctx = spec.draw_context(index);
        let ctx_refs: Vec<&str> = ctx.iter().map(String::as_str).collect();
        let answer = spec.solve(&ctx_refs)?;
        Sample::from_parts(
            vocab,
            &spec.task_id,
            vocab.tokenize(&ctx.join(" "))?,
            question.clone(),
            vocab.tokenize(&answer.join(" "))?,
            Some(context_len),
        )
    };
    let n_train = spec.n_train as u64;
    let train = (0..n_train).map(make).collect::<Result<Vec<_>, _>>()?;
    let test = (n_train..n_train + spec.n_test as u64).map(make).collect::<Result<Vec<_>, _>>()?;
    Ok(TaskDataset { spec: spec.clone(), train, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solve(spec: &TaskSpec, ctx: &str) -> String {
        let toks: Vec<&str> = ctx.split_whitespace().collect();
        spec.solve(&toks).unwrap().join(" ")
    }

    #[test]
    fn task_definitions() {
        assert_eq!(solve(&TaskSpec::new("c", GeneratorKind::Copy, "p q"), "p q"), "p q");
        assert_eq!(solve(&TaskSpec::new("r", GeneratorKind::Reverse, "a b c"), "a b c"), "c b a");
        let digits = "0 1 2 3 4 5 6 7 8 9";
        assert_eq!(solve(&TaskSpec::new("s", GeneratorKind::Sort, digits), "3 1 2"), "1 2 3");
        assert_eq!(solve(&TaskSpec::new("a", GeneratorKind::AddMod, digits), "7 8"), "5");
        let slot = TaskSpec { max_len: 2, ..TaskSpec::new("f", GeneratorKind::SlotFill, "k1 k2 v1 v2") };
        assert_eq!(solve(&slot, "k2 v1 k1 v2"), "v2 v1");
        let cls = TaskSpec::new("k", GeneratorKind::Classify, "a b c d");
        assert_eq!(solve(&cls, "a b c"), "pos");
        assert_eq!(solve(&cls, "c d a"), "neg");
        assert_eq!(solve(&cls, "c a"), "neg");
        assert_eq!(solve(&cls, "a c"), "pos");
    }

    #[test]
    fn deterministic_and_disjoint_indices() {
        let spec = TaskSpec { seed: 9, n_train: 30, n_test: 10, ..TaskSpec::new("copy", GeneratorKind::Copy, "a b c d e") };
        let vocab = Vocabulary::build(std::slice::from_ref(&spec)).unwrap();
        let a = generate_task(&spec, &vocab, 32).unwrap();
        let b = generate_task(&spec, &vocab, 32).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train.len(), a.test.len()), (30, 10));
        for s in a.train.iter().chain(&a.test) {
            assert_eq!(s.context, s.answer);
            assert!((2..=4).contains(&s.context.len()));
        }
        let other = TaskSpec { seed: 10, ..spec.clone() };
        assert_ne!(generate_task(&other, &vocab, 32).unwrap().train, a.train);
    }

    #[test]
    fn alphabet_too_small() {
        let spec = TaskSpec { max_len: 3, ..TaskSpec::new("f", GeneratorKind::SlotFill, "a b c d") };
        assert!(matches!(spec.validate(), Err(DataError::AlphabetTooSmall { needed: 6, got: 4, .. })));
        let spec = TaskSpec::new("k", GeneratorKind::Classify, "a");
        assert!(matches!(spec.validate(), Err(DataError::AlphabetTooSmall { .. })));
    }

    #[test]
    fn max_encoded_len_bounds_samples() {
        for kind in [
            GeneratorKind::Copy,
            GeneratorKind::Reverse,
            GeneratorKind::Sort,
            GeneratorKind::AddMod,
            GeneratorKind::SlotFill,
            GeneratorKind::Classify,
        ] {
            let spec = TaskSpec { n_train: 40, ..TaskSpec::new("t", kind, "a b c d e f g h") };
            let vocab = Vocabulary::build(std::slice::from_ref(&spec)).unwrap();
            let d = generate_task(&spec, &vocab, 64).unwrap();
            let longest = d.train.iter().map(Sample::len).max().unwrap();
            assert!(longest <= spec.max_encoded_len());
        }
    }

    #[test]
    fn alphabet_accepts_string_or_list() {
        let a: TaskSpec = serde_json::from_str(r#"{"task_id":"x","kind":"sort","alphabet":"1 2 3"}"#).unwrap();
        let b: TaskSpec = serde_json::from_str(r#"{"task_id":"x","kind":"sort","alphabet":["1","2","3"]}"#).unwrap();
        assert_eq!(a, b);
        assert!(serde_json::from_str::<TaskSpec>(r#"{"task_id":"x","kind":"sort","alphabet":"1","bogus":1}"#).is_err());
    }

    #[test]
    fn jsonl_dump() {
        let spec = TaskSpec { n_train: 2, ..TaskSpec::new("reverse", GeneratorKind::Reverse, "a b") };
        let vocab = Vocabulary::build(std::slice::from_ref(&spec)).unwrap();
        let d = generate_task(&spec, &vocab, 32).unwrap();
        let mut buf = Vec::new();
        TaskDataset::write_jsonl(&d.train, &vocab, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        let rec: crate::taskdata::SampleRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(rec.question, "rev");
    }
}
