use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{DataError, TaskSpec};
use crate::model::PAD_ID;

pub const PAD_TOKEN: &str = "<pad>";
pub const EOS_TOKEN: &str = "<eos>";
pub const ANS_TOKEN: &str = "<ans>";

pub fn bos_token(task_id: &str) -> String {
    format!("<bos:{task_id}>")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct TaskEntry {
    id: String,
    bos: usize,
    question: Vec<usize>,
}

/// Fixed token inventory shared by every task in a run.
///
/// Ids: `PAD = 0`, `EOS = 1`, `ANS = 2`, one begin token per task, then
/// content tokens in first-seen order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    tasks: Vec<TaskEntry>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    tasks: Vec<TaskEntry>,
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile { tokens: v.tokens, tasks: v.tasks }
    }
}

impl TryFrom<VocabFile> for Vocabulary {
    type Error = DataError;
    fn try_from(f: VocabFile) -> Result<Self, DataError> {
        let mut index = HashMap::new();
        for (i, t) in f.tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(DataError::DuplicateToken(t.clone()));
            }
        }
        Ok(Vocabulary { tokens: f.tokens, index, tasks: f.tasks })
    }
}

impl Vocabulary {
    /// Builds the shared vocabulary from every task spec up front.
    pub fn build(specs: &[TaskSpec]) -> Result<Self, DataError> {
        let mut vocab = Self { tokens: Vec::new(), index: HashMap::new(), tasks: Vec::new() };
        for special in [PAD_TOKEN, EOS_TOKEN, ANS_TOKEN] {
            vocab.insert_new(special)?;
        }
        debug_assert_eq!(vocab.index[PAD_TOKEN], PAD_ID);
        for spec in specs {
            if vocab.tasks.iter().any(|t| t.id == spec.task_id) {
                return Err(DataError::DuplicateTask(spec.task_id.clone()));
            }
            let bos = vocab.insert_new(&bos_token(&spec.task_id))?;
            vocab.tasks.push(TaskEntry { id: spec.task_id.clone(), bos, question: Vec::new() });
        }
        for spec in specs {
            for tok in spec.content_tokens() {
                if is_special_text(&tok) {
                    return Err(DataError::ReservedToken(tok));
                }
                if !vocab.index.contains_key(&tok) {
                    vocab.insert_new(&tok)?;
                }
            }
            let question = vocab.tokenize(&spec.question_text())?;
            let entry = vocab.tasks.iter_mut().find(|t| t.id == spec.task_id).expect("registered above");
            entry.question = question;
        }
        Ok(vocab)
    }

    fn insert_new(&mut self, tok: &str) -> Result<usize, DataError> {
        if self.index.contains_key(tok) {
            return Err(DataError::DuplicateToken(tok.to_string()));
        }
        let id = self.tokens.len();
        self.tokens.push(tok.to_string());
        self.index.insert(tok.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad(&self) -> usize {
        PAD_ID
    }

    pub fn eos(&self) -> usize {
        1
    }

    pub fn ans(&self) -> usize {
        2
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn task_ids(&self) -> impl Iterator<Item = &str> {
        self.tasks.iter().map(|t| t.id.as_str())
    }

    pub fn bos(&self, task_id: &str) -> Result<usize, DataError> {
        self.tasks
            .iter()
            .find(|t| t.id == task_id)
            .map(|t| t.bos)
            .ok_or_else(|| DataError::UnknownTask(task_id.to_string()))
    }

    /// Question tokens registered for `task_id`.
    pub fn question(&self, task_id: &str) -> Result<&[usize], DataError> {
        self.tasks
            .iter()
            .find(|t| t.id == task_id)
            .map(|t| t.question.as_slice())
            .ok_or_else(|| DataError::UnknownTask(task_id.to_string()))
    }

    /// The task whose begin token is `id`, if any.
    pub fn task_of_bos(&self, id: usize) -> Option<&str> {
        self.tasks.iter().find(|t| t.bos == id).map(|t| t.id.as_str())
    }

    /// PAD, EOS, ANS and every task begin token.
    pub fn is_special(&self, id: usize) -> bool {
        id <= 2 || self.task_of_bos(id).is_some()
    }

    /// Whitespace tokenization; every piece must be a known content token.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>, DataError> {
        text.split_whitespace()
            .map(|w| match self.id(w) {
                Some(id) if !self.is_special(id) => Ok(id),
                _ => Err(DataError::UnknownToken(w.to_string())),
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i).unwrap_or("<unk>")).collect::<Vec<_>>().join(" ")
    }
}

fn is_special_text(tok: &str) -> bool {
    tok.starts_with('<') && tok.ends_with('>')
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskdata::{GeneratorKind, TaskSpec};

    fn specs() -> Vec<TaskSpec> {
        vec![
            TaskSpec::new("copy", GeneratorKind::Copy, "a b c"),
            TaskSpec::new("reverse", GeneratorKind::Reverse, "a b c d"),
        ]
    }

    #[test]
    fn layout_and_specials() {
        let v = Vocabulary::build(&specs()).unwrap();
        assert_eq!(v.id(PAD_TOKEN), Some(0));
        assert_eq!(v.id(EOS_TOKEN), Some(1));
        assert_eq!(v.id(ANS_TOKEN), Some(2));
        assert_eq!(v.bos("copy").unwrap(), 3);
        assert_eq!(v.bos("reverse").unwrap(), 4);
        assert_eq!(v.task_of_bos(4), Some("reverse"));
        assert!(v.is_special(3) && !v.is_special(5));
        assert!(v.bos("sort").is_err());
        // a b c copy d rev
        assert_eq!(v.len(), 5 + 6);
    }

    #[test]
    fn tokenize_rejects_unknown_and_special() {
        let v = Vocabulary::build(&specs()).unwrap();
        assert_eq!(v.detokenize(&v.tokenize("a  c b").unwrap()), "a c b");
        assert!(matches!(v.tokenize("a z"), Err(DataError::UnknownToken(t)) if t == "z"));
        assert!(v.tokenize("<eos>").is_err());
    }

    #[test]
    fn serde_preserves_ids() {
        let v = Vocabulary::build(&specs()).unwrap();
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn reserved_and_duplicate_tasks() {
        let mut s = specs();
        s.push(TaskSpec::new("copy", GeneratorKind::Copy, "a"));
        assert!(matches!(Vocabulary::build(&s), Err(DataError::DuplicateTask(_))));
        let bad = vec![TaskSpec::new("x", GeneratorKind::Copy, "a <eos>")];
        assert!(matches!(Vocabulary::build(&bad), Err(DataError::ReservedToken(_))));
    }
}
