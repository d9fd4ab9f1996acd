//! Fixtures shared by the benchmarks.

use l2kd::model::{LanguageModel, ModelConfig};
use l2kd::taskdata::{generate_task, GeneratorKind, TaskDataset, TaskSpec, Vocabulary};

pub const CONTEXT: usize = 16;

/// A reverse task and a freshly initialized model sized like the acceptance runs.
pub fn fixture(d_model: usize) -> (Vocabulary, TaskDataset, LanguageModel) {
    let spec = TaskSpec { min_len: 4, max_len: 4, n_train: 64, n_test: 8, seed: 7, ..TaskSpec::new("reverse", GeneratorKind::Reverse, "a b c d e f") };
    let vocab = Vocabulary::build(std::slice::from_ref(&spec)).expect("valid spec");
    let task = generate_task(&spec, &vocab, CONTEXT).expect("fits the context");
    let config = ModelConfig { n_layers: 2, n_heads: 2, d_model, context_len: CONTEXT, vocab_size: vocab.len() };
    let model = LanguageModel::new(config, 0).expect("valid config");
    (vocab, task, model)
}
