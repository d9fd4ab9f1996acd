use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{check_tokens, LogitsModel, ModelConfig, ModelError};
use crate::autodiff::{ParamSet, Tape, Tensor, Var};

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;
const MASK_VALUE: f64 = -1e30;

#[derive(Debug, Clone)]
struct HeadIdx {
    wq: usize,
    bq: usize,
    wk: usize,
    wv: usize,
    bv: usize,
}

#[derive(Debug, Clone)]
struct LayerIdx {
    ln1_g: usize,
    ln1_b: usize,
    heads: Vec<HeadIdx>,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w_fc: usize,
    b_fc: usize,
    w_proj: usize,
    b_proj: usize,
}

/// Positions of every parameter inside the [`ParamSet`].
#[derive(Debug, Clone)]
struct Layout {
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerIdx>,
    lnf_g: usize,
    lnf_b: usize,
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

fn build_params(config: &ModelConfig, mut init: impl FnMut(&[usize], Init) -> Tensor) -> (ParamSet, Layout) {
    let (d, dh, v, c) = (config.d_model, config.head_dim(), config.vocab_size, config.context_len);
    let mut p = ParamSet::new();
    let mut add = |p: &mut ParamSet, name: String, shape: &[usize], how: Init| p.push(name, init(shape, how));
    let tok_emb = add(&mut p, "tok_emb".into(), &[v, d], Init::Normal);
    let pos_emb = add(&mut p, "pos_emb".into(), &[c, d], Init::Normal);
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let ln1_g = add(&mut p, format!("h{l}.ln1.g"), &[d], Init::Ones);
        let ln1_b = add(&mut p, format!("h{l}.ln1.b"), &[d], Init::Zeros);
        let heads = (0..config.n_heads)
            .map(|h| HeadIdx {
                wq: add(&mut p, format!("h{l}.attn{h}.q.w"), &[d, dh], Init::Normal),
                bq: add(&mut p, format!("h{l}.attn{h}.q.b"), &[dh], Init::Zeros),
                wk: add(&mut p, format!("h{l}.attn{h}.k.w"), &[d, dh], Init::Normal),
                wv: add(&mut p, format!("h{l}.attn{h}.v.w"), &[d, dh], Init::Normal),
                bv: add(&mut p, format!("h{l}.attn{h}.v.b"), &[dh], Init::Zeros),
            })
            .collect();
        layers.push(LayerIdx {
            ln1_g,
            ln1_b,
            heads,
            wo: add(&mut p, format!("h{l}.attn.out.w"), &[d, d], Init::Normal),
            bo: add(&mut p, format!("h{l}.attn.out.b"), &[d], Init::Zeros),
            ln2_g: add(&mut p, format!("h{l}.ln2.g"), &[d], Init::Ones),
            ln2_b: add(&mut p, format!("h{l}.ln2.b"), &[d], Init::Zeros),
            w_fc: add(&mut p, format!("h{l}.mlp.fc.w"), &[d, 4 * d], Init::Normal),
            b_fc: add(&mut p, format!("h{l}.mlp.fc.b"), &[4 * d], Init::Zeros),
            w_proj: add(&mut p, format!("h{l}.mlp.proj.w"), &[4 * d, d], Init::Normal),
            b_proj: add(&mut p, format!("h{l}.mlp.proj.b"), &[d], Init::Zeros),
        });
    }
    let lnf_g = add(&mut p, "ln_f.g".into(), &[d], Init::Ones);
    let lnf_b = add(&mut p, "ln_f.b".into(), &[d], Init::Zeros);
    (p, Layout { tok_emb, pos_emb, layers, lnf_g, lnf_b })
}

/// GPT-style decoder: learned positions, pre-norm blocks, GELU MLP and an
/// output head tied to the token embedding.
#[derive(Debug, Clone)]
pub struct LanguageModel {
    config: ModelConfig,
    params: ParamSet,
    layout: Layout,
}

impl LanguageModel {
    /// Random initialization: N(0, 0.02) weights, unit LayerNorm gains, zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        Self::with_init_std(config, seed, INIT_STD)
    }

    /// Like [`LanguageModel::new`] with a custom weight standard deviation.
    pub fn with_init_std(config: ModelConfig, seed: u64, std: f64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        let (params, layout) = build_params(&config, |shape, how| {
            let numel = shape.iter().product();
            let data = match how {
                Init::Normal => (0..numel).map(|_| normal.sample(&mut rng)).collect(),
                Init::Zeros => vec![0.0; numel],
                Init::Ones => vec![1.0; numel],
            };
            Tensor::new(shape.to_vec(), data).expect("init shapes are valid")
        });
        Ok(Self { config, params, layout })
    }

    /// Wraps an existing parameter set, checking names and shapes against `config`.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self, ModelError> {
        config.validate()?;
        let (template, layout) = build_params(&config, |shape, _| Tensor::zeros(shape.to_vec()));
        let same = template.names() == params.names()
            && template.tensors().iter().zip(params.tensors()).all(|(a, b)| a.shape() == b.shape());
        if !same {
            return Err(ModelError::InvalidConfig("parameter names or shapes do not match the config".into()));
        }
        Ok(Self { config, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn save<W: Write>(&self, w: W) -> std::io::Result<()> {
        self.params.write_checkpoint(w, &self.config)
    }

    pub fn load<R: BufRead>(r: R) -> Result<Self, ModelError> {
        let (params, config): (ParamSet, ModelConfig) = ParamSet::read_checkpoint(r)?;
        Self::from_params(config, params)
    }

    /// Records the forward pass on `tape` using `binding` (from `params().bind`)
    /// and returns the `L x V` logits node.
    pub fn forward(&self, tape: &mut Tape, binding: &[Var], tokens: &[usize]) -> Result<Var, ModelError> {
        check_tokens(tokens, self.config.vocab_size, self.config.context_len)?;
        if binding.len() != self.params.len() {
            return Err(ModelError::InvalidConfig(format!(
                "binding has {} entries, model has {}",
                binding.len(),
                self.params.len()
            )));
        }
        let p = |i: usize| binding[i];
        let lay = &self.layout;
        let len = tokens.len();
        let positions: Vec<usize> = (0..len).collect();

        let tok = tape.gather(p(lay.tok_emb), tokens)?;
        let pos = tape.gather(p(lay.pos_emb), &positions)?;
        let mut x = tape.add(tok, pos)?;

        let causal: Vec<bool> = (0..len * len).map(|k| k % len > k / len).collect();
        let scale = 1.0 / (self.config.head_dim() as f64).sqrt();

        for layer in &lay.layers {
            let a = tape.layernorm(x, p(layer.ln1_g), p(layer.ln1_b), LN_EPS)?;
            let mut head_out = Vec::with_capacity(layer.heads.len());
            for h in &layer.heads {
                let q = tape.matmul(a, p(h.wq))?;
                let q = tape.add_row(q, p(h.bq))?;
                // No key bias: it shifts every score in a row equally and has zero gradient.
                let k = tape.matmul(a, p(h.wk))?;
                let v = tape.matmul(a, p(h.wv))?;
                let v = tape.add_row(v, p(h.bv))?;
                let kt = tape.transpose(k)?;
                let scores = tape.matmul(q, kt)?;
                let scores = tape.scale(scores, scale)?;
                let scores = tape.masked_fill(scores, causal.clone(), MASK_VALUE)?;
                let attn = tape.softmax(scores)?;
                head_out.push(tape.matmul(attn, v)?);
            }
            let merged = tape.concat(&head_out)?;
            let o = tape.matmul(merged, p(layer.wo))?;
            let o = tape.add_row(o, p(layer.bo))?;
            x = tape.add(x, o)?;

            let m = tape.layernorm(x, p(layer.ln2_g), p(layer.ln2_b), LN_EPS)?;
            let f = tape.matmul(m, p(layer.w_fc))?;
            let f = tape.add_row(f, p(layer.b_fc))?;
            let f = tape.gelu(f)?;
            let f = tape.matmul(f, p(layer.w_proj))?;
            let f = tape.add_row(f, p(layer.b_proj))?;
            x = tape.add(x, f)?;
        }
        let hfin = tape.layernorm(x, p(lay.lnf_g), p(lay.lnf_b), LN_EPS)?;
        let head = tape.transpose(p(lay.tok_emb))?;
        Ok(tape.matmul(hfin, head)?)
    }

    /// Inference-only forward pass; returns `L x V` logits.
    pub fn forward_logits(&self, tokens: &[usize]) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let binding = self.params.bind_frozen(&mut tape)?;
        let out = self.forward(&mut tape, &binding, tokens)?;
        Ok(tape.tensor(out))
    }
}

impl LogitsModel for LanguageModel {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn context_len(&self) -> usize {
        self.config.context_len
    }

    fn logits(&self, tokens: &[usize]) -> Result<Tensor, ModelError> {
        self.forward_logits(tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig { n_layers: 2, n_heads: 2, d_model: 8, context_len: 12, vocab_size: 7 }
    }

    #[test]
    fn logits_shape() {
        let m = LanguageModel::new(small(), 1).unwrap();
        for len in 1..=12 {
            let toks: Vec<usize> = (0..len).map(|i| i % 7).collect();
            assert_eq!(m.forward_logits(&toks).unwrap().shape(), &[len, 7]);
        }
    }

    #[test]
    fn zero_output_head_is_uniform() {
        let mut m = LanguageModel::new(small(), 3).unwrap();
        m.params_mut().get_mut("tok_emb").unwrap().data_mut().fill(0.0);
        let logits = m.forward_logits(&[1, 2, 3]).unwrap();
        for r in 0..3 {
            let lp = crate::autodiff::log_softmax_rows(logits.row(r), 7);
            for v in lp {
                assert!((v.exp() - 1.0 / 7.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn causal_prefix_rows_unchanged() {
        let m = LanguageModel::new(small(), 5).unwrap();
        let base = m.forward_logits(&[1, 4, 2]).unwrap();
        let longer = m.forward_logits(&[1, 4, 2, 6, 3]).unwrap();
        for r in 0..3 {
            assert_eq!(base.row(r), longer.row(r));
        }
        let changed = m.forward_logits(&[1, 4, 2, 5, 1]).unwrap();
        for r in 0..3 {
            assert_eq!(longer.row(r), changed.row(r));
        }
        assert_ne!(longer.row(3), changed.row(3));
    }

    #[test]
    fn input_validation() {
        let m = LanguageModel::new(small(), 5).unwrap();
        assert!(matches!(m.forward_logits(&[0; 13]), Err(ModelError::SequenceTooLong { len: 13, .. })));
        assert!(matches!(m.forward_logits(&[7]), Err(ModelError::TokenOutOfVocab { token: 7, .. })));
        assert!(matches!(m.forward_logits(&[]), Err(ModelError::EmptyInput)));
        let bad = ModelConfig { d_model: 9, ..small() };
        assert!(LanguageModel::new(bad, 0).is_err());
    }

    #[test]
    fn same_seed_same_params() {
        let a = LanguageModel::new(small(), 11).unwrap();
        let b = LanguageModel::new(small(), 11).unwrap();
        let c = LanguageModel::new(small(), 12).unwrap();
        assert_eq!(a.params().checksum(), b.params().checksum());
        assert_ne!(a.params().checksum(), c.params().checksum());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = LanguageModel::new(small(), 9).unwrap();
        let mut buf = Vec::new();
        m.save(&mut buf).unwrap();
        let back = LanguageModel::load(&buf[..]).unwrap();
        assert_eq!(back.config(), m.config());
        assert_eq!(back.params().checksum(), m.params().checksum());
        assert_eq!(back.forward_logits(&[1, 2]).unwrap(), m.forward_logits(&[1, 2]).unwrap());
    }
}
