use rand::Rng;

use super::{check_tokens, LogitsModel, ModelError, PAD_ID};
use crate::autodiff::log_softmax_rows;

/// A generated continuation (prefix and stop token excluded).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    /// True when decoding ended without producing the stop token.
    pub truncated: bool,
}

/// Index of the largest entry, skipping the padding id; ties go to the lowest id.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = usize::MAX;
    for (i, &v) in row.iter().enumerate() {
        if i == PAD_ID {
            continue;
        }
        if best == usize::MAX || v > row[best] {
            best = i;
        }
    }
    best
}

/// `log_softmax(logits / tau)`.
pub fn log_probs_with_temperature(logits: &[f64], tau: f64) -> Result<Vec<f64>, ModelError> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(ModelError::InvalidTemperature(tau));
    }
    if logits.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    if tau == 1.0 {
        return Ok(log_softmax_rows(logits, logits.len()));
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / tau).collect();
    Ok(log_softmax_rows(&scaled, scaled.len()))
}

fn decode_loop<M, F>(model: &M, prefix: &[usize], stop_token: usize, max_len: usize, mut pick: F) -> Result<Decoded, ModelError>
where
    M: LogitsModel + ?Sized,
    F: FnMut(&[f64]) -> usize,
{
    check_tokens(prefix, model.vocab_size(), model.context_len())?;
    let mut seq = prefix.to_vec();
    let mut out = Vec::new();
    while out.len() < max_len && seq.len() <= model.context_len() {
        if seq.len() == model.context_len() {
            break;
        }
        let logits = model.next_logits(&seq)?;
        if logits.len() != model.vocab_size() {
            return Err(ModelError::VocabMismatch { left: logits.len(), right: model.vocab_size() });
        }
        let next = pick(&logits);
        if next == stop_token {
            return Ok(Decoded { tokens: out, truncated: false });
        }
        out.push(next);
        seq.push(next);
    }
    Ok(Decoded { tokens: out, truncated: true })
}

/// Appends argmax tokens until `stop_token` or `max_len` generated tokens.
pub fn greedy_decode<M: LogitsModel + ?Sized>(
    model: &M,
    prefix: &[usize],
    stop_token: usize,
    max_len: usize,
) -> Result<Decoded, ModelError> {
    decode_loop(model, prefix, stop_token, max_len, argmax)
}

/// Samples from the softmax renormalized over the `k` highest-scoring
/// non-padding tokens. `k = 1` reproduces [`greedy_decode`].
pub fn top_k_sample<M: LogitsModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    prefix: &[usize],
    k: usize,
    rng: &mut R,
    stop_token: usize,
    max_len: usize,
) -> Result<Decoded, ModelError> {
    let vocab = model.vocab_size();
    if k == 0 || k > vocab {
        return Err(ModelError::InvalidTopK { k, vocab_size: vocab });
    }
    let mut order: Vec<usize> = Vec::with_capacity(vocab);
    let mut weights: Vec<f64> = Vec::with_capacity(vocab);
    decode_loop(model, prefix, stop_token, max_len, |logits| {
        order.clear();
        order.extend((0..logits.len()).filter(|&i| i != PAD_ID));
        // Stable sort keeps lower ids first among equal logits.
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
        order.truncate(k);
        let top = logits[order[0]];
        weights.clear();
        weights.extend(order.iter().map(|&i| (logits[i] - top).exp()));
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        for (&tok, &w) in order.iter().zip(weights.iter()) {
            if u < w {
                return tok;
            }
            u -= w;
        }
        *order.last().expect("k >= 1")
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Next-token logits looked up from the last token only.
    struct Table {
        vocab: usize,
        next: Vec<Vec<f64>>,
    }

    impl LogitsModel for Table {
        fn vocab_size(&self) -> usize {
            self.vocab
        }
        fn context_len(&self) -> usize {
            16
        }
        fn logits(&self, tokens: &[usize]) -> Result<Tensor, ModelError> {
            let rows: Vec<Vec<f64>> = tokens.iter().map(|&t| self.next[t].clone()).collect();
            Ok(Tensor::from_rows(&rows)?)
        }
    }

    fn onehot(v: usize, hot: usize, big: f64) -> Vec<f64> {
        (0..v).map(|i| if i == hot { big } else { 0.0 }).collect()
    }

    const STOP: usize = 1;

    fn chain() -> Table {
        // 2 -> 3 -> 4 -> STOP
        let v = 6;
        let mut next = vec![onehot(v, STOP, 5.0); v];
        next[2] = onehot(v, 3, 5.0);
        next[3] = onehot(v, 4, 5.0);
        Table { vocab: v, next }
    }

    #[test]
    fn always_stop_gives_empty() {
        let t = Table { vocab: 4, next: vec![onehot(4, STOP, 1.0); 4] };
        let d = greedy_decode(&t, &[2], STOP, 10).unwrap();
        assert_eq!(d, Decoded { tokens: vec![], truncated: false });
    }

    #[test]
    fn forced_sequence() {
        let d = greedy_decode(&chain(), &[2], STOP, 10).unwrap();
        assert_eq!(d.tokens, vec![3, 4]);
        assert!(!d.truncated);
        let cut = greedy_decode(&chain(), &[2], STOP, 1).unwrap();
        assert_eq!(cut, Decoded { tokens: vec![3], truncated: true });
    }

    #[test]
    fn ties_go_to_lowest_non_pad_id() {
        assert_eq!(argmax(&[9.0, 1.0, 1.0, 0.5]), 1);
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 1);
    }

    #[test]
    fn never_emits_pad() {
        let t = Table { vocab: 4, next: vec![onehot(4, PAD_ID, 50.0); 4] };
        let d = greedy_decode(&t, &[2], STOP, 5).unwrap();
        assert!(d.tokens.iter().all(|&x| x != PAD_ID));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = top_k_sample(&t, &[2], 4, &mut rng, STOP, 5).unwrap();
        assert!(s.tokens.iter().all(|&x| x != PAD_ID));
    }

    #[test]
    fn top1_equals_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let t = chain();
        assert_eq!(top_k_sample(&t, &[2], 1, &mut rng, STOP, 10).unwrap(), greedy_decode(&t, &[2], STOP, 10).unwrap());
    }

    #[test]
    fn uniform_sampling_frequencies() {
        // Multinomial oracle: each of m candidates has count ~ Binomial(n, 1/m).
        let v = 6;
        let t = Table { vocab: v, next: vec![vec![0.0; v]; v] };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 10_000;
        let mut counts = vec![0usize; v];
        for _ in 0..n {
            let d = top_k_sample(&t, &[2], v, &mut rng, usize::MAX, 1).unwrap();
            counts[d.tokens[0]] += 1;
        }
        assert_eq!(counts[PAD_ID], 0);
        let m = (v - 1) as f64;
        let p = 1.0 / m;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts[1..] {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let v = 6;
        let t = Table { vocab: v, next: vec![vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]; v] };
        let draw = || top_k_sample(&t, &[2], 4, &mut ChaCha8Rng::seed_from_u64(3), STOP, 8).unwrap();
        assert_eq!(draw(), draw());
    }

    #[test]
    fn invalid_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(top_k_sample(&chain(), &[2], 0, &mut rng, STOP, 3).is_err());
        assert!(top_k_sample(&chain(), &[2], 7, &mut rng, STOP, 3).is_err());
    }

    #[test]
    fn temperature_examples() {
        let lp = log_probs_with_temperature(&[0.0, 0.0], 1.0).unwrap();
        assert!((lp[0] - 0.5f64.ln()).abs() < 1e-15 && (lp[1] - 0.5f64.ln()).abs() < 1e-15);
        // Oracle: softmax([1, 0]) = [e/(e+1), 1/(e+1)]
        let e = std::f64::consts::E;
        let lp = log_probs_with_temperature(&[2.0, 0.0], 2.0).unwrap();
        assert!((lp[0].exp() - e / (e + 1.0)).abs() < 1e-12);
        assert!((lp[1].exp() - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((lp[0].exp() - 0.7311).abs() < 1e-4);
        let lp = log_probs_with_temperature(&[10.0, -10.0, 3.0, 0.0], 1e6).unwrap();
        let probs: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
        let spread = probs.iter().cloned().fold(f64::MIN, f64::max) - probs.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread < 1e-4);
        assert!(log_probs_with_temperature(&[1.0], 0.0).is_err());
        assert!(log_probs_with_temperature(&[1.0], -2.0).is_err());
    }
}
