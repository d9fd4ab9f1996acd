use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{AutodiffError, Tape, Tensor, Var};

const CHECKPOINT_FORMAT: &str = "l2kd-params-v1";

/// Ordered, named collection of trainable tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest<M> {
    format: String,
    params: Vec<ManifestEntry>,
    meta: M,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its index.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every tensor as a gradient-requiring leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<Vec<Var>, AutodiffError> {
        self.tensors.iter().map(|t| tape.leaf(t, true)).collect()
    }

    /// Registers every tensor as a constant leaf (no gradient tracking).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Result<Vec<Var>, AutodiffError> {
        self.tensors.iter().map(|t| tape.leaf(t, false)).collect()
    }

    /// Adds gradients for `binding` (as produced by [`ParamSet::bind`]) into each tensor's grad slot.
    pub fn accumulate_grads(&mut self, binding: &[Var], grads: &super::Gradients) -> Result<(), AutodiffError> {
        if binding.len() != self.tensors.len() {
            return Err(AutodiffError::LayoutMismatch { expected: self.tensors.len(), got: binding.len() });
        }
        for (t, &v) in self.tensors.iter_mut().zip(binding) {
            if let Some(g) = grads.get(v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Scales all grad slots so their joint L2 norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let mut slices: Vec<&mut [f64]> = self.tensors.iter_mut().filter_map(|t| t.grad_mut()).collect();
        super::clip_global_norm(&mut slices, max_norm)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Order-sensitive digest of every parameter bit pattern.
    pub fn checksum(&self) -> u64 {
        // FNV-1a over the raw f64 bits.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tensors {
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Writes a one-line JSON manifest, a newline, then every value as little-endian f64.
    pub fn write_checkpoint<W: Write, M: Serialize>(&self, mut w: W, meta: &M) -> std::io::Result<()> {
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.to_string(),
            params: self
                .names
                .iter()
                .zip(&self.tensors)
                .map(|(n, t)| ManifestEntry { name: n.clone(), shape: t.shape().to_vec() })
                .collect(),
            meta,
        };
        serde_json::to_writer(&mut w, &manifest)?;
        w.write_all(b"\n")?;
        for t in &self.tensors {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn read_checkpoint<R: BufRead, M: for<'de> Deserialize<'de>>(mut r: R) -> Result<(Self, M), AutodiffError> {
        let mut line = Vec::new();
        r.read_until(b'\n', &mut line).map_err(|e| AutodiffError::Checkpoint(e.to_string()))?;
        let manifest: Manifest<M> =
            serde_json::from_slice(&line).map_err(|e| AutodiffError::Checkpoint(e.to_string()))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(AutodiffError::Checkpoint(format!("unknown format {:?}", manifest.format)));
        }
        let mut set = ParamSet::new();
        let mut buf = [0u8; 8];
        for entry in manifest.params {
            let numel: usize = entry.shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                r.read_exact(&mut buf)
                    .map_err(|e| AutodiffError::Checkpoint(format!("{}: {e}", entry.name)))?;
                data.push(f64::from_le_bytes(buf));
            }
            set.push(entry.name, Tensor::new(entry.shape, data)?);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|e| AutodiffError::Checkpoint(e.to_string()))?;
        if !rest.is_empty() {
            return Err(AutodiffError::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        Ok((set, manifest.meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn checkpoint_round_trips(values in proptest::collection::vec(-1e6f64..1e6, 1..40), split in 1usize..4) {
            let mut set = ParamSet::new();
            let n = values.len();
            let cut = (n / split).max(1).min(n);
            set.push("a", Tensor::vector(values[..cut].to_vec()).unwrap());
            if cut < n {
                set.push("b.weight", Tensor::new(vec![1, n - cut], values[cut..].to_vec()).unwrap());
            }
            let mut buf = Vec::new();
            set.write_checkpoint(&mut buf, &"meta").unwrap();
            let (back, meta): (ParamSet, String) = ParamSet::read_checkpoint(&buf[..]).unwrap();
            prop_assert_eq!(meta, "meta");
            prop_assert_eq!(back.checksum(), set.checksum());
            prop_assert_eq!(back, set);
        }
    }

    #[test]
    fn truncated_checkpoint_fails() {
        let mut set = ParamSet::new();
        set.push("w", Tensor::vector(vec![1.0, 2.0]).unwrap());
        let mut buf = Vec::new();
        set.write_checkpoint(&mut buf, &()).unwrap();
        buf.pop();
        assert!(ParamSet::read_checkpoint::<_, ()>(&buf[..]).is_err());
    }
}
