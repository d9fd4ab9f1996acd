//! Tensor-level Wengert tape.
//!
//! Every primitive appends one node whose inputs are strictly earlier nodes,
//! so insertion order is a topological order and `backward` is a single
//! reverse sweep.

use std::sync::atomic::{AtomicU64, Ordering};

use super::{AutodiffError, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a node on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    id: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }
}

/// Primitive operations understood by [`Tape::apply`].
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Mul,
    Sub,
    /// Repeat a `[n]` (or `[1, n]`) tensor into `rows` rows.
    Broadcast { rows: usize },
    /// Gather rows of a `[V, d]` table.
    EmbeddingGather { ids: Vec<usize> },
    /// Row-wise normalization; inputs are `x`, `gamma`, `beta`.
    LayerNorm { eps: f64 },
    Gelu,
    Softmax,
    LogSoftmax,
    ReduceSum,
    ReduceMean,
    Transpose,
    Reshape { shape: Vec<usize> },
    MaskedFill { mask: Vec<bool>, value: f64 },
    /// Concatenate 2-D inputs along the column axis.
    Concat,
    Scale { factor: f64 },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Sub => "sub",
            Primitive::Broadcast { .. } => "broadcast",
            Primitive::EmbeddingGather { .. } => "embedding_gather",
            Primitive::LayerNorm { .. } => "layernorm",
            Primitive::Gelu => "gelu",
            Primitive::Softmax => "softmax",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::ReduceSum => "reduce_sum",
            Primitive::ReduceMean => "reduce_mean",
            Primitive::Transpose => "transpose",
            Primitive::Reshape { .. } => "reshape",
            Primitive::MaskedFill { .. } => "masked_fill",
            Primitive::Concat => "concat",
            Primitive::Scale { .. } => "scale",
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Broadcast(usize),
    Gather { table: usize, ids: Vec<usize> },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(usize),
    Softmax(usize),
    LogSoftmax(usize),
    ReduceSum(usize),
    ReduceMean(usize),
    Transpose { x: usize, rows: usize, cols: usize },
    Reshape(usize),
    MaskedFill { x: usize, mask: Vec<bool> },
    Concat { parts: Vec<(usize, usize)>, rows: usize },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Broadcast(x)
            | Op::Gelu(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::ReduceSum(x)
            | Op::ReduceMean(x)
            | Op::Reshape(x) => vec![*x],
            Op::Gather { table, .. } => vec![*table],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Transpose { x, .. } | Op::MaskedFill { x, .. } => vec![*x],
            Op::Concat { parts, .. } => parts.iter().map(|p| p.0).collect(),
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records primitive applications for one forward/backward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().expect("shapes are never empty")
}

pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// Lazily allocated accumulator for input `i`, or None if it needs no gradient.
fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], i: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[i].requires_grad {
        return None;
    }
    let len = nodes[i].value.len();
    Some(grads[i].get_or_insert_with(|| vec![0.0; len]))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Row-wise softmax over the last axis of a flat buffer.
pub(crate) fn softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += *d;
        }
        dst.iter_mut().for_each(|d| *d /= sum);
    }
    out
}

/// Row-wise log-softmax over the last axis of a flat buffer.
pub(crate) fn log_softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + src.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = s - lse;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input ids recorded for node `id`; always smaller than `id`.
    pub fn node_inputs(&self, id: usize) -> Vec<usize> {
        self.nodes[id].op.inputs()
    }

    fn check(&self, var: Var) -> Result<usize, AutodiffError> {
        if var.tape != self.id || var.id >= self.nodes.len() {
            return Err(AutodiffError::Detached);
        }
        Ok(var.id)
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Result<Var, AutodiffError> {
        if let Some(index) = value.iter().position(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite { op: op_name, index });
        }
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        let id = self.nodes.len();
        self.nodes.push(Node { shape, value, op, requires_grad });
        Ok(Var { tape: self.id, id })
    }

    /// Registers a tensor as a leaf. Parameters pass `requires_grad = true`.
    pub fn leaf(&mut self, tensor: &Tensor, requires_grad: bool) -> Result<Var, AutodiffError> {
        let var = self.push("leaf", tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf)?;
        self.nodes[var.id].requires_grad = requires_grad;
        Ok(var)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var, AutodiffError> {
        let t = Tensor::new(shape, data)?;
        self.leaf(&t, false)
    }

    pub fn value(&self, var: Var) -> &[f64] {
        &self.nodes[var.id].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[var.id].shape
    }

    pub fn tensor(&self, var: Var) -> Tensor {
        let n = &self.nodes[var.id];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape values are finite")
    }

    /// Scalar value of a `[1]` node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.id].value[0]
    }

    fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> AutodiffError {
        AutodiffError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() }
    }

    /// Uniform entry point over every primitive.
    pub fn apply(&mut self, prim: &Primitive, inputs: &[Var]) -> Result<Var, AutodiffError> {
        let arity = match prim {
            Primitive::MatMul | Primitive::Add | Primitive::Mul | Primitive::Sub => Some(2),
            Primitive::LayerNorm { .. } => Some(3),
            Primitive::Concat => None,
            _ => Some(1),
        };
        if let Some(n) = arity {
            if inputs.len() != n {
                return Err(AutodiffError::Arity { op: prim.name(), expected: n, got: inputs.len() });
            }
        }
        match prim {
            Primitive::MatMul => self.matmul(inputs[0], inputs[1]),
            Primitive::Add => self.add(inputs[0], inputs[1]),
            Primitive::Mul => self.mul(inputs[0], inputs[1]),
            Primitive::Sub => self.sub(inputs[0], inputs[1]),
            Primitive::Broadcast { rows } => self.broadcast(inputs[0], *rows),
            Primitive::EmbeddingGather { ids } => self.gather(inputs[0], ids),
            Primitive::LayerNorm { eps } => self.layernorm(inputs[0], inputs[1], inputs[2], *eps),
            Primitive::Gelu => self.gelu(inputs[0]),
            Primitive::Softmax => self.softmax(inputs[0]),
            Primitive::LogSoftmax => self.log_softmax(inputs[0]),
            Primitive::ReduceSum => self.reduce_sum(inputs[0]),
            Primitive::ReduceMean => self.reduce_mean(inputs[0]),
            Primitive::Transpose => self.transpose(inputs[0]),
            Primitive::Reshape { shape } => self.reshape(inputs[0], shape.clone()),
            Primitive::MaskedFill { mask, value } => self.masked_fill(inputs[0], mask.clone(), *value),
            Primitive::Concat => self.concat(inputs),
            Primitive::Scale { factor } => self.scale(inputs[0], *factor),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (&self.nodes[ia].shape, &self.nodes[ib].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Self::mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_kernel(&self.nodes[ia].value, &self.nodes[ib].value, &mut out, m, k, n);
        self.push("matmul", vec![m, n], out, Op::MatMul { a: ia, b: ib, m, k, n })
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var, AutodiffError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        if self.nodes[ia].shape != self.nodes[ib].shape {
            return Err(Self::mismatch(name, &self.nodes[ia].shape, &self.nodes[ib].shape));
        }
        let out = self.nodes[ia].value.iter().zip(&self.nodes[ib].value).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.nodes[ia].shape.clone();
        self.push(name, shape, out, op(ia, ib))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, AutodiffError> {
        let ix = self.check(x)?;
        if !factor.is_finite() {
            return Err(AutodiffError::NonFinite { op: "scale", index: 0 });
        }
        let out = self.nodes[ix].value.iter().map(|v| v * factor).collect();
        let shape = self.nodes[ix].shape.clone();
        self.push("scale", shape, out, Op::Scale(ix, factor))
    }

    pub fn broadcast(&mut self, x: Var, rows: usize) -> Result<Var, AutodiffError> {
        let ix = self.check(x)?;
        let shape = &self.nodes[ix].shape;
        let is_row = shape.len() == 1 || (shape.len() == 2 && shape[0] == 1);
        if !is_row || rows == 0 {
            return Err(Self::mismatch("broadcast", shape, &[rows]));
        }
        let n = last_dim(shape);
        let out = self.nodes[ix].value.repeat(rows);
        self.push("broadcast", vec![rows, n], out, Op::Broadcast(ix))
    }

    /// Adds a `[n]` bias to every row of a `[m, n]` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, AutodiffError> {
        let rows = self.shape(x)[0];
        let b = self.broadcast(bias, rows)?;
        self.add(x, b)
    }

    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, AutodiffError> {
        let it = self.check(table)?;
        let shape = &self.nodes[it].shape;
        if shape.len() != 2 || ids.is_empty() {
            return Err(Self::mismatch("embedding_gather", shape, &[ids.len()]));
        }
        let (v, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(AutodiffError::IndexOutOfRange { op: "embedding_gather", index: bad, bound: v });
        }
        let src = &self.nodes[it].value;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        self.push("embedding_gather", vec![ids.len(), d], out, Op::Gather { table: it, ids: ids.to_vec() })
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, AutodiffError> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let n = last_dim(&self.nodes[ix].shape);
        for i in [ig, ib] {
            if self.nodes[i].value.len() != n {
                return Err(Self::mismatch("layernorm", &self.nodes[ix].shape, &self.nodes[i].shape));
            }
        }
        let xs = &self.nodes[ix].value;
        let (g, b) = (&self.nodes[ig].value, &self.nodes[ib].value);
        let mut out = vec![0.0; xs.len()];
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = Vec::with_capacity(xs.len() / n);
        for ((row, orow), hrow) in xs.chunks(n).zip(out.chunks_mut(n)).zip(xhat.chunks_mut(n)) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                hrow[j] = (row[j] - mean) * inv;
                orow[j] = hrow[j] * g[j] + b[j];
            }
            inv_std.push(inv);
        }
        let shape = self.nodes[ix].shape.clone();
        self.push("layernorm", shape, out, Op::LayerNorm { x: ix, gamma: ig, beta: ib, xhat, inv_std })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let ix = self.check(x)?;
        let out = self.nodes[ix].value.iter().map(|&v| gelu(v)).collect();
        let shape = self.nodes[ix].shape.clone();
        self.push("gelu", shape, out, Op::Gelu(ix))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let ix = self.check(x)?;
        let shape = self.nodes[ix].shape.clone();
        let out = softmax_rows(&self.nodes[ix].value, last_dim(&shape));
        self.push("softmax", shape, out, Op::Softmax(ix))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let ix = self.check(x)?;
        let shape = self.nodes[ix].shape.clone();
        let out = log_softmax_rows(&self.nodes[ix].value, last_dim(&shape));
        self.push("log_softmax", shape, out, Op::LogSoftmax(ix))
    }

    pub fn reduce_sum(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let ix = self.check(x)?;
        let s = self.nodes[ix].value.iter().sum();
        self.push("reduce_sum", vec![1], vec![s], Op::ReduceSum(ix))
    }

    pub fn reduce_mean(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push("reduce_mean", vec![1], vec![m], Op::ReduceMean(ix))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let ix = self.check(x)?;
        let shape = &self.nodes[ix].shape;
        if shape.len() != 2 {
            return Err(Self::mismatch("transpose", shape, &[]));
        }
        let (r, c) = (shape[0], shape[1]);
        let src = &self.nodes[ix].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push("transpose", vec![c, r], out, Op::Transpose { x: ix, rows: r, cols: c })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, AutodiffError> {
        let ix = self.check(x)?;
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel != self.nodes[ix].value.len() || shape.contains(&0) {
            return Err(Self::mismatch("reshape", &self.nodes[ix].shape, &shape));
        }
        let out = self.nodes[ix].value.clone();
        self.push("reshape", shape, out, Op::Reshape(ix))
    }

    /// Replaces masked entries with `value`; they receive no gradient.
    pub fn masked_fill(&mut self, x: Var, mask: Vec<bool>, value: f64) -> Result<Var, AutodiffError> {
        let ix = self.check(x)?;
        if mask.len() != self.nodes[ix].value.len() {
            return Err(Self::mismatch("masked_fill", &self.nodes[ix].shape, &[mask.len()]));
        }
        let out = self.nodes[ix].value.iter().zip(&mask).map(|(&v, &m)| if m { value } else { v }).collect();
        let shape = self.nodes[ix].shape.clone();
        self.push("masked_fill", shape, out, Op::MaskedFill { x: ix, mask })
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let ids = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>, _>>()?;
        let first = ids.first().ok_or(AutodiffError::Arity { op: "concat", expected: 1, got: 0 })?;
        let rows = self.nodes[*first].shape[0];
        let mut layout = Vec::with_capacity(ids.len());
        for &i in &ids {
            let s = &self.nodes[i].shape;
            if s.len() != 2 || s[0] != rows {
                return Err(Self::mismatch("concat", &self.nodes[*first].shape, s));
            }
            layout.push((i, s[1]));
        }
        let total: usize = layout.iter().map(|p| p.1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(i, c) in &layout {
                out.extend_from_slice(&self.nodes[i].value[r * c..(r + 1) * c]);
            }
        }
        self.push("concat", vec![rows, total], out, Op::Concat { parts: layout, rows })
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let il = self.check(loss)?;
        if self.nodes[il].value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss { shape: self.nodes[il].shape.clone() });
        }
        if !self.nodes[il].requires_grad {
            return Err(AutodiffError::Detached);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; il + 1];
        grads[il] = Some(vec![1.0]);
        for id in (0..=il).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for i in 0..*m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..*k {
                            ga[i * k + p] += dot(grow, &bv[p * n..(p + 1) * n]);
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for i in 0..*m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..*k {
                            let aip = av[i * k + p];
                            for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += aip * gv;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(o, v)| *o -= v);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((o, gv), y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gv * y;
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for ((o, gv), x) in gb.iter_mut().zip(g).zip(av) {
                        *o += gv * x;
                    }
                }
            }
            Op::Scale(x, f) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += v * f);
                }
            }
            Op::Broadcast(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    let n = gx.len();
                    for row in g.chunks(n) {
                        gx.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::Gather { table, ids } => {
                if let Some(gt) = slot(nodes, grads, *table) {
                    let d = last_dim(&nodes[*table].shape);
                    for (r, &i) in ids.iter().enumerate() {
                        for (o, v) in gt[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *o += v;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let n = last_dim(&node.shape);
                let gam = &nodes[*gamma].value;
                if let Some(gg) = slot(nodes, grads, *gamma) {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *beta) {
                    for grow in g.chunks(n) {
                        gb.iter_mut().zip(grow).for_each(|(o, v)| *o += v);
                    }
                }
                if let Some(gx) = slot(nodes, grads, *x) {
                    let mut dxhat = vec![0.0; n];
                    for (r, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        for j in 0..n {
                            dxhat[j] = grow[j] * gam[j];
                        }
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dh = dot(&dxhat, hrow);
                        let scale = inv_std[r] / n as f64;
                        for j in 0..n {
                            gx[r * n + j] += scale * (n as f64 * dxhat[j] - sum_d - hrow[j] * sum_dh);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = &nodes[*x].value;
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((o, gv), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *o += gv * gelu_grad(v);
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    let n = last_dim(&node.shape);
                    for ((orow, grow), yrow) in gx.chunks_mut(n).zip(g.chunks(n)).zip(node.value.chunks(n)) {
                        let s = dot(grow, yrow);
                        for j in 0..n {
                            orow[j] += yrow[j] * (grow[j] - s);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    let n = last_dim(&node.shape);
                    for ((orow, grow), yrow) in gx.chunks_mut(n).zip(g.chunks(n)).zip(node.value.chunks(n)) {
                        let s: f64 = grow.iter().sum();
                        for j in 0..n {
                            orow[j] += grow[j] - yrow[j].exp() * s;
                        }
                    }
                }
            }
            Op::ReduceSum(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::ReduceMean(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    let d = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|o| *o += d);
                }
            }
            Op::Transpose { x, rows, cols } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for i in 0..*rows {
                        for j in 0..*cols {
                            gx[i * cols + j] += g[j * rows + i];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
            }
            Op::MaskedFill { x, mask } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((o, v), &m) in gx.iter_mut().zip(g).zip(mask) {
                        if !m {
                            *o += v;
                        }
                    }
                }
            }
            Op::Concat { parts, rows } => {
                let total = last_dim(&node.shape);
                let mut offset = 0;
                for &(i, c) in parts {
                    if let Some(gi) = slot(nodes, grads, i) {
                        for r in 0..*rows {
                            let src = &g[r * total + offset..r * total + offset + c];
                            gi[r * c..(r + 1) * c].iter_mut().zip(src).for_each(|(o, v)| *o += v);
                        }
                    }
                    offset += c;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(t: &mut Tape, shape: Vec<usize>, data: Vec<f64>) -> Var {
        t.leaf(&Tensor::new(shape, data).unwrap(), true).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let a = leaf(&mut t, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let i = leaf(&mut t, vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let c = t.matmul(a, i).unwrap();
        assert_eq!(t.value(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_op_and_shapes() {
        let mut t = Tape::new();
        let a = leaf(&mut t, vec![2, 3], vec![0.0; 6]);
        let b = leaf(&mut t, vec![2, 3], vec![0.0; 6]);
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_symmetric() {
        let mut t = Tape::new();
        let x = leaf(&mut t, vec![2], vec![0.0, 0.0]);
        let s = t.softmax(x).unwrap();
        assert_eq!(t.value(s), &[0.5, 0.5]);
    }

    #[test]
    fn layernorm_constant_row_yields_bias() {
        let mut t = Tape::new();
        let x = leaf(&mut t, vec![1, 4], vec![3.0; 4]);
        let g = leaf(&mut t, vec![4], vec![2.0; 4]);
        let b = leaf(&mut t, vec![4], vec![0.1, 0.2, 0.3, 0.4]);
        let y = t.layernorm(x, g, b, 1e-5).unwrap();
        assert_eq!(t.value(y), &[0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let x = leaf(&mut t, vec![3], vec![1.0, -2.0, 5.0]);
        let s = t.reduce_sum(x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = leaf(&mut t, vec![2], vec![1.0, 2.0]);
        let xx = t.mul(x, x).unwrap();
        let s = t.reduce_sum(xx).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = leaf(&mut t, vec![2], vec![1.0, 2.0]);
        assert!(matches!(t.backward(x), Err(AutodiffError::NonScalarLoss { .. })));
    }

    #[test]
    fn foreign_or_constant_loss_is_detached() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let x = leaf(&mut t1, vec![1], vec![1.0]);
        let _ = leaf(&mut t2, vec![1], vec![1.0]);
        assert!(matches!(t2.backward(x), Err(AutodiffError::Detached)));
        let c = t2.constant(vec![1], vec![2.0]).unwrap();
        assert!(matches!(t2.backward(c), Err(AutodiffError::Detached)));
    }

    #[test]
    fn inputs_precede_outputs() {
        let mut t = Tape::new();
        let x = leaf(&mut t, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = t.transpose(x).unwrap();
        let z = t.matmul(x, y).unwrap();
        let _ = t.log_softmax(z).unwrap();
        for id in 0..t.len() {
            assert!(t.node_inputs(id).iter().all(|&i| i < id));
        }
    }

    #[test]
    fn masked_fill_blocks_gradient() {
        let mut t = Tape::new();
        let x = leaf(&mut t, vec![3], vec![1.0, 2.0, 3.0]);
        let y = t.masked_fill(x, vec![false, true, false], -1e30).unwrap();
        assert_eq!(t.value(y)[1], -1e30);
        let s = t.softmax(y).unwrap();
        let w = t.constant(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let p = t.mul(s, w).unwrap();
        let l = t.reduce_sum(p).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap()[1], 0.0);
    }
}
