//! Reverse-mode automatic differentiation over a recorded primitive tape.
//!
//! Every forward primitive appends one node (output value + op id + input
//! node ids) to the [`Tape`]. Node ids are handed out in creation order, so
//! the record is topologically sorted by construction and the backward sweep
//! visits each node exactly once, in reverse.
//!
//! Two reductions are accumulated in sorted value order rather than index
//! order: the softmax normalizer and the token sums of [`Tape::dispatch`].
//! Sorting makes those results invariant to permutations of the reduced
//! axis, which the layer-level equivariance contracts rely on.
//!
//! Every primitive validates its output for non-finite values and fails
//! loudly instead of letting a NaN propagate.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    Softmax { x: NodeId, axis: usize },
    LogSoftmax { x: NodeId, axis: usize },
    Gelu(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    Transpose(NodeId),
    Reshape(NodeId),
    ConcatRows(Vec<NodeId>),
    Sum(NodeId),
    Mean(NodeId),
    L2NormalizeRows(NodeId),
    GatherRows { x: NodeId, idx: Vec<usize> },
    ScaleRows { x: NodeId, scale: NodeId },
    Dispatch { tokens: NodeId, weights: NodeId },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op,
    needs_grad: bool,
}

/// The computation record: an append-only list of primitive applications.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

/// Gradients produced by a backward sweep, indexed by node id.
pub struct Gradients<S: Scalar> {
    entries: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.entries.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a node, materializing exact zeros for untouched leaves.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor<S> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

// GELU tanh approximation, exact enough for f64 gradient checks at 1e-4.
fn gelu_value<S: Scalar>(x: S) -> S {
    let half = S::from_f64(0.5);
    let c = S::from_f64(0.7978845608028654); // sqrt(2/pi)
    let k = S::from_f64(0.044715);
    let inner = c * (x + k * x * x * x);
    half * x * (S::one() + inner.tanh())
}

fn gelu_derivative<S: Scalar>(x: S) -> S {
    let half = S::from_f64(0.5);
    let c = S::from_f64(0.7978845608028654);
    let k = S::from_f64(0.044715);
    let three = S::from_f64(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = S::one() - t * t;
    let d_inner = c * (S::one() + three * k * x * x);
    half * (S::one() + t) + half * x * sech2 * d_inner
}

/// Sum in ascending value order. Permutation-invariant for finite inputs.
fn sorted_sum<S: Scalar>(terms: &mut [S]) -> S {
    terms.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let mut acc = S::zero();
    for &t in terms.iter() {
        acc = acc + t;
    }
    acc
}

fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    // ikj order keeps the inner loop contiguous in b and out.
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] = out_row[j] + aip * b_row[j];
            }
        }
    }
}

/// Decompose a shape around `axis` into (outer, axis_len, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Record a leaf. Whether it can receive a gradient follows the tensor's
    /// `requires_grad` flag.
    pub fn leaf(&mut self, value: Tensor<S>) -> NodeId {
        let needs = value.requires_grad;
        self.push_unchecked(value, Op::Leaf, needs)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, mut value: Tensor<S>) -> NodeId {
        value.requires_grad = false;
        self.push_unchecked(value, Op::Leaf, false)
    }

    fn push_unchecked(&mut self, value: Tensor<S>, op: Op, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op, needs_grad });
        id
    }

    fn push(&mut self, op_name: &'static str, data: Vec<S>, shape: Vec<usize>, op: Op) -> Result<NodeId> {
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name, index });
        }
        let needs = self.op_inputs(&op).iter().any(|id| self.nodes[id.0].needs_grad);
        let numel: usize = shape.iter().product();
        debug_assert_eq!(numel, data.len());
        let value = Tensor::new(shape, data)?;
        Ok(self.push_unchecked(value, op, needs))
    }

    fn op_inputs(&self, op: &Op) -> Vec<NodeId> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) => {
                vec![*a, *b]
            }
            Op::AddScalar(x)
            | Op::MulScalar(x, _)
            | Op::Softmax { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::Gelu(x)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::L2NormalizeRows(x)
            | Op::GatherRows { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ConcatRows(xs) => xs.clone(),
            Op::ScaleRows { x, scale } => vec![*x, *scale],
            Op::Dispatch { tokens, weights } => vec![*tokens, *weights],
        }
    }

    // ── forward primitives ─────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![S::zero(); m * n];
        matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        self.push("matmul", out, vec![m, n], Op::MatMul(a, b))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(S, S) -> S,
        op: Op,
    ) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(name, out, shape, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Add a length-`n` bias vector to every row of an `m x n` tensor.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        if self.shape(bias) != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data().to_vec();
        let out: Vec<S> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % n])
            .collect();
        self.push("add_bias", out, vec![m, n], Op::AddBias(x, bias))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let cs = S::from_f64(c);
        let out: Vec<S> = self.value(x).data().iter().map(|&v| v + cs).collect();
        let shape = self.shape(x).to_vec();
        self.push("add_scalar", out, shape, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let cs = S::from_f64(c);
        let out: Vec<S> = self.value(x).data().iter().map(|&v| v * cs).collect();
        let shape = self.shape(x).to_vec();
        self.push("mul_scalar", out, shape, Op::MulScalar(x, c))
    }

    /// Numerically stable softmax along `axis`. Slices sum to one within
    /// 1e-12; the normalizer is accumulated in sorted order.
    pub fn softmax_along(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::BadShape {
                op: "softmax_along",
                shape,
                reason: format!("axis {axis} out of range"),
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let data = self.value(x).data();
        let mut out = vec![S::zero(); data.len()];
        let mut scratch = vec![S::zero(); len];
        for o in 0..outer {
            for i in 0..inner {
                let index = |a: usize| (o * len + a) * inner + i;
                let mut hi = data[index(0)];
                for a in 1..len {
                    let v = data[index(a)];
                    if v > hi {
                        hi = v;
                    }
                }
                for a in 0..len {
                    let e = (data[index(a)] - hi).exp();
                    out[index(a)] = e;
                    scratch[a] = e;
                }
                let denom = sorted_sum(&mut scratch);
                for a in 0..len {
                    out[index(a)] = out[index(a)] / denom;
                }
            }
        }
        self.push("softmax_along", out, shape, Op::Softmax { x, axis })
    }

    /// `log(softmax(x))` along `axis`, computed as `x - max - log(sum(exp))`.
    pub fn log_softmax_along(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::BadShape {
                op: "log_softmax_along",
                shape,
                reason: format!("axis {axis} out of range"),
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let data = self.value(x).data();
        let mut out = vec![S::zero(); data.len()];
        let mut scratch = vec![S::zero(); len];
        for o in 0..outer {
            for i in 0..inner {
                let index = |a: usize| (o * len + a) * inner + i;
                let mut hi = data[index(0)];
                for a in 1..len {
                    let v = data[index(a)];
                    if v > hi {
                        hi = v;
                    }
                }
                for a in 0..len {
                    scratch[a] = (data[index(a)] - hi).exp();
                }
                let lse = sorted_sum(&mut scratch).ln();
                for a in 0..len {
                    out[index(a)] = data[index(a)] - hi - lse;
                }
            }
        }
        self.push("log_softmax_along", out, shape, Op::LogSoftmax { x, axis })
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let out: Vec<S> = self.value(x).data().iter().map(|&v| gelu_value(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push("gelu", out, shape, Op::Gelu(x))
    }

    /// Layer normalization over the last axis of a rank-2 tensor, with
    /// learnable per-feature gain and shift.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let data = self.value(x).data();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let nf = S::from_f64(n as f64);
        let epss = S::from_f64(eps);
        let mut out = vec![S::zero(); m * n];
        for r in 0..m {
            let row = &data[r * n..(r + 1) * n];
            let mut mean = S::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean / nf;
            let mut var = S::zero();
            for &v in row {
                let d = v - mean;
                var = var + d * d;
            }
            var = var / nf;
            let inv_std = (var + epss).sqrt().recip();
            for j in 0..n {
                out[r * n + j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        self.push("layer_norm", out, vec![m, n], Op::LayerNorm { x, gamma, beta, eps })
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        let data = self.value(x).data();
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = data[i * n + j];
            }
        }
        self.push("transpose", out, vec![n, m], Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::BadShape {
                op: "reshape",
                shape,
                reason: format!("incompatible with {:?}", self.shape(x)),
            });
        }
        let data = self.value(x).data().to_vec();
        self.push("reshape", data, shape, Op::Reshape(x))
    }

    /// Stack rank-2 tensors with equal column counts along the row axis.
    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::InvalidArgument("concat_rows: no inputs".into()));
        }
        let (_, n) = self.value(xs[0]).dims2()?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &x in xs {
            let (m, n2) = self.value(x).dims2()?;
            if n2 != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(xs[0]).to_vec(),
                    rhs: self.shape(x).to_vec(),
                });
            }
            rows += m;
            out.extend_from_slice(self.value(x).data());
        }
        self.push("concat_rows", out, vec![rows, n], Op::ConcatRows(xs.to_vec()))
    }

    /// Sum of all entries, as a shape `[1]` scalar node.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let mut acc = S::zero();
        for &v in self.value(x).data() {
            acc = acc + v;
        }
        self.push("sum", vec![acc], vec![1], Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let numel = self.value(x).numel();
        let mut acc = S::zero();
        for &v in self.value(x).data() {
            acc = acc + v;
        }
        let out = acc / S::from_f64(numel as f64);
        self.push("mean", vec![out], vec![1], Op::Mean(x))
    }

    /// Scale every row of a rank-2 tensor to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        let data = self.value(x).data();
        let mut out = vec![S::zero(); m * n];
        for r in 0..m {
            let row = &data[r * n..(r + 1) * n];
            let mut sq = S::zero();
            for &v in row {
                sq = sq + v * v;
            }
            if sq == S::zero() {
                return Err(Error::InvalidArgument(format!(
                    "l2_normalize_rows: row {r} has zero norm"
                )));
            }
            let inv = sq.sqrt().recip();
            for j in 0..n {
                out[r * n + j] = row[j] * inv;
            }
        }
        self.push("l2_normalize_rows", out, vec![m, n], Op::L2NormalizeRows(x))
    }

    /// Select rows by index (duplicates allowed); backward scatter-adds.
    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        if idx.is_empty() {
            return Err(Error::InvalidArgument("gather_rows: empty index list".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::InvalidArgument(format!(
                "gather_rows: index {bad} out of range for {m} rows"
            )));
        }
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&data[i * n..(i + 1) * n]);
        }
        self.push(
            "gather_rows",
            out,
            vec![idx.len(), n],
            Op::GatherRows { x, idx: idx.to_vec() },
        )
    }

    /// Multiply row `i` of `x` by `scale[i]`.
    pub fn scale_rows(&mut self, x: NodeId, scale: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        if self.shape(scale) != [m] {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(scale).to_vec(),
            });
        }
        let s = self.value(scale).data().to_vec();
        let data = self.value(x).data();
        let mut out = vec![S::zero(); m * n];
        for r in 0..m {
            for j in 0..n {
                out[r * n + j] = data[r * n + j] * s[r];
            }
        }
        self.push("scale_rows", out, vec![m, n], Op::ScaleRows { x, scale })
    }

    /// Weighted compression of `m` token rows into one slot per column of
    /// `weights`: `out[e, :] = sum_j weights[j, e] * tokens[j, :]`.
    ///
    /// The token sum is accumulated in sorted value order, so permuting the
    /// token rows (together with the matching weight rows) reproduces the
    /// exact same slots.
    pub fn dispatch(&mut self, tokens: NodeId, weights: NodeId) -> Result<NodeId> {
        let (m, c) = self.value(tokens).dims2()?;
        let (m2, e) = self.value(weights).dims2()?;
        if m != m2 {
            return Err(Error::ShapeMismatch {
                op: "dispatch",
                lhs: self.shape(tokens).to_vec(),
                rhs: self.shape(weights).to_vec(),
            });
        }
        let t = self.value(tokens).data();
        let w = self.value(weights).data();
        let mut out = vec![S::zero(); e * c];
        let mut terms = vec![S::zero(); m];
        for slot in 0..e {
            for col in 0..c {
                for j in 0..m {
                    terms[j] = w[j * e + slot] * t[j * c + col];
                }
                out[slot * c + col] = sorted_sum(&mut terms);
            }
        }
        self.push("dispatch", out, vec![e, c], Op::Dispatch { tokens, weights })
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<S>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_seeded(&[(loss, Tensor::scalar(S::one()))])
    }

    /// Reverse sweep from explicit upstream gradients. Used when the loss
    /// for a batch lives on a different tape than the per-sample forward.
    pub fn backward_seeded(&self, seeds: &[(NodeId, Tensor<S>)]) -> Result<Gradients<S>> {
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut start = 0;
        for (id, seed) in seeds {
            if seed.shape() != self.shape(*id) {
                return Err(Error::ShapeMismatch {
                    op: "backward_seeded",
                    lhs: seed.shape().to_vec(),
                    rhs: self.shape(*id).to_vec(),
                });
            }
            accumulate(&mut grads[id.0], seed.clone());
            start = start.max(id.0);
        }
        for i in (0..=start).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.apply_backward(NodeId(i), &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { entries: grads })
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn apply_backward(&self, id: NodeId, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[id.0];
        match &node.op {
            Op::Leaf => {}

            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    // da = g . b^T
                    let bd = self.value(*b).data();
                    let mut da = vec![S::zero(); m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = S::zero();
                            for j in 0..n {
                                acc = acc + g.data()[i * n + j] * bd[p * n + j];
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    add_into(grads, *a, vec![m, k], da);
                }
                if self.needs(*b) {
                    // db = a^T . g
                    let ad = self.value(*a).data();
                    let mut db = vec![S::zero(); k * n];
                    for p in 0..k {
                        for i in 0..m {
                            let aip = ad[i * k + p];
                            if aip == S::zero() {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] = db[p * n + j] + aip * g.data()[i * n + j];
                            }
                        }
                    }
                    add_into(grads, *b, vec![k, n], db);
                }
            }

            Op::Add(a, b) => {
                if self.needs(*a) {
                    add_into(grads, *a, g.shape().to_vec(), g.data().to_vec());
                }
                if self.needs(*b) {
                    add_into(grads, *b, g.shape().to_vec(), g.data().to_vec());
                }
            }

            Op::Sub(a, b) => {
                if self.needs(*a) {
                    add_into(grads, *a, g.shape().to_vec(), g.data().to_vec());
                }
                if self.needs(*b) {
                    let neg: Vec<S> = g.data().iter().map(|&v| -v).collect();
                    add_into(grads, *b, g.shape().to_vec(), neg);
                }
            }

            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let da: Vec<S> = g
                        .data()
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    add_into(grads, *a, g.shape().to_vec(), da);
                }
                if self.needs(*b) {
                    let db: Vec<S> = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    add_into(grads, *b, g.shape().to_vec(), db);
                }
            }

            Op::AddBias(x, bias) => {
                let (m, n) = self.value(*x).dims2().unwrap();
                if self.needs(*x) {
                    add_into(grads, *x, vec![m, n], g.data().to_vec());
                }
                if self.needs(*bias) {
                    let mut db = vec![S::zero(); n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] = db[j] + g.data()[i * n + j];
                        }
                    }
                    add_into(grads, *bias, vec![n], db);
                }
            }

            Op::AddScalar(x) => {
                if self.needs(*x) {
                    add_into(grads, *x, g.shape().to_vec(), g.data().to_vec());
                }
            }

            Op::MulScalar(x, c) => {
                if self.needs(*x) {
                    let cs = S::from_f64(*c);
                    let dx: Vec<S> = g.data().iter().map(|&v| v * cs).collect();
                    add_into(grads, *x, g.shape().to_vec(), dx);
                }
            }

            Op::Softmax { x, axis } => {
                if !self.needs(*x) {
                    return;
                }
                let shape = self.shape(id).to_vec();
                let (outer, len, inner) = axis_split(&shape, *axis);
                let y = self.value(id).data();
                let mut dx = vec![S::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let index = |a: usize| (o * len + a) * inner + i;
                        let mut dot = S::zero();
                        for a in 0..len {
                            dot = dot + g.data()[index(a)] * y[index(a)];
                        }
                        for a in 0..len {
                            dx[index(a)] = y[index(a)] * (g.data()[index(a)] - dot);
                        }
                    }
                }
                add_into(grads, *x, shape, dx);
            }

            Op::LogSoftmax { x, axis } => {
                if !self.needs(*x) {
                    return;
                }
                let shape = self.shape(id).to_vec();
                let (outer, len, inner) = axis_split(&shape, *axis);
                let y = self.value(id).data();
                let mut dx = vec![S::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let index = |a: usize| (o * len + a) * inner + i;
                        let mut gsum = S::zero();
                        for a in 0..len {
                            gsum = gsum + g.data()[index(a)];
                        }
                        for a in 0..len {
                            dx[index(a)] = g.data()[index(a)] - y[index(a)].exp() * gsum;
                        }
                    }
                }
                add_into(grads, *x, shape, dx);
            }

            Op::Gelu(x) => {
                if !self.needs(*x) {
                    return;
                }
                let dx: Vec<S> = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gv, &xv)| gv * gelu_derivative(xv))
                    .collect();
                add_into(grads, *x, g.shape().to_vec(), dx);
            }

            Op::LayerNorm { x, gamma, beta, eps } => {
                let (m, n) = self.value(*x).dims2().unwrap();
                let xd = self.value(*x).data();
                let gd = self.value(*gamma).data();
                let nf = S::from_f64(n as f64);
                let epss = S::from_f64(*eps);
                let mut dx = vec![S::zero(); m * n];
                let mut dgamma = vec![S::zero(); n];
                let mut dbeta = vec![S::zero(); n];
                for r in 0..m {
                    let row = &xd[r * n..(r + 1) * n];
                    let grow = &g.data()[r * n..(r + 1) * n];
                    let mut mean = S::zero();
                    for &v in row {
                        mean = mean + v;
                    }
                    mean = mean / nf;
                    let mut var = S::zero();
                    for &v in row {
                        let d = v - mean;
                        var = var + d * d;
                    }
                    var = var / nf;
                    let inv_std = (var + epss).sqrt().recip();
                    let xhat: Vec<S> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                    let dxhat: Vec<S> = grow.iter().zip(gd).map(|(&gv, &gam)| gv * gam).collect();
                    let mut dxhat_sum = S::zero();
                    let mut dxhat_dot = S::zero();
                    for j in 0..n {
                        dgamma[j] = dgamma[j] + grow[j] * xhat[j];
                        dbeta[j] = dbeta[j] + grow[j];
                        dxhat_sum = dxhat_sum + dxhat[j];
                        dxhat_dot = dxhat_dot + dxhat[j] * xhat[j];
                    }
                    for j in 0..n {
                        dx[r * n + j] =
                            inv_std / nf * (nf * dxhat[j] - dxhat_sum - xhat[j] * dxhat_dot);
                    }
                }
                if self.needs(*x) {
                    add_into(grads, *x, vec![m, n], dx);
                }
                if self.needs(*gamma) {
                    add_into(grads, *gamma, vec![n], dgamma);
                }
                if self.needs(*beta) {
                    add_into(grads, *beta, vec![n], dbeta);
                }
            }

            Op::Transpose(x) => {
                if !self.needs(*x) {
                    return;
                }
                let (n, m) = self.value(id).dims2().unwrap();
                let mut dx = vec![S::zero(); m * n];
                for i in 0..n {
                    for j in 0..m {
                        dx[j * n + i] = g.data()[i * m + j];
                    }
                }
                add_into(grads, *x, vec![m, n], dx);
            }

            Op::Reshape(x) => {
                if self.needs(*x) {
                    add_into(grads, *x, self.shape(*x).to_vec(), g.data().to_vec());
                }
            }

            Op::ConcatRows(xs) => {
                let n = self.shape(id)[1];
                let mut offset = 0;
                for &x in xs {
                    let rows = self.shape(x)[0];
                    if self.needs(x) {
                        let part = g.data()[offset * n..(offset + rows) * n].to_vec();
                        add_into(grads, x, vec![rows, n], part);
                    }
                    offset += rows;
                }
            }

            Op::Sum(x) => {
                if self.needs(*x) {
                    let gv = g.data()[0];
                    let dx = vec![gv; self.value(*x).numel()];
                    add_into(grads, *x, self.shape(*x).to_vec(), dx);
                }
            }

            Op::Mean(x) => {
                if self.needs(*x) {
                    let numel = self.value(*x).numel();
                    let gv = g.data()[0] / S::from_f64(numel as f64);
                    let dx = vec![gv; numel];
                    add_into(grads, *x, self.shape(*x).to_vec(), dx);
                }
            }

            Op::L2NormalizeRows(x) => {
                if !self.needs(*x) {
                    return;
                }
                let (m, n) = self.value(*x).dims2().unwrap();
                let xd = self.value(*x).data();
                let y = self.value(id).data();
                let mut dx = vec![S::zero(); m * n];
                for r in 0..m {
                    let row = &xd[r * n..(r + 1) * n];
                    let yrow = &y[r * n..(r + 1) * n];
                    let grow = &g.data()[r * n..(r + 1) * n];
                    let mut sq = S::zero();
                    for &v in row {
                        sq = sq + v * v;
                    }
                    let inv = sq.sqrt().recip();
                    let mut dot = S::zero();
                    for j in 0..n {
                        dot = dot + grow[j] * yrow[j];
                    }
                    for j in 0..n {
                        dx[r * n + j] = (grow[j] - yrow[j] * dot) * inv;
                    }
                }
                add_into(grads, *x, vec![m, n], dx);
            }

            Op::GatherRows { x, idx } => {
                if !self.needs(*x) {
                    return;
                }
                let (m, n) = self.value(*x).dims2().unwrap();
                let mut dx = vec![S::zero(); m * n];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        dx[i * n + j] = dx[i * n + j] + g.data()[k * n + j];
                    }
                }
                add_into(grads, *x, vec![m, n], dx);
            }

            Op::ScaleRows { x, scale } => {
                let (m, n) = self.value(*x).dims2().unwrap();
                let sd = self.value(*scale).data();
                let xd = self.value(*x).data();
                if self.needs(*x) {
                    let mut dx = vec![S::zero(); m * n];
                    for r in 0..m {
                        for j in 0..n {
                            dx[r * n + j] = g.data()[r * n + j] * sd[r];
                        }
                    }
                    add_into(grads, *x, vec![m, n], dx);
                }
                if self.needs(*scale) {
                    let mut ds = vec![S::zero(); m];
                    for r in 0..m {
                        let mut acc = S::zero();
                        for j in 0..n {
                            acc = acc + g.data()[r * n + j] * xd[r * n + j];
                        }
                        ds[r] = acc;
                    }
                    add_into(grads, *scale, vec![m], ds);
                }
            }

            Op::Dispatch { tokens, weights } => {
                let (m, c) = self.value(*tokens).dims2().unwrap();
                let e = self.shape(*weights)[1];
                let td = self.value(*tokens).data();
                let wd = self.value(*weights).data();
                if self.needs(*tokens) {
                    let mut dt = vec![S::zero(); m * c];
                    for j in 0..m {
                        for slot in 0..e {
                            let w = wd[j * e + slot];
                            if w == S::zero() {
                                continue;
                            }
                            for col in 0..c {
                                dt[j * c + col] = dt[j * c + col] + w * g.data()[slot * c + col];
                            }
                        }
                    }
                    add_into(grads, *tokens, vec![m, c], dt);
                }
                if self.needs(*weights) {
                    let mut dw = vec![S::zero(); m * e];
                    for j in 0..m {
                        for slot in 0..e {
                            let mut acc = S::zero();
                            for col in 0..c {
                                acc = acc + td[j * c + col] * g.data()[slot * c + col];
                            }
                            dw[j * e + slot] = acc;
                        }
                    }
                    add_into(grads, *weights, vec![m, e], dw);
                }
            }
        }
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Tensor<S>>, g: Tensor<S>) {
    match slot {
        None => *slot = Some(g),
        Some(existing) => {
            for (a, &b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a = *a + b;
            }
        }
    }
}

fn add_into<S: Scalar>(grads: &mut [Option<Tensor<S>>], id: NodeId, shape: Vec<usize>, data: Vec<S>) {
    let tensor = Tensor::new(shape, data).expect("gradient buffer");
    accumulate(&mut grads[id.0], tensor);
}
