//! Reverse-mode automatic differentiation over a fixed operation set.
//!
//! A [`Graph`] records every forward operation eagerly as a node holding its
//! output tensor, its parents, and the opcode needed to push gradients back.
//! Calling [`Graph::backward`] on a scalar loss walks the recorded nodes in
//! reverse topological order (creation order is already topological) and
//! accumulates d(loss)/d(node) for every node on a path to a trainable leaf.
//!
//! The op set is deliberately closed: matrix products, broadcast add and
//! multiply, GELU, softmax, layer norm, embedding lookup, masked
//! cross-entropy, exp and log, L2 normalization, reductions, and a few shape
//! movements (reshape, head split and merge, row selection). Each graph is
//! single-threaded; independent graphs may run on independent threads.

use std::sync::Arc;

use thiserror::Error;

use super::kernels;
use super::tensor::Tensor;

/// Handle to a node inside one specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Reduction applied by the cross-entropy op.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CeReduction {
    /// Mean over positions weighted by the mask.
    Mean,
    /// Raw masked sum, for callers that divide by a global count themselves.
    Sum,
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

enum Op {
    Leaf { param: bool },
    Add,
    Mul,
    Scale(f32),
    AddScalar,
    Matmul { transpose_b: bool },
    Gelu,
    Exp,
    Ln,
    SumAll,
    MeanAll,
    SoftmaxLast,
    LayerNormLast { eps: f32 },
    L2NormalizeLast { eps: f32 },
    Embedding { ids: Arc<Vec<u32>> },
    CrossEntropy { targets: Arc<Vec<u32>>, mask: Arc<Vec<f32>>, probs: Tensor, reduction: CeReduction },
    Reshape,
    SplitHeads,
    MergeHeads,
    SelectPos { pos: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    parents: Vec<Var>,
    needs_grad: bool,
}

/// Eagerly evaluated computation graph with reverse-mode gradients.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: Vec<Var>) -> Var {
        let needs_grad = match op {
            Op::Leaf { param } => param,
            _ => parents.iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node { value, op, parents, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf { param: false }, vec![])
    }

    /// Leaf that accumulates a gradient during backward.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf { param: true }, vec![])
    }

    /// Leaf whose role follows the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let param = t.requires_grad;
        self.push(t, Op::Leaf { param }, vec![])
    }

    #[must_use]
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if one flowed there.
    #[must_use]
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Graph::grad`] but materializes zeros for untouched leaves.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        match self.grad(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[v.0].value.shape().to_vec()),
        }
    }

    // ---- elementwise and broadcast ops ----

    /// `a + b`, with `b` broadcast right-aligned against `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_combine(self.value(a), self.value(b), |x, y| x + y);
        self.push(value, Op::Add, vec![a, b])
    }

    /// `a * b` elementwise, with `b` broadcast right-aligned against `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_combine(self.value(a), self.value(b), |x, y| x * y);
        self.push(value, Op::Mul, vec![a, b])
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale(c), vec![a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push(value, Op::AddScalar, vec![a])
    }

    /// `a - b` as a composite of negate and add.
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(kernels::gelu);
        self.push(value, Op::Gelu, vec![a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(libm::expf);
        self.push(value, Op::Exp, vec![a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(libm::logf);
        self.push(value, Op::Ln, vec![a])
    }

    // ---- matrix products ----

    /// Matrix product. Both operands must be rank >= 2 with identical leading
    /// (batch) dimensions; the product runs over the trailing two.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = matmul_forward(self.value(a), self.value(b), false);
        self.push(value, Op::Matmul { transpose_b: false }, vec![a, b])
    }

    /// Matrix product against the transpose of `b`'s trailing two dims.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = matmul_forward(self.value(a), self.value(b), true);
        self.push(value, Op::Matmul { transpose_b: true }, vec![a, b])
    }

    // ---- normalization and rowwise ops ----

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let last = *t.shape().last().expect("softmax_last on scalar");
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(last) {
            kernels::softmax_row(row);
        }
        let value = Tensor::new(t.shape().to_vec(), data);
        self.push(value, Op::SoftmaxLast, vec![a])
    }

    /// Layer normalization over the last axis, no affine part.
    pub fn layer_norm(&mut self, a: Var, eps: f32) -> Var {
        let t = self.value(a);
        let last = *t.shape().last().expect("layer_norm on scalar");
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(last) {
            let mean = row.iter().sum::<f32>() / last as f32;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f32>() / last as f32;
            let inv = 1.0 / libm::sqrtf(var + eps);
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data);
        self.push(value, Op::LayerNormLast { eps }, vec![a])
    }

    /// Rows rescaled to unit Euclidean norm (norms below `eps` are clamped).
    pub fn l2_normalize(&mut self, a: Var, eps: f32) -> Var {
        let t = self.value(a);
        let last = *t.shape().last().expect("l2_normalize on scalar");
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(last) {
            let norm = libm::sqrtf(row.iter().map(|&x| x * x).sum::<f32>()).max(eps);
            for x in row.iter_mut() {
                *x /= norm;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data);
        self.push(value, Op::L2NormalizeLast { eps }, vec![a])
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f32 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll, vec![a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: f32 = t.data().iter().sum();
        let value = Tensor::scalar(s / t.numel() as f32);
        self.push(value, Op::MeanAll, vec![a])
    }

    /// Mean squared difference, composed from primitive ops.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    // ---- lookups and losses ----

    /// Gathers `ids` rows out of a `[vocab, dim]` table into `[len, dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Var {
        let t = self.value(table);
        assert_eq!(t.shape().len(), 2, "embedding table must be [vocab, dim]");
        let (vocab, dim) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            let id = id as usize;
            assert!(id < vocab, "embedding id {id} out of range {vocab}");
            data.extend_from_slice(&t.data()[id * dim..(id + 1) * dim]);
        }
        let value = Tensor::new(vec![ids.len(), dim], data);
        self.push(value, Op::Embedding { ids: Arc::new(ids.to_vec()) }, vec![table])
    }

    /// Masked cross-entropy over `[rows, classes]` logits.
    ///
    /// With [`CeReduction::Mean`] the result is the mask-weighted mean of the
    /// per-row negative log-likelihoods; with [`CeReduction::Sum`] the raw
    /// weighted sum, which shard-parallel trainers rescale themselves.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u32],
        mask: &[f32],
        reduction: CeReduction,
    ) -> Var {
        let t = self.value(logits);
        assert_eq!(t.shape().len(), 2, "cross_entropy expects [rows, classes]");
        let (rows, classes) = (t.shape()[0], t.shape()[1]);
        assert_eq!(targets.len(), rows, "one target per row");
        assert_eq!(mask.len(), rows, "one mask weight per row");
        let mask_sum: f32 = mask.iter().sum();
        assert!(mask_sum > 0.0, "cross_entropy mask selects nothing");

        let mut probs = vec![0.0f32; rows * classes];
        let mut loss = 0.0f32;
        for r in 0..rows {
            let row = &t.data()[r * classes..(r + 1) * classes];
            let target = targets[r] as usize;
            assert!(target < classes, "target {target} out of range {classes}");
            let lse = kernels::logsumexp_row(row);
            loss += mask[r] * (lse - row[target]);
            let p = &mut probs[r * classes..(r + 1) * classes];
            for (dst, &l) in p.iter_mut().zip(row.iter()) {
                *dst = libm::expf(l - lse);
            }
        }
        if reduction == CeReduction::Mean {
            loss /= mask_sum;
        }
        let op = Op::CrossEntropy {
            targets: Arc::new(targets.to_vec()),
            mask: Arc::new(mask.to_vec()),
            probs: Tensor::new(vec![rows, classes], probs),
            reduction,
        };
        self.push(Tensor::scalar(loss), op, vec![logits])
    }

    // ---- shape movement ----

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Var {
        let value = self.value(a).reshaped(shape);
        self.push(value, Op::Reshape, vec![a])
    }

    /// `[batch, seq, heads*dim] -> [batch, heads, seq, dim]`.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Var {
        let t = self.value(a);
        let s = t.shape();
        assert_eq!(s.len(), 3, "split_heads expects rank 3");
        assert_eq!(s[2] % heads, 0, "model dim {} not divisible by {heads} heads", s[2]);
        let value = split_heads_raw(t, heads);
        self.push(value, Op::SplitHeads, vec![a])
    }

    /// `[batch, heads, seq, dim] -> [batch, seq, heads*dim]`.
    pub fn merge_heads(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert_eq!(t.shape().len(), 4, "merge_heads expects rank 4");
        let value = merge_heads_raw(t);
        self.push(value, Op::MergeHeads, vec![a])
    }

    /// Selects index `pos` of the middle axis: `[b, t, d] -> [b, d]`.
    pub fn select_pos(&mut self, a: Var, pos: usize) -> Var {
        let t = self.value(a);
        let s = t.shape();
        assert_eq!(s.len(), 3, "select_pos expects rank 3");
        assert!(pos < s[1], "position {pos} out of range {}", s[1]);
        let (b, t_len, d) = (s[0], s[1], s[2]);
        let mut data = Vec::with_capacity(b * d);
        for bi in 0..b {
            let off = (bi * t_len + pos) * d;
            data.extend_from_slice(&t.data()[off..off + d]);
        }
        let value = Tensor::new(vec![b, d], data);
        self.push(value, Op::SelectPos { pos }, vec![a])
    }

    // ---- backward ----

    /// Accumulates d(loss)/d(node) for every node that can reach a trainable
    /// leaf. `loss` must be scalar.
    pub fn backward(&mut self, loss: Var) -> Result<(), GraphError> {
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(GraphError::NonScalarLoss(shape));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::new(shape, vec![1.0]));

        for id in (0..=loss.0).rev() {
            if self.grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let grad_out = self.grads[id].clone().unwrap();
            let parents = self.nodes[id].parents.clone();
            let parent_grads = self.backward_op(id, &grad_out);
            for (p, g) in parents.into_iter().zip(parent_grads.into_iter()) {
                let Some(g) = g else { continue };
                if !self.nodes[p.0].needs_grad {
                    continue;
                }
                match &mut self.grads[p.0] {
                    Some(acc) => {
                        let buf = acc.data_mut();
                        for (dst, src) in buf.iter_mut().zip(g.data().iter()) {
                            *dst += src;
                        }
                    }
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Gradients for each parent of node `id`, in parent order.
    fn backward_op(&self, id: usize, g: &Tensor) -> Vec<Option<Tensor>> {
        let node = &self.nodes[id];
        let pv = |i: usize| &self.nodes[node.parents[i].0].value;
        match &node.op {
            Op::Leaf { .. } => vec![],
            Op::Add => {
                let db = reduce_to_shape(g, pv(1).shape());
                vec![Some(g.clone()), Some(db)]
            }
            Op::Mul => {
                let da = broadcast_combine(g, pv(1), |gv, bv| gv * bv);
                let ga = broadcast_combine(g, pv(0), |gv, av| gv * av);
                let db = reduce_to_shape(&ga, pv(1).shape());
                vec![Some(da), Some(db)]
            }
            Op::Scale(c) => vec![Some(g.map(|x| x * c))],
            Op::AddScalar => vec![Some(g.clone())],
            Op::Matmul { transpose_b } => matmul_backward(pv(0), pv(1), g, *transpose_b),
            Op::Gelu => {
                let x = pv(0);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data().iter())
                    .map(|(&xv, &gv)| gv * kernels::gelu_grad(xv))
                    .collect();
                vec![Some(Tensor::new(x.shape().to_vec(), data))]
            }
            Op::Exp => {
                let y = &node.value;
                let data = y
                    .data()
                    .iter()
                    .zip(g.data().iter())
                    .map(|(&yv, &gv)| gv * yv)
                    .collect();
                vec![Some(Tensor::new(y.shape().to_vec(), data))]
            }
            Op::Ln => {
                let x = pv(0);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data().iter())
                    .map(|(&xv, &gv)| gv / xv)
                    .collect();
                vec![Some(Tensor::new(x.shape().to_vec(), data))]
            }
            Op::SumAll => {
                let x = pv(0);
                vec![Some(Tensor::full(x.shape().to_vec(), g.item()))]
            }
            Op::MeanAll => {
                let x = pv(0);
                vec![Some(Tensor::full(x.shape().to_vec(), g.item() / x.numel() as f32))]
            }
            Op::SoftmaxLast => {
                let y = &node.value;
                let last = *y.shape().last().unwrap();
                let mut data = vec![0.0f32; y.numel()];
                for (r, chunk) in data.chunks_mut(last).enumerate() {
                    let yr = &y.data()[r * last..(r + 1) * last];
                    let gr = &g.data()[r * last..(r + 1) * last];
                    let dot: f32 = yr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..last {
                        chunk[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![Some(Tensor::new(y.shape().to_vec(), data))]
            }
            Op::LayerNormLast { eps } => {
                let x = pv(0);
                let last = *x.shape().last().unwrap();
                let mut data = vec![0.0f32; x.numel()];
                for (r, chunk) in data.chunks_mut(last).enumerate() {
                    let xr = &x.data()[r * last..(r + 1) * last];
                    let gr = &g.data()[r * last..(r + 1) * last];
                    let n = last as f32;
                    let mean = xr.iter().sum::<f32>() / n;
                    let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / n;
                    let inv = 1.0 / libm::sqrtf(var + eps);
                    let gmean = gr.iter().sum::<f32>() / n;
                    let mut gx_dot = 0.0f32;
                    for j in 0..last {
                        gx_dot += gr[j] * (xr[j] - mean) * inv;
                    }
                    gx_dot /= n;
                    for j in 0..last {
                        let xhat = (xr[j] - mean) * inv;
                        chunk[j] = inv * (gr[j] - gmean - xhat * gx_dot);
                    }
                }
                vec![Some(Tensor::new(x.shape().to_vec(), data))]
            }
            Op::L2NormalizeLast { eps } => {
                let x = pv(0);
                let last = *x.shape().last().unwrap();
                let mut data = vec![0.0f32; x.numel()];
                for (r, chunk) in data.chunks_mut(last).enumerate() {
                    let xr = &x.data()[r * last..(r + 1) * last];
                    let gr = &g.data()[r * last..(r + 1) * last];
                    let raw = libm::sqrtf(xr.iter().map(|&v| v * v).sum::<f32>());
                    let n = raw.max(*eps);
                    if raw > *eps {
                        let mut ydotg = 0.0f32;
                        for j in 0..last {
                            ydotg += (xr[j] / n) * gr[j];
                        }
                        for j in 0..last {
                            chunk[j] = (gr[j] - (xr[j] / n) * ydotg) / n;
                        }
                    } else {
                        for j in 0..last {
                            chunk[j] = gr[j] / n;
                        }
                    }
                }
                vec![Some(Tensor::new(x.shape().to_vec(), data))]
            }
            Op::Embedding { ids } => {
                let table = pv(0);
                let dim = table.shape()[1];
                let mut data = vec![0.0f32; table.numel()];
                for (row, &id) in ids.iter().enumerate() {
                    let src = &g.data()[row * dim..(row + 1) * dim];
                    let dst = &mut data[id as usize * dim..(id as usize + 1) * dim];
                    for (d, s) in dst.iter_mut().zip(src.iter()) {
                        *d += s;
                    }
                }
                vec![Some(Tensor::new(table.shape().to_vec(), data))]
            }
            Op::CrossEntropy { targets, mask, probs, reduction } => {
                let logits = pv(0);
                let classes = logits.shape()[1];
                let mask_sum: f32 = mask.iter().sum();
                let norm = match reduction {
                    CeReduction::Mean => 1.0 / mask_sum,
                    CeReduction::Sum => 1.0,
                };
                let scale = g.item() * norm;
                let mut data = probs.data().to_vec();
                for (r, chunk) in data.chunks_mut(classes).enumerate() {
                    let coeff = scale * mask[r];
                    chunk[targets[r] as usize] -= 1.0;
                    for v in chunk.iter_mut() {
                        *v *= coeff;
                    }
                }
                vec![Some(Tensor::new(logits.shape().to_vec(), data))]
            }
            Op::Reshape => {
                let x = pv(0);
                vec![Some(g.reshaped(x.shape().to_vec()))]
            }
            Op::SplitHeads => vec![Some(merge_heads_raw(g))],
            Op::MergeHeads => {
                let x = pv(0);
                let heads = x.shape()[1];
                vec![Some(split_heads_raw(g, heads))]
            }
            Op::SelectPos { pos } => {
                let x = pv(0);
                let (b, t_len, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let mut data = vec![0.0f32; x.numel()];
                for bi in 0..b {
                    let dst = (bi * t_len + pos) * d;
                    data[dst..dst + d].copy_from_slice(&g.data()[bi * d..(bi + 1) * d]);
                }
                vec![Some(Tensor::new(x.shape().to_vec(), data))]
            }
        }
    }
}

// ---- shape helpers ----

/// Per-dimension strides for reading `b` right-aligned against `out_shape`,
/// with zero stride where `b` broadcasts.
fn broadcast_strides(out_shape: &[usize], b_shape: &[usize]) -> Vec<usize> {
    let nd = out_shape.len();
    let offset = nd - b_shape.len();
    let mut real = vec![0usize; b_shape.len()];
    let mut acc = 1usize;
    for d in (0..b_shape.len()).rev() {
        real[d] = acc;
        acc *= b_shape[d];
    }
    let mut strides = vec![0usize; nd];
    for d in 0..nd {
        if d >= offset {
            let bd = b_shape[d - offset];
            assert!(
                bd == out_shape[d] || bd == 1,
                "cannot broadcast {:?} against {:?}",
                b_shape,
                out_shape
            );
            strides[d] = if bd == 1 { 0 } else { real[d - offset] };
        }
    }
    strides
}

/// Elementwise combine with `b` broadcast right-aligned against `a`.
fn broadcast_combine(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    assert!(
        b.shape().len() <= a.shape().len(),
        "broadcast operand rank {} exceeds target rank {}",
        b.shape().len(),
        a.shape().len()
    );
    let (ad, bd) = (a.data(), b.data());
    // Fast paths cover nearly every call in practice.
    if a.shape() == b.shape() {
        let data = ad.iter().zip(bd.iter()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    if b.numel() == 1 {
        let c = bd[0];
        return a.map(|x| f(x, c));
    }
    if b.shape().len() == 1 && b.shape()[0] == *a.shape().last().unwrap() {
        let last = b.shape()[0];
        let mut data = Vec::with_capacity(a.numel());
        for row in ad.chunks(last) {
            for (j, &x) in row.iter().enumerate() {
                data.push(f(x, bd[j]));
            }
        }
        return Tensor::new(a.shape().to_vec(), data);
    }

    let shape = a.shape();
    let strides = broadcast_strides(shape, b.shape());
    let nd = shape.len();
    let mut midx = vec![0usize; nd];
    let mut ob = 0usize;
    let mut data = Vec::with_capacity(a.numel());
    for &x in ad.iter() {
        data.push(f(x, bd[ob]));
        for d in (0..nd).rev() {
            midx[d] += 1;
            ob += strides[d];
            if midx[d] == shape[d] {
                ob -= strides[d] * shape[d];
                midx[d] = 0;
            } else {
                break;
            }
        }
    }
    Tensor::new(shape.to_vec(), data)
}

/// Sums `g` down to `target` by collapsing broadcast axes.
fn reduce_to_shape(g: &Tensor, target: &[usize]) -> Tensor {
    if g.shape() == target {
        return g.clone();
    }
    let shape = g.shape();
    let strides = broadcast_strides(shape, target);
    let nd = shape.len();
    let numel: usize = target.iter().product();
    let mut out = vec![0.0f32; numel];
    let mut midx = vec![0usize; nd];
    let mut ob = 0usize;
    for &x in g.data().iter() {
        out[ob] += x;
        for d in (0..nd).rev() {
            midx[d] += 1;
            ob += strides[d];
            if midx[d] == shape[d] {
                ob -= strides[d] * shape[d];
                midx[d] = 0;
            } else {
                break;
            }
        }
    }
    Tensor::new(target.to_vec(), out)
}

// ---- matmul helpers ----

fn matmul_dims(a: &[usize], b: &[usize], transpose_b: bool) -> (usize, usize, usize, usize, Vec<usize>) {
    assert!(a.len() >= 2 && b.len() >= 2, "matmul operands must be rank >= 2");
    assert_eq!(
        &a[..a.len() - 2],
        &b[..b.len() - 2],
        "matmul batch dims differ: {:?} vs {:?}",
        a,
        b
    );
    let m = a[a.len() - 2];
    let k = a[a.len() - 1];
    let (bk, n) = if transpose_b {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    assert_eq!(k, bk, "matmul inner dims differ: {:?} x {:?} (transpose_b={transpose_b})", a, b);
    let batch: usize = a[..a.len() - 2].iter().product();
    let mut out_shape = a[..a.len() - 2].to_vec();
    out_shape.push(m);
    out_shape.push(n);
    (batch, m, k, n, out_shape)
}

fn matmul_forward(a: &Tensor, b: &Tensor, transpose_b: bool) -> Tensor {
    let (batch, m, k, n, out_shape) = matmul_dims(a.shape(), b.shape(), transpose_b);
    let mut out = vec![0.0f32; batch * m * n];
    for i in 0..batch {
        let av = &a.data()[i * m * k..(i + 1) * m * k];
        let bv = &b.data()[i * k * n..(i + 1) * k * n];
        let cv = &mut out[i * m * n..(i + 1) * m * n];
        if transpose_b {
            kernels::gemm_nt(m, k, n, av, bv, cv);
        } else {
            kernels::gemm_nn(m, k, n, av, bv, cv);
        }
    }
    Tensor::new(out_shape, out)
}

fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor, transpose_b: bool) -> Vec<Option<Tensor>> {
    let (batch, m, k, n, _) = matmul_dims(a.shape(), b.shape(), transpose_b);
    let mut da = vec![0.0f32; a.numel()];
    let mut db = vec![0.0f32; b.numel()];
    for i in 0..batch {
        let av = &a.data()[i * m * k..(i + 1) * m * k];
        let bv = &b.data()[i * k * n..(i + 1) * k * n];
        let gv = &g.data()[i * m * n..(i + 1) * m * n];
        let dav = &mut da[i * m * k..(i + 1) * m * k];
        let dbv = &mut db[i * k * n..(i + 1) * k * n];
        if transpose_b {
            // c = a . b^T with b stored [n, k]
            kernels::gemm_nn(m, n, k, gv, bv, dav);
            kernels::gemm_tn(n, m, k, gv, av, dbv);
        } else {
            kernels::gemm_nt(m, n, k, gv, bv, dav);
            kernels::gemm_tn(k, m, n, av, gv, dbv);
        }
    }
    vec![
        Some(Tensor::new(a.shape().to_vec(), da)),
        Some(Tensor::new(b.shape().to_vec(), db)),
    ]
}

// ---- head movement helpers ----

fn split_heads_raw(t: &Tensor, heads: usize) -> Tensor {
    let s = t.shape();
    let (b, seq, model) = (s[0], s[1], s[2]);
    let hd = model / heads;
    let mut out = vec![0.0f32; t.numel()];
    let src = t.data();
    for bi in 0..b {
        for ti in 0..seq {
            for h in 0..heads {
                let from = ((bi * seq + ti) * model) + h * hd;
                let to = (((bi * heads + h) * seq) + ti) * hd;
                out[to..to + hd].copy_from_slice(&src[from..from + hd]);
            }
        }
    }
    Tensor::new(vec![b, heads, seq, hd], out)
}

fn merge_heads_raw(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (b, heads, seq, hd) = (s[0], s[1], s[2], s[3]);
    let model = heads * hd;
    let mut out = vec![0.0f32; t.numel()];
    let src = t.data();
    for bi in 0..b {
        for h in 0..heads {
            for ti in 0..seq {
                let from = (((bi * heads + h) * seq) + ti) * hd;
                let to = ((bi * seq + ti) * model) + h * hd;
                out[to..to + hd].copy_from_slice(&src[from..from + hd]);
            }
        }
    }
    Tensor::new(vec![b, seq, model], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient_is_two_x() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let sq = g.mul(x, x);
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        let gx = g.grad(x).unwrap();
        assert_eq!(gx.data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_loss_leaves_grads_zero() {
        let mut g = Graph::new();
        let p = g.param(Tensor::from_vec(vec![1.0, -1.0]));
        let c = g.input(Tensor::scalar(5.0));
        let loss = g.scale(c, 1.0);
        g.backward(loss).unwrap();
        assert!(g.grad(p).is_none());
        assert_eq!(g.grad_or_zeros(p).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let y = g.gelu(x);
        assert!(matches!(g.backward(y), Err(GraphError::NonScalarLoss(_))));
    }

    #[test]
    fn broadcast_add_reduces_bias_grad() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![2, 3], vec![0.0; 6]));
        let b = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let y = g.add(x, b);
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn matmul_values_and_grads() {
        let mut g = Graph::new();
        let a = g.param(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = g.param(Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]));
        let c = g.matmul(a, b);
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
        let loss = g.sum_all(c);
        g.backward(loss).unwrap();
        // d(sum)/dA = ones . B^T
        assert_eq!(g.grad(a).unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let mut g = Graph::new();
        let a = g.input(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let bt = g.input(Tensor::new(vec![2, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0]));
        let c = g.matmul_nt(a, bt);
        // rows of a dotted with rows of bt
        assert_eq!(g.value(c).data(), &[4.0, 5.0, 10.0, 11.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grads_balance() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2, 4], vec![0.1, 0.2, -0.3, 0.05, 1.0, -1.0, 0.5, 0.0]));
        let y = g.softmax_last(x);
        for row in g.value(y).data().chunks(4) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        // softmax rows sum to one, so a sum loss has zero gradient
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        for &v in g.grad(x).unwrap().data() {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn embedding_scatters_gradients_to_rows() {
        let mut g = Graph::new();
        let table = g.param(Tensor::new(vec![4, 2], (0..8).map(|i| i as f32).collect()));
        let e = g.embedding(table, &[3, 1, 3]);
        assert_eq!(g.value(e).data(), &[6.0, 7.0, 2.0, 3.0, 6.0, 7.0]);
        let loss = g.sum_all(e);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(table).unwrap().data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn cross_entropy_matches_hand_computation() {
        let mut g = Graph::new();
        // uniform logits: loss is ln(classes)
        let x = g.param(Tensor::new(vec![2, 4], vec![0.0; 8]));
        let loss = g.cross_entropy(x, &[1, 2], &[1.0, 1.0], CeReduction::Mean);
        assert!((g.value(loss).item() - libm::logf(4.0)).abs() < 1e-6);
        g.backward(loss).unwrap();
        let gx = g.grad(x).unwrap();
        // p - onehot, scaled by 1/2: 0.25 everywhere except targets get 0.25-1
        for r in 0..2 {
            for c in 0..4 {
                let want = if (r == 0 && c == 1) || (r == 1 && c == 2) {
                    (0.25 - 1.0) / 2.0
                } else {
                    0.25 / 2.0
                };
                assert!((gx.data()[r * 4 + c] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn masked_rows_do_not_contribute() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2, 3], vec![5.0, 1.0, 1.0, 9.0, 9.0, 9.0]));
        let loss = g.cross_entropy(x, &[0, 0], &[1.0, 0.0], CeReduction::Mean);
        g.backward(loss).unwrap();
        let gx = g.grad(x).unwrap();
        assert!(gx.data()[3..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn split_and_merge_heads_round_trip() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2, 3, 4], (0..24).map(|i| i as f32).collect()));
        let s = g.split_heads(x, 2);
        assert_eq!(g.value(s).shape(), &[2, 2, 3, 2]);
        let m = g.merge_heads(s);
        assert_eq!(g.value(m).data(), g.value(x).data());
        let loss = g.sum_all(m);
        g.backward(loss).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn select_pos_extracts_and_scatters() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let y = g.select_pos(x, 1);
        assert_eq!(g.value(y).data(), &[3.0, 4.0, 7.0, 8.0]);
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 2.0]));
        let y = g.layer_norm(x, 1e-5);
        for row in g.value(y).data().chunks(4) {
            let mean: f32 = row.iter().sum::<f32>() / 4.0;
            let var: f32 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / 4.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn l2_normalize_produces_unit_rows() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![2, 3], vec![3.0, 0.0, 4.0, 1.0, 1.0, 1.0]));
        let y = g.l2_normalize(x, 1e-8);
        for row in g.value(y).data().chunks(3) {
            let norm: f32 = row.iter().map(|&v| v * v).sum::<f32>();
            assert!((norm - 1.0).abs() < 1e-5);
        }
    }
}
