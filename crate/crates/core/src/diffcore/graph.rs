use std::borrow::Cow;

use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};
use crate::error::{dim_err, input_err, Error, Result};

/// Probabilities are clamped to this floor before any logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    Transpose(usize),
    TransposeLast(usize),
    Add(usize, usize),
    AddBias(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: usize,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Concat {
        inputs: Vec<usize>,
        outer: usize,
        widths: Vec<usize>,
    },
    SliceRows {
        x: usize,
        start: usize,
    },
    SelectRows {
        x: usize,
        rows: Vec<usize>,
    },
    SplitHeads {
        x: usize,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    MergeHeads {
        x: usize,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    Sum(usize),
    Mean(usize),
    CrossEntropyRows {
        logits: usize,
        target: usize,
        probs: Vec<f64>,
    },
    KlDivRows {
        p: usize,
        q: usize,
    },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | BatchMatMul(a, b) | Add(a, b) | AddBias(a, b) | Mul(a, b) => {
                vec![*a, *b]
            }
            Transpose(a) | TransposeLast(a) | Scale(a, _) | Relu(a) | Sum(a) | Mean(a) => vec![*a],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Softmax { x, .. }
            | SliceRows { x, .. }
            | SelectRows { x, .. }
            | SplitHeads { x, .. }
            | MergeHeads { x, .. } => vec![*x],
            Embedding { table, .. } => vec![*table],
            Concat { inputs, .. } => inputs.clone(),
            CrossEntropyRows { logits, target, .. } => vec![*logits, *target],
            KlDivRows { p, q } => vec![*p, *q],
        }
    }
}

struct Node<'a> {
    op: Op,
    value: Cow<'a, Tensor>,
    requires_grad: bool,
}

/// Dynamic tape for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so node ids are a topological
/// order of the recorded computation. Leaves may borrow their values, which
/// lets frozen weights take part in a forward pass without being copied.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros shaped like `like` when the loss does not depend on it.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let n = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let requires_grad = op
            .inputs()
            .iter()
            .any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            op,
            value: Cow::Owned(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Cow<'a, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(Cow::Owned(value), true)
    }

    pub fn param_ref(&mut self, value: &'a Tensor) -> Var {
        self.leaf(Cow::Borrowed(value), true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(Cow::Owned(value), false)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor) -> Var {
        self.leaf(Cow::Borrowed(value), false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(dim_err!("matmul: {:?} x {:?}", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(ta.data(), tb.data(), &mut out, m, k, n);
        Ok(self.push(Op::MatMul(a.0, b.0), Tensor::from_parts(vec![m, n], out)))
    }

    /// `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 3
            || tb.rank() != 3
            || ta.shape()[0] != tb.shape()[0]
            || ta.shape()[2] != tb.shape()[1]
        {
            return Err(dim_err!("batch_matmul: {:?} x {:?}", ta.shape(), tb.shape()));
        }
        let (bs, m, k, n) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm_acc(
                &ta.data()[i * m * k..(i + 1) * m * k],
                &tb.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        Ok(self.push(
            Op::BatchMatMul(a.0, b.0),
            Tensor::from_parts(vec![bs, m, n], out),
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(dim_err!("transpose: expected rank 2, got {:?}", ta.shape()));
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let out = transpose_data(ta.data(), 1, m, n);
        Ok(self.push(Op::Transpose(a.0), Tensor::from_parts(vec![n, m], out)))
    }

    /// Swaps the last two axes of a rank-3 tensor.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 3 {
            return Err(dim_err!("transpose_last: expected rank 3, got {:?}", ta.shape()));
        }
        let (b, m, n) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let out = transpose_data(ta.data(), b, m, n);
        Ok(self.push(Op::TransposeLast(a.0), Tensor::from_parts(vec![b, n, m], out)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        Ok(self.push(Op::Add(a.0, b.0), Tensor::from_parts(shape, out)))
    }

    /// Adds a `[n]` vector to every row of a `[..., n]` tensor.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let n = ta.last_dim();
        if tb.numel() != n || tb.rank() != 1 {
            return Err(dim_err!("add_bias: {:?} + {:?}", ta.shape(), tb.shape()));
        }
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(n) {
            for (x, y) in row.iter_mut().zip(tb.data()) {
                *x += y;
            }
        }
        let shape = ta.shape().to_vec();
        Ok(self.push(Op::AddBias(a.0, bias.0), Tensor::from_parts(shape, out)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        Ok(self.push(Op::Mul(a.0, b.0), Tensor::from_parts(shape, out)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push(Op::Scale(a.0, c), out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(Op::Relu(a.0), out)
    }

    /// Row-wise layer normalisation over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.last_dim();
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.numel() != n || tb.numel() != n {
            return Err(dim_err!(
                "layer_norm: input {:?}, gamma {:?}, beta {:?}",
                tx.shape(),
                tg.shape(),
                tb.shape()
            ));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let shape = tx.shape().to_vec();
        Ok(self.push(
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
            Tensor::from_parts(shape, out),
        ))
    }

    /// Softmax along `axis`, stabilised by subtracting the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() {
            return Err(dim_err!("softmax: axis {axis} out of range for {:?}", tx.shape()));
        }
        let (outer, n, inner) = axis_split(tx.shape(), axis);
        let out = softmax_data(tx.data(), outer, n, inner);
        let shape = tx.shape().to_vec();
        Ok(self.push(
            Op::Softmax {
                x: x.0,
                outer,
                n,
                inner,
            },
            Tensor::from_parts(shape, out),
        ))
    }

    /// Softmax along the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let axis = self.value(x).rank() - 1;
        self.softmax(x, axis).expect("last axis exists")
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.rank() != 2 {
            return Err(dim_err!("embedding: table must be rank 2, got {:?}", tt.shape()));
        }
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(input_err!("embedding: id {bad} out of range for vocab {v}"));
        }
        if ids.is_empty() {
            return Err(dim_err!("embedding: empty id list"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tt.row(i));
        }
        Ok(self.push(
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            Tensor::from_parts(vec![ids.len(), d], out),
        ))
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| dim_err!("concat: no inputs"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(dim_err!("concat: axis {axis} out of range for {base:?}"));
        }
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.value(v).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(dim_err!("concat: {s:?} incompatible with {base:?} on axis {axis}"));
            }
            let (_, n, inner) = axis_split(s, axis);
            widths.push(n * inner);
        }
        let outer: usize = base[..axis].iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = inputs.iter().map(|&v| self.value(v).shape()[axis]).sum();
        Ok(self.push(
            Op::Concat {
                inputs: inputs.iter().map(|v| v.0).collect(),
                outer,
                widths,
            },
            Tensor::from_parts(shape, out),
        ))
    }

    /// Rows `start..start+len` along the first axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let rows = tx.shape()[0];
        if len == 0 || start + len > rows {
            return Err(dim_err!("slice_rows: {start}..{} of {rows}", start + len));
        }
        let w = tx.numel() / rows;
        let out = tx.data()[start * w..(start + len) * w].to_vec();
        let mut shape = tx.shape().to_vec();
        shape[0] = len;
        Ok(self.push(
            Op::SliceRows { x: x.0, start },
            Tensor::from_parts(shape, out),
        ))
    }

    /// Gathers arbitrary rows along the first axis.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.shape()[0];
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(dim_err!("select_rows: indices {rows:?} for {n} rows"));
        }
        let w = tx.numel() / n;
        let mut out = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            out.extend_from_slice(&tx.data()[r * w..(r + 1) * w]);
        }
        let mut shape = tx.shape().to_vec();
        shape[0] = rows.len();
        Ok(self.push(
            Op::SelectRows {
                x: x.0,
                rows: rows.to_vec(),
            },
            Tensor::from_parts(shape, out),
        ))
    }

    /// `[batch*seq, heads*dh] -> [batch*heads, seq, dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || tx.shape()[0] != batch * seq || tx.shape()[1] % heads != 0 {
            return Err(dim_err!(
                "split_heads: {:?} with batch {batch}, seq {seq}, heads {heads}",
                tx.shape()
            ));
        }
        let dh = tx.shape()[1] / heads;
        let out = permute_heads(tx.data(), batch, seq, heads, dh, true);
        Ok(self.push(
            Op::SplitHeads {
                x: x.0,
                batch,
                seq,
                heads,
            },
            Tensor::from_parts(vec![batch * heads, seq, dh], out),
        ))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 3 || tx.shape()[0] != batch * heads || tx.shape()[1] != seq {
            return Err(dim_err!(
                "merge_heads: {:?} with batch {batch}, seq {seq}, heads {heads}",
                tx.shape()
            ));
        }
        let dh = tx.shape()[2];
        let out = permute_heads(tx.data(), batch, seq, heads, dh, false);
        Ok(self.push(
            Op::MergeHeads {
                x: x.0,
                batch,
                seq,
                heads,
            },
            Tensor::from_parts(vec![batch * seq, heads * dh], out),
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum(x.0), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Op::Mean(x.0), Tensor::scalar(s))
    }

    /// Per-row `-Σ target · log softmax(logits)`; soft targets allowed.
    pub fn cross_entropy_rows(&mut self, logits: Var, target: Var) -> Result<Var> {
        let (tl, tt) = (self.value(logits), self.value(target));
        same_shape("cross_entropy", tl, tt)?;
        if tl.rank() != 2 {
            return Err(dim_err!("cross_entropy: expected [b,n], got {:?}", tl.shape()));
        }
        check_distribution_rows("cross_entropy target", tt)?;
        let (b, n) = (tl.shape()[0], tl.shape()[1]);
        let probs = softmax_data(tl.data(), b, n, 1);
        let mut out = vec![0.0; b];
        for r in 0..b {
            let row = &tl.data()[r * n..(r + 1) * n];
            let lse = log_sum_exp(row);
            out[r] = -(0..n)
                .map(|j| tt.data()[r * n + j] * (row[j] - lse))
                .sum::<f64>();
        }
        Ok(self.push(
            Op::CrossEntropyRows {
                logits: logits.0,
                target: target.0,
                probs,
            },
            Tensor::from_parts(vec![b], out),
        ))
    }

    /// Batch mean of [`Graph::cross_entropy_rows`].
    pub fn cross_entropy(&mut self, logits: Var, target: Var) -> Result<Var> {
        let rows = self.cross_entropy_rows(logits, target)?;
        Ok(self.mean(rows))
    }

    /// Per-row `Σ p · (log p − log q)` with both sides clamped at [`LOG_FLOOR`].
    pub fn kl_divergence_rows(&mut self, p: Var, q: Var) -> Result<Var> {
        let (tp, tq) = (self.value(p), self.value(q));
        same_shape("kl_divergence", tp, tq)?;
        if tp.data().iter().chain(tq.data()).any(|&v| v < 0.0) {
            return Err(input_err!("kl_divergence: negative probability"));
        }
        let rows = tp.rows();
        let n = tp.last_dim();
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            out[r] = (0..n)
                .map(|j| {
                    let pv = tp.data()[r * n + j];
                    let qv = tq.data()[r * n + j];
                    if pv == 0.0 {
                        0.0
                    } else {
                        pv * (pv.max(LOG_FLOOR).ln() - qv.max(LOG_FLOOR).ln())
                    }
                })
                .sum();
        }
        Ok(self.push(
            Op::KlDivRows { p: p.0, q: q.0 },
            Tensor::from_parts(vec![rows], out),
        ))
    }

    /// Batch mean of [`Graph::kl_divergence_rows`].
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        let rows = self.kl_divergence_rows(p, q)?;
        Ok(self.mean(rows))
    }

    /// Reverse pass from a scalar. The graph is left untouched, so repeated
    /// calls give bit-identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let tl = self.value(loss);
        if !tl.is_scalar() {
            return Err(Error::Usage(format!(
                "backward: loss must be scalar, got shape {:?}",
                tl.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(tl.shape()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &g, &mut grads);
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    fn accumulate(grads: &mut [Option<Tensor>], id: usize, delta: Tensor) {
        match &mut grads[id] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    /// Like `accumulate`, but builds the delta in place to avoid a temporary.
    fn accumulate_with(
        &self,
        grads: &mut [Option<Tensor>],
        id: usize,
        f: impl FnOnce(&mut [f64]),
    ) {
        let slot = &mut grads[id];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[id].value.shape()));
        }
        f(slot.as_mut().expect("initialised").data_mut());
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[id].value;
        let gd = g.data();
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(Var(*a)), self.value(Var(*b)));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.wants(*a) {
                    self.accumulate_with(grads, *a, |ga| gemm_nt_acc(gd, tb.data(), ga, m, n, k));
                }
                if self.wants(*b) {
                    self.accumulate_with(grads, *b, |gb| gemm_tn_acc(ta.data(), gd, gb, m, k, n));
                }
            }
            Op::BatchMatMul(a, b) => {
                let (ta, tb) = (self.value(Var(*a)), self.value(Var(*b)));
                let (bs, m, k, n) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
                if self.wants(*a) {
                    self.accumulate_with(grads, *a, |ga| {
                        for i in 0..bs {
                            gemm_nt_acc(
                                &gd[i * m * n..(i + 1) * m * n],
                                &tb.data()[i * k * n..(i + 1) * k * n],
                                &mut ga[i * m * k..(i + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    });
                }
                if self.wants(*b) {
                    self.accumulate_with(grads, *b, |gb| {
                        for i in 0..bs {
                            gemm_tn_acc(
                                &ta.data()[i * m * k..(i + 1) * m * k],
                                &gd[i * m * n..(i + 1) * m * n],
                                &mut gb[i * k * n..(i + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    });
                }
            }
            Op::Transpose(a) => {
                if self.wants(*a) {
                    let (n, m) = (out.shape()[0], out.shape()[1]);
                    let t = transpose_data(gd, 1, n, m);
                    Self::accumulate(grads, *a, Tensor::from_parts(vec![m, n], t));
                }
            }
            Op::TransposeLast(a) => {
                if self.wants(*a) {
                    let (b, n, m) = (out.shape()[0], out.shape()[1], out.shape()[2]);
                    let t = transpose_data(gd, b, n, m);
                    Self::accumulate(grads, *a, Tensor::from_parts(vec![b, m, n], t));
                }
            }
            Op::Add(a, b) => {
                for x in [*a, *b] {
                    if self.wants(x) {
                        Self::accumulate(grads, x, g.clone());
                    }
                }
            }
            Op::AddBias(a, b) => {
                if self.wants(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    let n = out.last_dim();
                    self.accumulate_with(grads, *b, |gb| {
                        for row in gd.chunks(n) {
                            for (x, y) in gb.iter_mut().zip(row) {
                                *x += y;
                            }
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(Var(*a)), self.value(Var(*b)));
                if self.wants(*a) {
                    self.accumulate_with(grads, *a, |ga| {
                        for ((x, &gv), &bv) in ga.iter_mut().zip(gd).zip(tb.data()) {
                            *x += gv * bv;
                        }
                    });
                }
                if self.wants(*b) {
                    self.accumulate_with(grads, *b, |gb| {
                        for ((x, &gv), &av) in gb.iter_mut().zip(gd).zip(ta.data()) {
                            *x += gv * av;
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    Self::accumulate(grads, *a, g.map(|v| v * c));
                }
            }
            Op::Relu(a) => {
                if self.wants(*a) {
                    let ta = self.value(Var(*a));
                    self.accumulate_with(grads, *a, |ga| {
                        for ((x, &gv), &av) in ga.iter_mut().zip(gd).zip(ta.data()) {
                            if av > 0.0 {
                                *x += gv;
                            }
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = out.last_dim();
                let rows = out.rows();
                let tg = self.value(Var(*gamma));
                if self.wants(*x) {
                    self.accumulate_with(grads, *x, |gx| {
                        let mut dxhat = vec![0.0; n];
                        for r in 0..rows {
                            let mut mean_d = 0.0;
                            let mut mean_dx = 0.0;
                            for j in 0..n {
                                let d = gd[r * n + j] * tg.data()[j];
                                dxhat[j] = d;
                                mean_d += d;
                                mean_dx += d * xhat[r * n + j];
                            }
                            mean_d /= n as f64;
                            mean_dx /= n as f64;
                            for j in 0..n {
                                gx[r * n + j] += inv_std[r]
                                    * (dxhat[j] - mean_d - xhat[r * n + j] * mean_dx);
                            }
                        }
                    });
                }
                if self.wants(*gamma) {
                    self.accumulate_with(grads, *gamma, |gg| {
                        for r in 0..rows {
                            for j in 0..n {
                                gg[j] += gd[r * n + j] * xhat[r * n + j];
                            }
                        }
                    });
                }
                if self.wants(*beta) {
                    self.accumulate_with(grads, *beta, |gb| {
                        for row in gd.chunks(n) {
                            for (x, y) in gb.iter_mut().zip(row) {
                                *x += y;
                            }
                        }
                    });
                }
            }
            Op::Softmax { x, outer, n, inner } => {
                if self.wants(*x) {
                    let (outer, n, inner) = (*outer, *n, *inner);
                    let y = out.data();
                    self.accumulate_with(grads, *x, |gx| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let idx = |j: usize| o * n * inner + j * inner + i;
                                let dot: f64 = (0..n).map(|j| gd[idx(j)] * y[idx(j)]).sum();
                                for j in 0..n {
                                    gx[idx(j)] += y[idx(j)] * (gd[idx(j)] - dot);
                                }
                            }
                        }
                    });
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let d = out.last_dim();
                    self.accumulate_with(grads, *table, |gt| {
                        for (r, &i) in ids.iter().enumerate() {
                            for j in 0..d {
                                gt[i * d + j] += gd[r * d + j];
                            }
                        }
                    });
                }
            }
            Op::Concat {
                inputs,
                outer,
                widths,
            } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&inp, &w) in inputs.iter().zip(widths) {
                    if self.wants(inp) {
                        self.accumulate_with(grads, inp, |gi| {
                            for o in 0..*outer {
                                let src = &gd[o * total + offset..o * total + offset + w];
                                for (x, y) in gi[o * w..(o + 1) * w].iter_mut().zip(src) {
                                    *x += y;
                                }
                            }
                        });
                    }
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                if self.wants(*x) {
                    let w = out.numel() / out.shape()[0];
                    let start = *start;
                    self.accumulate_with(grads, *x, |gx| {
                        for (a, b) in gx[start * w..start * w + gd.len()].iter_mut().zip(gd) {
                            *a += b;
                        }
                    });
                }
            }
            Op::SelectRows { x, rows } => {
                if self.wants(*x) {
                    let w = out.numel() / out.shape()[0];
                    self.accumulate_with(grads, *x, |gx| {
                        for (k, &r) in rows.iter().enumerate() {
                            for j in 0..w {
                                gx[r * w + j] += gd[k * w + j];
                            }
                        }
                    });
                }
            }
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            } => {
                if self.wants(*x) {
                    let dh = out.shape()[2];
                    let t = permute_heads(gd, *batch, *seq, *heads, dh, false);
                    Self::accumulate(
                        grads,
                        *x,
                        Tensor::from_parts(vec![batch * seq, heads * dh], t),
                    );
                }
            }
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            } => {
                if self.wants(*x) {
                    let dh = out.shape()[1] / heads;
                    let t = permute_heads(gd, *batch, *seq, *heads, dh, true);
                    Self::accumulate(grads, *x, Tensor::from_parts(vec![batch * heads, *seq, dh], t));
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let shape = self.value(Var(*x)).shape().to_vec();
                    Self::accumulate(grads, *x, Tensor::full(&shape, gd[0]));
                }
            }
            Op::Mean(x) => {
                if self.wants(*x) {
                    let tx = self.value(Var(*x));
                    let v = gd[0] / tx.numel() as f64;
                    Self::accumulate(grads, *x, Tensor::full(tx.shape(), v));
                }
            }
            Op::CrossEntropyRows {
                logits,
                target,
                probs,
            } => {
                let tt = self.value(Var(*target));
                let n = tt.last_dim();
                if self.wants(*logits) {
                    self.accumulate_with(grads, *logits, |gl| {
                        for (r, &gr) in gd.iter().enumerate() {
                            let tsum: f64 = tt.row(r).iter().sum();
                            for j in 0..n {
                                let k = r * n + j;
                                gl[k] += gr * (probs[k] * tsum - tt.data()[k]);
                            }
                        }
                    });
                }
                if self.wants(*target) {
                    let tl = self.value(Var(*logits));
                    self.accumulate_with(grads, *target, |gt| {
                        for (r, &gr) in gd.iter().enumerate() {
                            let row = tl.row(r);
                            let lse = log_sum_exp(row);
                            for j in 0..n {
                                gt[r * n + j] -= gr * (row[j] - lse);
                            }
                        }
                    });
                }
            }
            Op::KlDivRows { p, q } => {
                let (tp, tq) = (self.value(Var(*p)), self.value(Var(*q)));
                let n = tp.last_dim();
                if self.wants(*p) {
                    self.accumulate_with(grads, *p, |gp| {
                        for (r, &gr) in gd.iter().enumerate() {
                            for j in 0..n {
                                let k = r * n + j;
                                let (pv, qv) = (tp.data()[k], tq.data()[k]);
                                let dlogp = if pv >= LOG_FLOOR { 1.0 } else { 0.0 };
                                gp[k] += gr * (pv.max(LOG_FLOOR).ln() - qv.max(LOG_FLOOR).ln() + dlogp);
                            }
                        }
                    });
                }
                if self.wants(*q) {
                    self.accumulate_with(grads, *q, |gq| {
                        for (r, &gr) in gd.iter().enumerate() {
                            for j in 0..n {
                                let k = r * n + j;
                                let (pv, qv) = (tp.data()[k], tq.data()[k]);
                                if qv >= LOG_FLOOR {
                                    gq[k] -= gr * pv / qv;
                                }
                            }
                        }
                    });
                }
            }
        }
    }
}

fn check_distribution_rows(what: &str, t: &Tensor) -> Result<()> {
    if t.data().iter().any(|&v| v < 0.0) {
        return Err(input_err!("{what}: negative entry"));
    }
    for r in 0..t.rows() {
        let s: f64 = t.row(r).iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(input_err!("{what}: row {r} sums to {s}"));
        }
    }
    Ok(())
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_data(x: &[f64], outer: usize, n: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let mut scratch = Vec::with_capacity(n);
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| o * n * inner + j * inner + i;
            let m = (0..n).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            scratch.clear();
            for j in 0..n {
                let e = (x[idx(j)] - m).exp();
                out[idx(j)] = e;
                scratch.push(e);
            }
            // summing in sorted order makes the result permutation-invariant
            scratch.sort_by(f64::total_cmp);
            let s: f64 = scratch.iter().sum();
            for j in 0..n {
                out[idx(j)] /= s;
            }
        }
    }
    out
}

fn transpose_data(x: &[f64], b: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for k in 0..b {
        let base = k * m * n;
        for i in 0..m {
            for j in 0..n {
                out[base + j * m + i] = x[base + i * n + j];
            }
        }
    }
    out
}

/// Moves between `[batch, seq, heads, dh]` and `[batch, heads, seq, dh]` layouts.
fn permute_heads(x: &[f64], batch: usize, seq: usize, heads: usize, dh: usize, split: bool) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for s in 0..seq {
            for h in 0..heads {
                let merged = ((b * seq + s) * heads + h) * dh;
                let splitted = ((b * heads + h) * seq + s) * dh;
                let (src, dst) = if split { (merged, splitted) } else { (splitted, merged) };
                out[dst..dst + dh].copy_from_slice(&x[src..src + dh]);
            }
        }
    }
    out
}
