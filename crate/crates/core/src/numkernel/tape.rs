//! Reverse-mode differentiation over an append-only node list.
//!
//! Every primitive appends one node holding its output value and whatever the
//! reverse pass needs. `backward` walks the list once in reverse; it takes
//! `&self`, so replaying it gives bit-identical gradients.

use std::sync::Arc;

use super::kernels::{self, dot, mm_nn, mm_nt, mm_tn};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::par;

/// Additive bias applied to masked attention scores.
pub const MASK_BIAS: f64 = -1e30;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row layout of a batch of equal-length token sets stored as one
/// `[sets·len × C]` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SetLayout {
    pub sets: usize,
    pub len: usize,
    /// `sets·len` flags; false marks padding.
    pub mask: Arc<[bool]>,
}

impl SetLayout {
    pub fn new(sets: usize, len: usize, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != sets * len {
            return Err(Error::dim("set layout", &[sets, len], &[mask.len()]));
        }
        Ok(SetLayout {
            sets,
            len,
            mask: mask.into(),
        })
    }

    pub fn rows(&self) -> usize {
        self.sets * self.len
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: f64,
    },
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    ConcatRows(Var, Var),
    GatherRows {
        x: Var,
        index: Arc<[Option<usize>]>,
    },
    SegmentMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Sum(Var),
    Cosine {
        a: Var,
        b: Var,
        eps: f64,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: SetLayout,
        heads: usize,
        probs: Vec<f64>,
    },
    Focal {
        logits: Var,
        targets: Arc<[f64]>,
        alpha: f64,
        gamma: f64,
        norm: f64,
    },
    L1Rows {
        pred: Var,
        rows: Arc<[usize]>,
        targets: Arc<[f64]>,
        norm: f64,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Single-threaded record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = &self.nodes[v.0].value;
        match t.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(op, s, &[0, 0])),
        }
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let data = mm_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new(&[m, n], data)?;
        Ok(self.push(out, &[a, b], Op::MatMul(a, b)))
    }

    /// `x · wᵀ + b` with `w` stored `[out×in]`; `x` may have leading axes.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (dout, din) = self.matrix_dims(w, "linear")?;
        let xs = self.value(x);
        if xs.cols() != din || xs.shape().is_empty() {
            return Err(Error::dim("linear", xs.shape(), self.shape(w)));
        }
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::dim("linear bias", self.shape(b), &[dout]));
            }
        }
        let rows = xs.rows();
        let mut out_shape = xs.shape().to_vec();
        *out_shape.last_mut().unwrap() = dout;
        let mut data = mm_nt(xs.data(), self.value(w).data(), rows, din, dout);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in data.chunks_mut(dout.max(1)) {
                for (y, bv) in row.iter_mut().zip(bias) {
                    *y += bv;
                }
            }
        }
        let out = Tensor::new(&out_shape, data)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(out, &inputs, Op::Linear { x, w, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", self.shape(a), self.shape(b)));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let out = Tensor::new(self.shape(a), data)?;
        Ok(self.push(out, &[a, b], Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("mul", self.shape(a), self.shape(b)));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let out = Tensor::new(self.shape(a), data)?;
        Ok(self.push(out, &[a, b], Op::Mul(a, b)))
    }

    /// `scale·x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| scale * v + shift).collect();
        let out = Tensor::new(t.shape(), data).expect("same shape");
        self.push(out, &[x], Op::Affine { x, scale })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::new(t.shape(), data).expect("same shape");
        self.push(out, &[x], Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| kernels::gelu(v)).collect();
        let out = Tensor::new(t.shape(), data).expect("same shape");
        self.push(out, &[x], Op::Gelu(x))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(t.cols().max(1)) {
            softmax_in_place(row);
        }
        let out = Tensor::new(t.shape(), data).expect("same shape");
        self.push(out, &[x], Op::Softmax(x))
    }

    /// Per-row normalization with population variance, then `gamma·x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim("layer_norm", t.shape(), self.shape(gamma)));
        }
        let rows = t.rows();
        let mut xhat = vec![0.0; rows * c];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for (h, v) in xhat[r * c..(r + 1) * c].iter_mut().zip(row) {
                *h = (v - mean) * rs;
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut data = xhat.clone();
        for row in data.chunks_mut(c.max(1)) {
            for ((y, gv), bv) in row.iter_mut().zip(g).zip(b) {
                *y = *y * gv + bv;
            }
        }
        let out = Tensor::new(t.shape(), data)?;
        Ok(self.push(
            out,
            &[x, gamma, beta],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Stack `a[p×C]` above `b[q×C]`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, ca) = self.matrix_dims(a, "concat_rows")?;
        let (q, cb) = self.matrix_dims(b, "concat_rows")?;
        if ca != cb {
            return Err(Error::dim("concat_rows", self.shape(a), self.shape(b)));
        }
        let mut data = Vec::with_capacity((p + q) * ca);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let out = Tensor::new(&[p + q, ca], data)?;
        Ok(self.push(out, &[a, b], Op::ConcatRows(a, b)))
    }

    /// Row gather from a matrix view of `x`; `None` yields a zero row.
    pub fn gather_rows(&mut self, x: Var, index: Arc<[Option<usize>]>) -> Result<Var> {
        let t = self.value(x);
        let (rows, c) = (t.rows(), t.cols());
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= rows) {
            return Err(Error::dim("gather_rows", t.shape(), &[*bad]));
        }
        let mut data = vec![0.0; index.len() * c];
        for (dst, src) in data.chunks_mut(c.max(1)).zip(index.iter()) {
            if let Some(s) = src {
                dst.copy_from_slice(t.row(*s));
            }
        }
        let out = Tensor::new(&[index.len(), c], data)?;
        Ok(self.push(out, &[x], Op::GatherRows { x, index }))
    }

    /// Channelwise max over each row group; the gradient goes to the first
    /// maximal row.
    pub fn segment_max(&mut self, x: Var, segments: &[Vec<usize>]) -> Result<Var> {
        let t = self.value(x);
        let (rows, c) = (t.rows(), t.cols());
        let mut data = vec![0.0; segments.len() * c];
        let mut argmax = vec![0usize; segments.len() * c];
        for (s, seg) in segments.iter().enumerate() {
            let Some(&first) = seg.first() else {
                return Err(Error::EmptySet("segment_max"));
            };
            if let Some(bad) = seg.iter().find(|&&r| r >= rows) {
                return Err(Error::dim("segment_max", t.shape(), &[*bad]));
            }
            let out = &mut data[s * c..(s + 1) * c];
            let arg = &mut argmax[s * c..(s + 1) * c];
            out.copy_from_slice(t.row(first));
            arg.fill(first);
            for &r in &seg[1..] {
                for ((o, a), &v) in out.iter_mut().zip(arg.iter_mut()).zip(t.row(r)) {
                    if v > *o {
                        *o = v;
                        *a = r;
                    }
                }
            }
        }
        let out = Tensor::new(&[segments.len(), c], data)?;
        Ok(self.push(out, &[x], Op::SegmentMax { x, argmax }))
    }

    /// Masked channelwise max of `x[n×C]`, producing `[C]`.
    pub fn max_pool_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let rows = self.value(x).rows();
        if mask.len() != rows {
            return Err(Error::dim("max_pool_rows", self.shape(x), &[mask.len()]));
        }
        let seg: Vec<usize> = (0..rows).filter(|&r| mask[r]).collect();
        if seg.is_empty() {
            return Err(Error::EmptySet("max_pool_rows"));
        }
        let pooled = self.segment_max(x, &[seg])?;
        let c = self.value(x).cols();
        self.reshape(pooled, &[c])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, &[x], Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, &[x], Op::Sum(x))
    }

    /// Row-wise cosine similarity of two `[N×C]` matrices, producing `[N]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim("cosine_rows", ta.shape(), tb.shape()));
        }
        let data: Vec<f64> = (0..ta.rows())
            .map(|r| cosine(ta.row(r), tb.row(r), eps))
            .collect();
        let n = data.len();
        let out = Tensor::new(&[n], data)?;
        Ok(self.push(out, &[a, b], Op::Cosine { a, b, eps }))
    }

    /// Scaled dot-product attention within each set of `layout`. `q`, `k`
    /// and `v` are `[sets·len × C]`. Padding keys receive [`MASK_BIAS`];
    /// padding query rows produce zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: &SetLayout,
        heads: usize,
    ) -> Result<Var> {
        let c = self.value(q).cols();
        if heads == 0 || c % heads != 0 {
            return Err(Error::config(format!(
                "{heads} heads do not divide {c} channels"
            )));
        }
        for t in [k, v] {
            if self.shape(t) != self.shape(q) {
                return Err(Error::dim("attention", self.shape(q), self.shape(t)));
            }
        }
        if self.value(q).rows() != layout.rows() {
            return Err(Error::dim(
                "attention layout",
                self.shape(q),
                &[layout.sets, layout.len],
            ));
        }
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let blocks = par::map_range(layout.sets, |s| {
            attention_set_forward(qd, kd, vd, layout, s, c, heads)
        });
        let l = layout.len;
        let mut data = Vec::with_capacity(layout.rows() * c);
        let mut probs = Vec::with_capacity(layout.sets * heads * l * l);
        for (o, p) in blocks {
            data.extend_from_slice(&o);
            probs.extend_from_slice(&p);
        }
        let out = Tensor::new(&[layout.rows(), c], data)?;
        Ok(self.push(
            out,
            &[q, k, v],
            Op::Attention {
                q,
                k,
                v,
                layout: layout.clone(),
                heads,
                probs,
            },
        ))
    }

    /// Focal binary cross-entropy summed over all logits and divided by `norm`.
    pub fn focal_loss(
        &mut self,
        logits: Var,
        targets: Arc<[f64]>,
        alpha: f64,
        gamma: f64,
        norm: f64,
    ) -> Result<Var> {
        let t = self.value(logits);
        if t.numel() != targets.len() {
            return Err(Error::dim("focal_loss", t.shape(), &[targets.len()]));
        }
        let total: f64 = t
            .data()
            .iter()
            .zip(targets.iter())
            .map(|(&x, &y)| focal_term(x, y, alpha, gamma).0)
            .sum();
        let out = Tensor::scalar(total / norm);
        Ok(self.push(
            out,
            &[logits],
            Op::Focal {
                logits,
                targets,
                alpha,
                gamma,
                norm,
            },
        ))
    }

    /// `Σ |pred[rows[t]] − targets[t]| / norm` over selected rows.
    pub fn l1_rows(
        &mut self,
        pred: Var,
        rows: Arc<[usize]>,
        targets: Arc<[f64]>,
        norm: f64,
    ) -> Result<Var> {
        let t = self.value(pred);
        let d = t.cols();
        if targets.len() != rows.len() * d {
            return Err(Error::dim("l1_rows", t.shape(), &[rows.len(), targets.len()]));
        }
        if let Some(bad) = rows.iter().find(|&&r| r >= t.rows()) {
            return Err(Error::dim("l1_rows", t.shape(), &[*bad]));
        }
        let mut total = 0.0;
        for (i, &r) in rows.iter().enumerate() {
            for (p, y) in t.row(r).iter().zip(&targets[i * d..(i + 1) * d]) {
                total += (p - y).abs();
            }
        }
        let out = Tensor::scalar(total / norm);
        Ok(self.push(
            out,
            &[pred],
            Op::L1Rows {
                pred,
                rows,
                targets,
                norm,
            },
        ))
    }

    /// Populate gradients of `loss` with respect to every leaf that requires
    /// them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.node_backward(node, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| matches!(n.op, Op::Leaf))
                    .map(|d| Tensor::new(n.value.shape(), d).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
            slot @ None => *slot = Some(delta),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.wants(*a) {
                    self.accumulate(grads, *a, mm_nt(g, tb.data(), m, n, k));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, mm_tn(ta.data(), g, m, k, n));
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (dout, din) = (tw.shape()[0], tw.shape()[1]);
                let rows = tx.rows();
                if self.wants(*x) {
                    self.accumulate(grads, *x, mm_nn(g, tw.data(), rows, dout, din));
                }
                if self.wants(*w) {
                    self.accumulate(grads, *w, mm_tn(g, tx.data(), rows, dout, din));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        self.accumulate(grads, *b, kernels::col_sums(g, rows, dout));
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    self.accumulate(grads, *a, zip_map(g, tb, |g, y| g * y));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, zip_map(g, ta, |g, x| g * x));
                }
            }
            Op::Affine { x, scale } => {
                self.accumulate(grads, *x, g.iter().map(|v| v * scale).collect());
            }
            Op::Relu(x) => {
                let tx = self.value(*x).data();
                let d = zip_map(g, tx, |g, x| if x > 0.0 { g } else { 0.0 });
                self.accumulate(grads, *x, d);
            }
            Op::Gelu(x) => {
                let tx = self.value(*x).data();
                self.accumulate(grads, *x, zip_map(g, tx, |g, x| g * kernels::gelu_grad(x)));
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = node.value.cols().max(1);
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let s = dot(yr, gr);
                    for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - s);
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = node.value.cols();
                let rows = node.value.rows();
                let gam = self.value(*gamma).data();
                if self.wants(*gamma) {
                    let gx = zip_map(g, xhat, |a, b| a * b);
                    self.accumulate(grads, *gamma, kernels::col_sums(&gx, rows, c));
                }
                if self.wants(*beta) {
                    self.accumulate(grads, *beta, kernels::col_sums(g, rows, c));
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; rows * c];
                    for r in 0..rows {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let dh: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dhh = dot(&dh, hr) / c as f64;
                        for ((o, d), h) in dx[r * c..(r + 1) * c].iter_mut().zip(&dh).zip(hr) {
                            *o = rstd[r] * (d - mean_dh - h * mean_dhh);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::ConcatRows(a, b) => {
                let split = self.value(*a).numel();
                self.accumulate(grads, *a, g[..split].to_vec());
                self.accumulate(grads, *b, g[split..].to_vec());
            }
            Op::GatherRows { x, index } => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut d = vec![0.0; tx.numel()];
                for (gr, src) in g.chunks(c.max(1)).zip(index.iter()) {
                    if let Some(s) = src {
                        for (o, v) in d[s * c..(s + 1) * c].iter_mut().zip(gr) {
                            *o += v;
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::SegmentMax { x, argmax } => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut d = vec![0.0; tx.numel()];
                for (i, (&r, gv)) in argmax.iter().zip(g).enumerate() {
                    d[r * c + i % c] += gv;
                }
                self.accumulate(grads, *x, d);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Cosine { a, b, eps } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let c = ta.cols();
                let mut da = vec![0.0; ta.numel()];
                let mut db = vec![0.0; tb.numel()];
                for r in 0..ta.rows() {
                    let (u, v) = (ta.row(r), tb.row(r));
                    let (nu_raw, nv_raw) = (dot(u, u).sqrt(), dot(v, v).sqrt());
                    let (nu, nv) = (nu_raw.max(*eps), nv_raw.max(*eps));
                    let cos = dot(u, v) / (nu * nv);
                    let gr = g[r];
                    for i in 0..c {
                        let mut du = v[i] / (nu * nv);
                        if nu_raw > *eps {
                            du -= cos * u[i] / (nu * nu);
                        }
                        let mut dv = u[i] / (nu * nv);
                        if nv_raw > *eps {
                            dv -= cos * v[i] / (nv * nv);
                        }
                        da[r * c + i] = gr * du;
                        db[r * c + i] = gr * dv;
                    }
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                heads,
                probs,
            } => {
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let c = self.value(*q).cols();
                let blocks = par::map_range(layout.sets, |s| {
                    attention_set_backward(qd, kd, vd, g, probs, layout, s, c, *heads)
                });
                let n = layout.rows() * c;
                let (mut dq, mut dk, mut dv) = (
                    Vec::with_capacity(n),
                    Vec::with_capacity(n),
                    Vec::with_capacity(n),
                );
                for (bq, bk, bv) in blocks {
                    dq.extend_from_slice(&bq);
                    dk.extend_from_slice(&bk);
                    dv.extend_from_slice(&bv);
                }
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::Focal {
                logits,
                targets,
                alpha,
                gamma,
                norm,
            } => {
                let x = self.value(*logits).data();
                let d = x
                    .iter()
                    .zip(targets.iter())
                    .map(|(&x, &y)| g[0] * focal_term(x, y, *alpha, *gamma).1 / norm)
                    .collect();
                self.accumulate(grads, *logits, d);
            }
            Op::L1Rows {
                pred,
                rows,
                targets,
                norm,
            } => {
                let t = self.value(*pred);
                let dcols = t.cols();
                let mut d = vec![0.0; t.numel()];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..dcols {
                        let diff = t.at(r, j) - targets[i * dcols + j];
                        let s = if diff > 0.0 {
                            1.0
                        } else if diff < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        d[r * dcols + j] += g[0] * s / norm;
                    }
                }
                self.accumulate(grads, *pred, d);
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `u·v / (max(‖u‖,eps)·max(‖v‖,eps))`
pub fn cosine(u: &[f64], v: &[f64], eps: f64) -> f64 {
    let nu = dot(u, u).sqrt().max(eps);
    let nv = dot(v, v).sqrt().max(eps);
    dot(u, v) / (nu * nv)
}

/// Loss and d(loss)/d(logit) of one focal term.
fn focal_term(x: f64, y: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = kernels::sigmoid(x);
    let log_p = -kernels::softplus(-x);
    let log_q = -kernels::softplus(x);
    let q = 1.0 - p;
    let mut loss = 0.0;
    let mut grad = 0.0;
    if y > 0.0 {
        let w = alpha * y;
        let qg = q.powf(gamma);
        loss -= w * qg * log_p;
        grad += w * qg * (gamma * p * log_p - q);
    }
    if y < 1.0 {
        let w = (1.0 - alpha) * (1.0 - y);
        let pg = p.powf(gamma);
        loss -= w * pg * log_q;
        grad += w * pg * (p - gamma * q * log_q);
    }
    (loss, grad)
}

fn attention_set_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    layout: &SetLayout,
    s: usize,
    c: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>) {
    let l = layout.len;
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let base = s * l;
    let mask = &layout.mask[base..base + l];
    let mut out = vec![0.0; l * c];
    let mut probs = vec![0.0; heads * l * l];
    for h in 0..heads {
        let off = h * d;
        for i in 0..l {
            if !mask[i] {
                continue;
            }
            let qi = &q[(base + i) * c + off..(base + i) * c + off + d];
            let prow = &mut probs[(h * l + i) * l..(h * l + i + 1) * l];
            for j in 0..l {
                prow[j] = if mask[j] {
                    dot(qi, &k[(base + j) * c + off..(base + j) * c + off + d]) * scale
                } else {
                    MASK_BIAS
                };
            }
            softmax_in_place(prow);
            let orow = &mut out[i * c + off..i * c + off + d];
            for j in 0..l {
                let p = prow[j];
                if p == 0.0 {
                    continue;
                }
                let vj = &v[(base + j) * c + off..(base + j) * c + off + d];
                for (o, vv) in orow.iter_mut().zip(vj) {
                    *o += p * vv;
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_set_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    g: &[f64],
    probs: &[f64],
    layout: &SetLayout,
    s: usize,
    c: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let l = layout.len;
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let base = s * l;
    let mask = &layout.mask[base..base + l];
    let mut dq = vec![0.0; l * c];
    let mut dk = vec![0.0; l * c];
    let mut dv = vec![0.0; l * c];
    let mut dp = vec![0.0; l];
    for h in 0..heads {
        let off = h * d;
        let pset = &probs[(s * heads + h) * l * l..(s * heads + h + 1) * l * l];
        for i in 0..l {
            if !mask[i] {
                continue;
            }
            let prow = &pset[i * l..(i + 1) * l];
            let gi = &g[(base + i) * c + off..(base + i) * c + off + d];
            for j in 0..l {
                dp[j] = dot(gi, &v[(base + j) * c + off..(base + j) * c + off + d]);
                let p = prow[j];
                if p != 0.0 {
                    for (o, gv) in dv[j * c + off..j * c + off + d].iter_mut().zip(gi) {
                        *o += p * gv;
                    }
                }
            }
            let inner = dot(prow, &dp);
            let qi = &q[(base + i) * c + off..(base + i) * c + off + d];
            for j in 0..l {
                let ds = prow[j] * (dp[j] - inner) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = &k[(base + j) * c + off..(base + j) * c + off + d];
                for (o, kv) in dq[i * c + off..i * c + off + d].iter_mut().zip(kj) {
                    *o += ds * kv;
                }
                for (o, qv) in dk[j * c + off..j * c + off + d].iter_mut().zip(qi) {
                    *o += ds * qv;
                }
            }
        }
    }
    (dq, dk, dv)
}
