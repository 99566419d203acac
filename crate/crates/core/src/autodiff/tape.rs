//! The Wengert tape: an append-only arena of op records plus one reverse
//! sweep. Records are appended in execution order, so ids are already a
//! topological order and `backward` is a single reverse loop.
//!
//! Gradients flow only where they are needed: a node participates in the
//! sweep when some leaf below it was registered with `requires_grad`. Binding
//! frozen parameters as non-grad leaves therefore prunes whole subtrees from
//! the backward pass at zero cost.

use super::kernels;
use super::tensor::{Shape, Tensor};
use crate::{Error, Result};

/// Handle to a node on a tape. Only meaningful for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TapeId(usize);

impl TapeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Forward phase. Train-mode batch norm normalizes by batch statistics and
/// updates running statistics; eval mode uses the running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Batch-norm running statistics. Model state, not a tape value: the tape
/// reads or updates them at record time, and checkpoints serialize them.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    /// Fresh statistics: mean 0, var 1.
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }
}

enum Op {
    Leaf,
    Linear { x: TapeId, w: TapeId, b: TapeId },
    Conv2d { x: TapeId, k: TapeId, stride: usize, pad: usize },
    BatchNorm2d { x: TapeId, gamma: TapeId, beta: TapeId, mean: Vec<f64>, invstd: Vec<f64>, train: bool },
    Relu { x: TapeId },
    Add { a: TapeId, b: TapeId },
    Mul { a: TapeId, b: TapeId },
    Scale { x: TapeId, c: f64 },
    Upsample2x { x: TapeId },
    GlobalAvgPool { x: TapeId },
    RowL2Normalize { x: TapeId, eps: f64 },
    MatmulNt { a: TapeId, b: TapeId },
    ConcatRows { a: TapeId, b: TapeId },
    Sum { x: TapeId },
    /// Sum over anchor rows of `lse(row \ excluded) - row[positive]`.
    InfoNceSum { logits: TapeId, positives: Vec<usize>, exclude_diag: bool },
    /// Sum over rows of `weight * cross_entropy(softmax(logits_row), target_row)`.
    SoftCeSum { logits: TapeId, targets: Vec<f64>, weights: Vec<f64> },
}

struct Node {
    op: Op,
    needs_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), values: Vec::new(), grads: Vec::new(), consumed: false }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TapeId) -> &Tensor {
        &self.values[id.0]
    }

    /// Register an input. `requires_grad` marks the leaf as a gradient target.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> TapeId {
        self.push(Op::Leaf, requires_grad, t)
    }

    /// Register a non-differentiated input.
    pub fn constant(&mut self, t: Tensor) -> TapeId {
        self.leaf(t, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> Result<TapeId> {
        Ok(self.constant(Tensor::scalar(v)?))
    }

    fn push(&mut self, op: Op, needs_grad: bool, value: Tensor) -> TapeId {
        self.nodes.push(Node { op, needs_grad });
        self.values.push(value);
        TapeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TapeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── recorded ops ────────────────────────────────────────────────────────

    /// y = x @ w + b. x: [n, din], w: [din, dout], b: [dout].
    pub fn linear(&mut self, x: TapeId, w: TapeId, b: TapeId) -> Result<TapeId> {
        let (n, din) = self.value(x).shape().as_2d()?;
        let (win, dout) = self.value(w).shape().as_2d()?;
        let bl = self.value(b).shape();
        if win != din || bl.dims() != [dout] {
            return Err(Error::ShapeMismatch(format!(
                "linear: x {} w {} b {}",
                self.value(x).shape(),
                self.value(w).shape(),
                bl
            )));
        }
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut y = vec![0.0; n * dout];
        for ni in 0..n {
            let row = &mut y[ni * dout..(ni + 1) * dout];
            row.copy_from_slice(bd);
            for (i, &xv) in xd[ni * din..(ni + 1) * din].iter().enumerate() {
                if xv != 0.0 {
                    kernels::axpy(row, &wd[i * dout..(i + 1) * dout], xv);
                }
            }
        }
        let out = Tensor::from_vec(Shape::new(&[n, dout])?, y)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Op::Linear { x, w, b }, needs, out))
    }

    /// 2D cross-correlation with zero padding, no bias (a following batch norm
    /// makes one redundant). Kernels are square 1x1 or 3x3, stride 1 or 2.
    pub fn conv2d(&mut self, x: TapeId, k: TapeId, stride: usize, pad: usize) -> Result<TapeId> {
        let (n, cin, h, w) = self.value(x).shape().as_4d()?;
        let (cout, kcin, kh, kw) = self.value(k).shape().as_4d()?;
        if kcin != cin {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: input has {cin} channels, kernel expects {kcin}"
            )));
        }
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(Error::InvalidShape(format!("conv2d: kernel must be 1x1 or 3x3, got {kh}x{kw}")));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::InvalidHyperparameter(format!("conv2d: stride must be 1 or 2, got {stride}")));
        }
        if pad > 1 {
            return Err(Error::InvalidHyperparameter(format!("conv2d: padding must be 0 or 1, got {pad}")));
        }
        let oh = kernels::conv_out_len(h, kh, stride, pad)
            .ok_or_else(|| Error::InvalidShape(format!("conv2d: {h}x{w} too small for {kh}x{kw} kernel with pad {pad}")))?;
        let ow = kernels::conv_out_len(w, kw, stride, pad).unwrap();
        let mut out = vec![0.0; n * cout * oh * ow];
        kernels::conv2d_forward(
            self.value(x).data(),
            self.value(k).data(),
            &mut out,
            (n, cin, h, w),
            (cout, kh, kw),
            stride,
            pad,
            (oh, ow),
        );
        let out = Tensor::from_vec(Shape::new(&[n, cout, oh, ow])?, out)?;
        let needs = self.needs(x) || self.needs(k);
        Ok(self.push(Op::Conv2d { x, k, stride, pad }, needs, out))
    }

    /// Batch normalization over (n, h, w) per channel. Train phase normalizes
    /// by batch statistics (biased variance) and folds them into `stats` with
    /// the given momentum; eval phase normalizes by `stats`.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        x: TapeId,
        gamma: TapeId,
        beta: TapeId,
        stats: &mut RunningStats,
        phase: Phase,
        momentum: f64,
        eps: f64,
    ) -> Result<TapeId> {
        let dims = self.value(x).shape().as_4d()?;
        let (n, c, h, w) = dims;
        if self.value(gamma).shape().dims() != [c] || self.value(beta).shape().dims() != [c] {
            return Err(Error::ShapeMismatch(format!(
                "batchnorm2d: gamma/beta must be [{c}], got {} / {}",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::ShapeMismatch(format!(
                "batchnorm2d: running stats have {} channels, input has {c}",
                stats.mean.len()
            )));
        }
        if !(eps > 0.0) {
            return Err(Error::InvalidHyperparameter(format!("batchnorm2d: eps must be > 0, got {eps}")));
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::InvalidHyperparameter(format!(
                "batchnorm2d: momentum must be in [0, 1], got {momentum}"
            )));
        }
        let train = phase == Phase::Train;
        let (mean, var) = if train {
            if n * h * w < 2 {
                return Err(Error::DegenerateBatch(format!(
                    "batchnorm2d: batch statistics need at least 2 values per channel, got {n}x{h}x{w}"
                )));
            }
            let (mean, var) = kernels::channel_moments(self.value(x).data(), dims);
            for ci in 0..c {
                stats.mean[ci] = (1.0 - momentum) * stats.mean[ci] + momentum * mean[ci];
                stats.var[ci] = (1.0 - momentum) * stats.var[ci] + momentum * var[ci];
            }
            (mean, var)
        } else {
            (stats.mean.clone(), stats.var.clone())
        };
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![0.0; n * c * h * w];
        kernels::bn_normalize(
            self.value(x).data(),
            &mut out,
            dims,
            &mean,
            &invstd,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let out = Tensor::from_vec(self.value(x).shape().clone(), out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(Op::BatchNorm2d { x, gamma, beta, mean, invstd, train }, needs, out))
    }

    /// max(x, 0). Subgradient at 0 is 0.
    pub fn relu(&mut self, x: TapeId) -> Result<TapeId> {
        let t = self.value(x);
        let out = Tensor::from_vec(t.shape().clone(), t.data().iter().map(|v| v.max(0.0)).collect())?;
        let needs = self.needs(x);
        Ok(self.push(Op::Relu { x }, needs, out))
    }

    /// Elementwise a + b, same shape.
    pub fn add(&mut self, a: TapeId, b: TapeId) -> Result<TapeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch(format!("add: {} vs {}", ta.shape(), tb.shape())));
        }
        let out = Tensor::from_vec(
            ta.shape().clone(),
            ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect(),
        )?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a, b }, needs, out))
    }

    /// Elementwise a * b, same shape.
    pub fn mul(&mut self, a: TapeId, b: TapeId) -> Result<TapeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch(format!("mul: {} vs {}", ta.shape(), tb.shape())));
        }
        let out = Tensor::from_vec(
            ta.shape().clone(),
            ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect(),
        )?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul { a, b }, needs, out))
    }

    /// c * x for a compile-time constant c (not differentiated w.r.t. c).
    pub fn scale(&mut self, x: TapeId, c: f64) -> Result<TapeId> {
        if !c.is_finite() {
            return Err(Error::NumericalFailure(format!("scale: non-finite factor {c}")));
        }
        let t = self.value(x);
        let out = Tensor::from_vec(t.shape().clone(), t.data().iter().map(|v| c * v).collect())?;
        let needs = self.needs(x);
        Ok(self.push(Op::Scale { x, c }, needs, out))
    }

    /// Nearest-neighbor 2x spatial upsampling of an [n, c, h, w] tensor.
    pub fn upsample2x(&mut self, x: TapeId) -> Result<TapeId> {
        let (n, c, h, w) = self.value(x).shape().as_4d()?;
        let xd = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            let src = &xd[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for ih in 0..h {
                for iw in 0..w {
                    let v = src[ih * w + iw];
                    let base = 2 * ih * ow + 2 * iw;
                    dst[base] = v;
                    dst[base + 1] = v;
                    dst[base + ow] = v;
                    dst[base + ow + 1] = v;
                }
            }
        }
        let out = Tensor::from_vec(Shape::new(&[n, c, oh, ow])?, out)?;
        let needs = self.needs(x);
        Ok(self.push(Op::Upsample2x { x }, needs, out))
    }

    /// Spatial mean: [n, c, h, w] -> [n, c].
    pub fn global_avg_pool(&mut self, x: TapeId) -> Result<TapeId> {
        let (n, c, h, w) = self.value(x).shape().as_4d()?;
        let xd = self.value(x).data();
        let plane = h * w;
        let mut out = vec![0.0; n * c];
        for (p, o) in out.iter_mut().enumerate() {
            *o = xd[p * plane..(p + 1) * plane].iter().sum::<f64>() / plane as f64;
        }
        let out = Tensor::from_vec(Shape::new(&[n, c])?, out)?;
        let needs = self.needs(x);
        Ok(self.push(Op::GlobalAvgPool { x }, needs, out))
    }

    /// Rows scaled to unit L2 norm: y_i = x_i / max(|x_i|, eps). Rows with
    /// norm at or below eps fall back to division by eps, so a zero row stays
    /// zero instead of producing NaN.
    pub fn row_l2_normalize(&mut self, x: TapeId) -> Result<TapeId> {
        const EPS: f64 = 1e-12;
        let (m, d) = self.value(x).shape().as_2d()?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let row = &xd[i * d..(i + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(EPS);
            for (o, v) in out[i * d..(i + 1) * d].iter_mut().zip(row) {
                *o = v / norm;
            }
        }
        let out = Tensor::from_vec(Shape::new(&[m, d])?, out)?;
        let needs = self.needs(x);
        Ok(self.push(Op::RowL2Normalize { x, eps: EPS }, needs, out))
    }

    /// a @ b^T: [m, d] x [k, d] -> [m, k]. With L2-normalized rows this is the
    /// pairwise cosine similarity matrix.
    pub fn matmul_nt(&mut self, a: TapeId, b: TapeId) -> Result<TapeId> {
        let (m, d) = self.value(a).shape().as_2d()?;
        let (k, db) = self.value(b).shape().as_2d()?;
        if d != db {
            return Err(Error::ShapeMismatch(format!("matmul_nt: inner dims {d} vs {db}")));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * k];
        for mi in 0..m {
            let a_row = &ad[mi * d..(mi + 1) * d];
            for ki in 0..k {
                let b_row = &bd[ki * d..(ki + 1) * d];
                out[mi * k + ki] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            }
        }
        let out = Tensor::from_vec(Shape::new(&[m, k])?, out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatmulNt { a, b }, needs, out))
    }

    /// Stack two row matrices vertically: [a, d] over [b, d] -> [a + b, d].
    pub fn concat_rows(&mut self, a: TapeId, b: TapeId) -> Result<TapeId> {
        let (ra, d) = self.value(a).shape().as_2d()?;
        let (rb, db) = self.value(b).shape().as_2d()?;
        if d != db {
            return Err(Error::ShapeMismatch(format!("concat_rows: widths {d} vs {db}")));
        }
        let mut out = Vec::with_capacity((ra + rb) * d);
        out.extend_from_slice(self.value(a).data());
        out.extend_from_slice(self.value(b).data());
        let out = Tensor::from_vec(Shape::new(&[ra + rb, d])?, out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::ConcatRows { a, b }, needs, out))
    }

    /// Sum of all elements -> scalar.
    pub fn sum(&mut self, x: TapeId) -> Result<TapeId> {
        let s = self.value(x).data().iter().sum();
        let out = Tensor::scalar(s)?;
        let needs = self.needs(x);
        Ok(self.push(Op::Sum { x }, needs, out))
    }

    /// Sum over anchor rows of the InfoNCE cross-entropy on a logit matrix:
    /// for each row i, `logsumexp over candidates - logits[i, positives[i]]`,
    /// where `exclude_diag` drops candidate i from row i's log-sum-exp (the
    /// anchor itself, when candidates are the anchors). Log-sum-exp is
    /// max-shifted, so large logits do not overflow.
    pub fn info_nce_sum(&mut self, logits: TapeId, positives: Vec<usize>, exclude_diag: bool) -> Result<TapeId> {
        let (m, k) = self.value(logits).shape().as_2d()?;
        if positives.len() != m {
            return Err(Error::ShapeMismatch(format!(
                "info_nce_sum: {} positives for {m} anchor rows",
                positives.len()
            )));
        }
        if exclude_diag && m != k {
            return Err(Error::ShapeMismatch(format!(
                "info_nce_sum: diagonal exclusion needs a square matrix, got {m}x{k}"
            )));
        }
        for (i, &p) in positives.iter().enumerate() {
            if p >= k {
                return Err(Error::ShapeMismatch(format!("info_nce_sum: positive {p} out of {k} candidates")));
            }
            if exclude_diag && p == i {
                return Err(Error::InvalidHyperparameter(format!(
                    "info_nce_sum: row {i} has its excluded self as positive"
                )));
            }
        }
        let sd = self.value(logits).data();
        let mut total = 0.0;
        for i in 0..m {
            let row = &sd[i * k..(i + 1) * k];
            total += row_lse(row, exclude_diag.then_some(i)) - row[positives[i]];
        }
        let out = Tensor::scalar(total)?;
        let needs = self.needs(logits);
        Ok(self.push(Op::InfoNceSum { logits, positives, exclude_diag }, needs, out))
    }

    /// Weighted sum over rows of soft-target cross-entropy:
    /// `sum_i w_i * (-sum_c targets[i,c] * log_softmax(logits[i])[c])`.
    /// Targets need not sum to one; the adjoint accounts for their row sums.
    pub fn soft_ce_sum(&mut self, logits: TapeId, targets: &Tensor, weights: Vec<f64>) -> Result<TapeId> {
        let (m, c) = self.value(logits).shape().as_2d()?;
        if targets.shape().dims() != [m, c] {
            return Err(Error::ShapeMismatch(format!(
                "soft_ce_sum: logits {} vs targets {}",
                self.value(logits).shape(),
                targets.shape()
            )));
        }
        if weights.len() != m {
            return Err(Error::ShapeMismatch(format!("soft_ce_sum: {} weights for {m} rows", weights.len())));
        }
        if let Some(bad) = weights.iter().find(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure(format!("soft_ce_sum: non-finite weight {bad}")));
        }
        let sd = self.value(logits).data();
        let td = targets.data();
        let mut total = 0.0;
        for i in 0..m {
            if weights[i] == 0.0 {
                continue;
            }
            let row = &sd[i * c..(i + 1) * c];
            let lse = row_lse(row, None);
            let mut ce = 0.0;
            for (s, t) in row.iter().zip(&td[i * c..(i + 1) * c]) {
                if *t != 0.0 {
                    ce -= t * (s - lse);
                }
            }
            total += weights[i] * ce;
        }
        let out = Tensor::scalar(total)?;
        let needs = self.needs(logits);
        Ok(self.push(Op::SoftCeSum { logits, targets: td.to_vec(), weights }, needs, out))
    }

    // ── backward ────────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Consumes the tape: values stay
    /// readable, gradients become available, recording further ops or running
    /// backward again is an error.
    pub fn backward(&mut self, loss: TapeId) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NotScalar(lt.shape().to_string()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let (below, at) = grads.split_at_mut(id);
            let g = at[0].as_deref().unwrap();
            self.backward_node(id, g, below)?;
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the loss w.r.t. a node, if the node was reached by
    /// `backward`. Leaves registered with `requires_grad` that the loss never
    /// touched simply stay `None`; see [`Tape::grad_or_zeros`].
    pub fn grad(&self, id: TapeId) -> Option<&[f64]> {
        self.grads.get(id.0)?.as_deref()
    }

    /// Gradient as a tensor, zeros when the loss does not depend on the node.
    pub fn grad_or_zeros(&self, id: TapeId) -> Result<Tensor> {
        let shape = self.value(id).shape().clone();
        match self.grad(id) {
            Some(g) => Tensor::from_vec(shape, g.to_vec()),
            None => Tensor::from_vec(shape.clone(), vec![0.0; shape.numel()]),
        }
    }

    fn backward_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        // Accumulator for an input node; allocates zeros on first touch.
        // Inputs always precede their consumers on the tape, so `grads` (the
        // slice below `id`) contains every input of node `id`.
        macro_rules! acc {
            ($tid:expr) => {{
                let n = self.values[$tid.0].numel();
                grads[$tid.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice()
            }};
        }
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (n, din) = self.values[x.0].shape().as_2d()?;
                let dout = self.values[b.0].numel();
                let (xd, wd) = (self.values[x.0].data(), self.values[w.0].data());
                if self.needs(*x) {
                    let dx = acc!(x);
                    for ni in 0..n {
                        let g_row = &g[ni * dout..(ni + 1) * dout];
                        for i in 0..din {
                            dx[ni * din + i] +=
                                g_row.iter().zip(&wd[i * dout..(i + 1) * dout]).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                if self.needs(*w) {
                    let dw = acc!(w);
                    for ni in 0..n {
                        let g_row = &g[ni * dout..(ni + 1) * dout];
                        for (i, &xv) in xd[ni * din..(ni + 1) * din].iter().enumerate() {
                            if xv != 0.0 {
                                kernels::axpy(&mut dw[i * dout..(i + 1) * dout], g_row, xv);
                            }
                        }
                    }
                }
                if self.needs(*b) {
                    let db = acc!(b);
                    for ni in 0..n {
                        kernels::axpy(db, &g[ni * dout..(ni + 1) * dout], 1.0);
                    }
                }
            }
            Op::Conv2d { x, k, stride, pad } => {
                let dims = self.values[x.0].shape().as_4d()?;
                let (cout, _, kh, kw) = self.values[k.0].shape().as_4d()?;
                let (_, oc, oh, ow) = self.values[id].shape().as_4d()?;
                debug_assert_eq!(oc, cout);
                // Scratch buffers keep the borrow of `grads` simple; the extra
                // accumulate is linear in the activation size, dwarfed by the
                // convolution itself.
                let mut dx_buf = self.needs(*x).then(|| vec![0.0; self.values[x.0].numel()]);
                let mut dk_buf = self.needs(*k).then(|| vec![0.0; self.values[k.0].numel()]);
                kernels::conv2d_backward(
                    self.values[x.0].data(),
                    self.values[k.0].data(),
                    g,
                    dx_buf.as_deref_mut(),
                    dk_buf.as_deref_mut(),
                    dims,
                    (cout, kh, kw),
                    *stride,
                    *pad,
                    (oh, ow),
                );
                if let Some(buf) = dx_buf {
                    kernels::axpy(acc!(x), &buf, 1.0);
                }
                if let Some(buf) = dk_buf {
                    kernels::axpy(acc!(k), &buf, 1.0);
                }
            }
            Op::BatchNorm2d { x, gamma, beta, mean, invstd, train } => {
                let dims = self.values[x.0].shape().as_4d()?;
                let xd = self.values[x.0].data();
                let gd = self.values[gamma.0].data();
                let c = gd.len();
                let mut dx_buf = self.needs(*x).then(|| vec![0.0; xd.len()]);
                let mut dg_buf = self.needs(*gamma).then(|| vec![0.0; c]);
                let mut db_buf = self.needs(*beta).then(|| vec![0.0; c]);
                if *train {
                    kernels::bn_backward_train(
                        xd, g, dx_buf.as_deref_mut(), dg_buf.as_deref_mut(), db_buf.as_deref_mut(),
                        dims, mean, invstd, gd,
                    );
                } else {
                    kernels::bn_backward_eval(
                        xd, g, dx_buf.as_deref_mut(), dg_buf.as_deref_mut(), db_buf.as_deref_mut(),
                        dims, mean, invstd, gd,
                    );
                }
                if let Some(buf) = dx_buf {
                    kernels::axpy(acc!(x), &buf, 1.0);
                }
                if let Some(buf) = dg_buf {
                    kernels::axpy(acc!(gamma), &buf, 1.0);
                }
                if let Some(buf) = db_buf {
                    kernels::axpy(acc!(beta), &buf, 1.0);
                }
            }
            Op::Relu { x } => {
                if self.needs(*x) {
                    let xd = self.values[x.0].data();
                    let dx = acc!(x);
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(xd) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    kernels::axpy(acc!(a), g, 1.0);
                }
                if self.needs(*b) {
                    kernels::axpy(acc!(b), g, 1.0);
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let bd = self.values[b.0].data();
                    let da = acc!(a);
                    for ((d, &gv), bv) in da.iter_mut().zip(g).zip(bd) {
                        *d += gv * bv;
                    }
                }
                if self.needs(*b) {
                    let ad = self.values[a.0].data();
                    let db = acc!(b);
                    for ((d, &gv), av) in db.iter_mut().zip(g).zip(ad) {
                        *d += gv * av;
                    }
                }
            }
            Op::Scale { x, c } => {
                if self.needs(*x) {
                    kernels::axpy(acc!(x), g, *c);
                }
            }
            Op::Upsample2x { x } => {
                if self.needs(*x) {
                    let (n, c, h, w) = self.values[x.0].shape().as_4d()?;
                    let ow = 2 * w;
                    let dx = acc!(x);
                    for p in 0..n * c {
                        let src = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                        let dst = &mut dx[p * h * w..(p + 1) * h * w];
                        for ih in 0..h {
                            for iw in 0..w {
                                let base = 2 * ih * ow + 2 * iw;
                                dst[ih * w + iw] += src[base] + src[base + 1] + src[base + ow] + src[base + ow + 1];
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool { x } => {
                if self.needs(*x) {
                    let (n, c, h, w) = self.values[x.0].shape().as_4d()?;
                    let plane = h * w;
                    let dx = acc!(x);
                    for p in 0..n * c {
                        let gv = g[p] / plane as f64;
                        for d in &mut dx[p * plane..(p + 1) * plane] {
                            *d += gv;
                        }
                    }
                }
            }
            Op::RowL2Normalize { x, eps } => {
                if self.needs(*x) {
                    let (m, d) = self.values[x.0].shape().as_2d()?;
                    let xd = self.values[x.0].data();
                    let yd = self.values[id].data();
                    let dx = acc!(x);
                    for i in 0..m {
                        let xr = &xd[i * d..(i + 1) * d];
                        let yr = &yd[i * d..(i + 1) * d];
                        let gr = &g[i * d..(i + 1) * d];
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let dr = &mut dx[i * d..(i + 1) * d];
                        if norm > *eps {
                            let gy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for ((dv, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                                *dv += (gv - gy * yv) / norm;
                            }
                        } else {
                            // Clamped branch: y = x / eps.
                            for (dv, &gv) in dr.iter_mut().zip(gr) {
                                *dv += gv / eps;
                            }
                        }
                    }
                }
            }
            Op::MatmulNt { a, b } => {
                let (m, d) = self.values[a.0].shape().as_2d()?;
                let (k, _) = self.values[b.0].shape().as_2d()?;
                if self.needs(*a) {
                    let bd = self.values[b.0].data();
                    let da = acc!(a);
                    for mi in 0..m {
                        for ki in 0..k {
                            let gv = g[mi * k + ki];
                            if gv != 0.0 {
                                kernels::axpy(&mut da[mi * d..(mi + 1) * d], &bd[ki * d..(ki + 1) * d], gv);
                            }
                        }
                    }
                }
                if self.needs(*b) {
                    let ad = self.values[a.0].data();
                    let db = acc!(b);
                    for mi in 0..m {
                        for ki in 0..k {
                            let gv = g[mi * k + ki];
                            if gv != 0.0 {
                                kernels::axpy(&mut db[ki * d..(ki + 1) * d], &ad[mi * d..(mi + 1) * d], gv);
                            }
                        }
                    }
                }
            }
            Op::ConcatRows { a, b } => {
                let na = self.values[a.0].numel();
                if self.needs(*a) {
                    kernels::axpy(acc!(a), &g[..na], 1.0);
                }
                if self.needs(*b) {
                    kernels::axpy(acc!(b), &g[na..], 1.0);
                }
            }
            Op::Sum { x } => {
                if self.needs(*x) {
                    let dx = acc!(x);
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::InfoNceSum { logits, positives, exclude_diag } => {
                if self.needs(*logits) {
                    let (m, k) = self.values[logits.0].shape().as_2d()?;
                    let sd = self.values[logits.0].data();
                    let go = g[0];
                    let ds = acc!(logits);
                    for i in 0..m {
                        let row = &sd[i * k..(i + 1) * k];
                        let excl = exclude_diag.then_some(i);
                        let lse = row_lse(row, excl);
                        let dr = &mut ds[i * k..(i + 1) * k];
                        for (j, (dv, &sv)) in dr.iter_mut().zip(row).enumerate() {
                            if Some(j) == excl {
                                continue;
                            }
                            *dv += go * (sv - lse).exp();
                        }
                        dr[positives[i]] -= go;
                    }
                }
            }
            Op::SoftCeSum { logits, targets, weights } => {
                if self.needs(*logits) {
                    let (m, c) = self.values[logits.0].shape().as_2d()?;
                    let sd = self.values[logits.0].data();
                    let go = g[0];
                    let ds = acc!(logits);
                    for i in 0..m {
                        let wi = weights[i];
                        if wi == 0.0 {
                            continue;
                        }
                        let row = &sd[i * c..(i + 1) * c];
                        let tr = &targets[i * c..(i + 1) * c];
                        let lse = row_lse(row, None);
                        let t_sum: f64 = tr.iter().sum();
                        let dr = &mut ds[i * c..(i + 1) * c];
                        for ((dv, &sv), &tv) in dr.iter_mut().zip(row).zip(tr) {
                            *dv += go * wi * (t_sum * (sv - lse).exp() - tv);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Max-shifted log-sum-exp over a row, optionally skipping one index.
fn row_lse(row: &[f64], exclude: Option<usize>) -> f64 {
    let mut mx = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if Some(j) != exclude && v > mx {
            mx = v;
        }
    }
    let mut z = 0.0;
    for (j, &v) in row.iter().enumerate() {
        if Some(j) != exclude {
            z += (v - mx).exp();
        }
    }
    mx + z.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::tensor::Init;

    fn t(dims: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::from_vec(Shape::new(dims).unwrap(), data).unwrap()
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], vec![1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn backward_consumes_tape() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], vec![1.0, 2.0]), true);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::TapeConsumed)));
    }

    #[test]
    fn sum_backward_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], vec![1.0, -2.0, 5.0]), true);
        let s = tape.sum(x).unwrap();
        assert_eq!(tape.value(s).item().unwrap(), 4.0);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn unreached_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], vec![1.0, 2.0]), true);
        let y = tape.leaf(t(&[2], vec![3.0, 4.0]), true);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(y).is_none());
        assert_eq!(tape.grad_or_zeros(y).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], vec![-1.0, 0.0, 2.0]), true);
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn values_are_immutable_once_recorded() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], vec![1.0, 2.0]), true);
        let snapshot = tape.value(x).data().to_vec();
        let y = tape.scale(x, 3.0).unwrap();
        let _ = tape.add(y, x).unwrap();
        assert_eq!(tape.value(x).data(), snapshot.as_slice());
    }

    #[test]
    fn node_count_grows_by_one_per_op() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], vec![1.0, 2.0]), true);
        let n0 = tape.len();
        let y = tape.relu(x).unwrap();
        let z = tape.add(x, y).unwrap();
        let _ = tape.sum(z).unwrap();
        assert_eq!(tape.len(), n0 + 3);
    }

    #[test]
    fn linear_matches_hand_computation() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], vec![1.0, 2.0]), true);
        let w = tape.leaf(t(&[2, 3], vec![1.0, 0.0, -1.0, 2.0, 1.0, 0.0]), true);
        let b = tape.leaf(t(&[3], vec![0.5, 0.5, 0.5]), true);
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[5.5, 2.5, -0.5]);
    }

    #[test]
    fn upsample_then_pool_preserves_mean() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]), true);
        let u = tape.upsample2x(x).unwrap();
        let p = tape.global_avg_pool(u).unwrap();
        assert_eq!(tape.value(p).data(), &[2.5]);
    }

    #[test]
    fn bn_train_normalizes_and_updates_running_stats() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]), true);
        let gamma = tape.leaf(t(&[1], vec![1.0]), true);
        let beta = tape.leaf(t(&[1], vec![0.0]), true);
        let mut stats = RunningStats::new(1);
        let y = tape
            .batchnorm2d(x, gamma, beta, &mut stats, Phase::Train, 0.1, 1e-5)
            .unwrap();
        let out = tape.value(y).data();
        let mean: f64 = out.iter().sum::<f64>() / 4.0;
        let var: f64 = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4); // eps slightly shrinks the variance
        assert!((stats.mean[0] - 0.25).abs() < 1e-12); // 0.9*0 + 0.1*2.5
        assert!((stats.var[0] - (0.9 + 0.1 * 1.25)).abs() < 1e-12);
    }

    #[test]
    fn bn_eval_uses_running_stats_and_leaves_them_alone() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 1, 2], vec![3.0, 5.0]), false);
        let gamma = tape.leaf(t(&[1], vec![2.0]), false);
        let beta = tape.leaf(t(&[1], vec![1.0]), false);
        let mut stats = RunningStats { mean: vec![3.0], var: vec![4.0] };
        let before = stats.clone();
        let y = tape
            .batchnorm2d(x, gamma, beta, &mut stats, Phase::Eval, 0.1, 1e-12)
            .unwrap();
        let out = tape.value(y).data();
        assert!((out[0] - 1.0).abs() < 1e-6); // (3-3)/2 * 2 + 1
        assert!((out[1] - 3.0).abs() < 1e-6); // (5-3)/2 * 2 + 1
        assert_eq!(stats, before);
    }

    #[test]
    fn bn_train_rejects_single_value_batch() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2, 1, 1], vec![1.0, 2.0]), true);
        let gamma = tape.leaf(t(&[2], vec![1.0, 1.0]), true);
        let beta = tape.leaf(t(&[2], vec![0.0, 0.0]), true);
        let mut stats = RunningStats::new(2);
        let r = tape.batchnorm2d(x, gamma, beta, &mut stats, Phase::Train, 0.1, 1e-5);
        assert!(matches!(r, Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn conv_rejects_unsupported_geometry() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::create(&[1, 1, 4, 4], Init::Ones).unwrap(), false);
        let k5 = tape.leaf(Tensor::create(&[1, 1, 5, 5], Init::Ones).unwrap(), false);
        assert!(matches!(tape.conv2d(x, k5, 1, 1), Err(Error::InvalidShape(_))));
        let k3 = tape.leaf(Tensor::create(&[1, 1, 3, 3], Init::Ones).unwrap(), false);
        assert!(matches!(tape.conv2d(x, k3, 3, 1), Err(Error::InvalidHyperparameter(_))));
        let kc = tape.leaf(Tensor::create(&[1, 2, 3, 3], Init::Ones).unwrap(), false);
        assert!(matches!(tape.conv2d(x, kc, 1, 1), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn row_normalize_produces_unit_rows_and_keeps_zero_rows_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], vec![3.0, 4.0, 0.0, 0.0]), true);
        let y = tape.row_l2_normalize(x).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] - 0.6).abs() < 1e-15);
        assert!((out[1] - 0.8).abs() < 1e-15);
        assert_eq!(&out[2..], &[0.0, 0.0]);
    }

    #[test]
    fn info_nce_single_pair_is_zero() {
        // One anchor, one candidate besides itself: numerator equals the
        // whole denominator, so the loss vanishes.
        let mut tape = Tape::new();
        let s = tape.leaf(t(&[2, 2], vec![0.0, 0.7, 0.7, 0.0]), true);
        let l = tape.info_nce_sum(s, vec![1, 0], true).unwrap();
        assert!(tape.value(l).item().unwrap().abs() < 1e-15);
    }

    #[test]
    fn info_nce_is_stable_under_huge_logits() {
        let mut tape = Tape::new();
        let s = tape.leaf(t(&[2, 3], vec![900.0, 901.0, 899.0, 900.0, 902.0, 901.0]), true);
        let l = tape.info_nce_sum(s, vec![1, 2], false).unwrap();
        let v = tape.value(l).item().unwrap();
        assert!(v.is_finite());
        tape.backward(l).unwrap();
        assert!(tape.grad(s).unwrap().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn info_nce_rejects_self_positive_under_exclusion() {
        let mut tape = Tape::new();
        let s = tape.leaf(t(&[2, 2], vec![0.0; 4]), true);
        assert!(matches!(
            tape.info_nce_sum(s, vec![0, 0], true),
            Err(Error::InvalidHyperparameter(_))
        ));
    }

    #[test]
    fn soft_ce_uniform_logits_is_ln_c() {
        let mut tape = Tape::new();
        let s = tape.leaf(t(&[1, 3], vec![0.4, 0.4, 0.4]), true);
        let targets = t(&[1, 3], vec![1.0, 0.0, 0.0]);
        let l = tape.soft_ce_sum(s, &targets, vec![1.0]).unwrap();
        assert!((tape.value(l).item().unwrap() - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn soft_ce_perfect_prediction_goes_to_zero() {
        let mut tape = Tape::new();
        let s = tape.leaf(t(&[1, 3], vec![30.0, 0.0, 0.0]), true);
        let targets = t(&[1, 3], vec![1.0, 0.0, 0.0]);
        let l = tape.soft_ce_sum(s, &targets, vec![1.0]).unwrap();
        assert!(tape.value(l).item().unwrap() < 1e-12);
    }

    #[test]
    fn mul_backward_exchanges_factors() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], vec![2.0, 3.0]), true);
        let b = tape.leaf(t(&[2], vec![5.0, 7.0]), true);
        let p = tape.mul(a, b).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[5.0, 7.0]);
        assert_eq!(tape.grad(b).unwrap(), &[2.0, 3.0]);
    }

    #[test]
    fn grad_accumulates_over_shared_inputs() {
        // s = sum(x + x) => ds/dx = 2.
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], vec![1.0, 1.0]), true);
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }
}
