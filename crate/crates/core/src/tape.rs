//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every forward pass builds a fresh [`Tape`] (define-by-run): layer behavior
//! depends on the current gate value, so there is no graph worth caching.
//! Nodes are appended in execution order, which makes the node list a valid
//! topological order by construction — backward is a single reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value on a [`Tape`]. Only meaningful for the tape that
/// produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Padding policy for convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// Output spatial size ceil(in/stride); zero padding split evenly with
    /// the extra pixel on the high side when the total is odd.
    Same,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Mean,
    Max,
}

/// Per-feature batch statistics captured by a train-mode batchnorm node,
/// handed back to the caller so it can fold them into running averages.
#[derive(Clone, Debug)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
}

struct BnSaved {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    /// Broadcast-add a length-F vector along the feature axis (axis 1).
    AddFeature(NodeId, NodeId),
    /// Broadcast-multiply by a length-F vector along the feature axis.
    MulFeature(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Abs(NodeId),
    /// Elementwise product with a constant tensor (dropout masks).
    MulMask(NodeId, Tensor),
    /// (1-g)*a + g*b with constant g.
    Interp(NodeId, NodeId, f64),
    Sum(NodeId),
    Reshape(NodeId),
    Conv2d {
        x: NodeId,
        k: NodeId,
        stride: usize,
        /// Resolved (top, bottom, left, right) zero padding.
        pads: (usize, usize, usize, usize),
    },
    Pool2d {
        x: NodeId,
        kind: PoolKind,
        window: usize,
        stride: usize,
        /// For max pooling: flat input index of the winner per output element.
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        saved: BnSaved,
    },
    SoftmaxXent {
        logits: NodeId,
        labels: Vec<usize>,
        softmax: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only Wengert list. Inputs of a node always precede it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Option<Vec<Tensor>>,
}

/// Split (N, F, ...) into (outer batch, feature count, inner spatial size):
/// [N, F] -> (N, F, 1) and [N, C, H, W] -> (N, C, H*W). The feature axis is
/// always axis 1.
fn feature_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [n, f] => Ok((*n, *f, 1)),
        [n, c, h, w] => Ok((*n, *c, h * w)),
        other => Err(Error::Dim(format!(
            "feature-axis op expects rank 2 or 4 tensor, got {other:?}"
        ))),
    }
}

fn resolve_pads(
    (h, w): (usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    padding: Padding,
) -> (usize, usize, usize, usize) {
    match padding {
        Padding::Valid => (0, 0, 0, 0),
        Padding::Same => {
            let out_h = h.div_ceil(stride);
            let out_w = w.div_ceil(stride);
            let total_h = ((out_h - 1) * stride + kh).saturating_sub(h);
            let total_w = ((out_w - 1) * stride + kw).saturating_sub(w);
            (total_h / 2, total_h - total_h / 2, total_w / 2, total_w - total_w / 2)
        }
    }
}

/// m×k (row-major) times k×n (row-major) accumulated into `c` (m×n), as
/// c = alpha*a*b + beta*c. Thin wrapper over the blocked dgemm kernel.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the loss w.r.t. this node. `None` before [`backward`]
    /// has run.
    ///
    /// [`backward`]: Tape::backward
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.as_ref().map(|g| &g[id.0])
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    fn binary_elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), f)?;
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = self.value(x).map(|v| c * v);
        self.push(value, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::AddScalar(x))
    }

    fn feature_check(&self, x: NodeId, v: NodeId) -> Result<(usize, usize, usize)> {
        let layout = feature_layout(self.value(x).shape())?;
        let vs = self.value(v).shape();
        if vs.len() != 1 || vs[0] != layout.1 {
            return Err(Error::Dim(format!(
                "feature vector shape {vs:?} does not match feature count {} of {:?}",
                layout.1,
                self.value(x).shape()
            )));
        }
        Ok(layout)
    }

    pub fn add_feature(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (n, f, s) = self.feature_check(x, v)?;
        let xv = self.value(x).data();
        let vv = self.value(v).data();
        let mut out = Vec::with_capacity(xv.len());
        for i in 0..n * f * s {
            out.push(xv[i] + vv[(i / s) % f]);
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(value, Op::AddFeature(x, v)))
    }

    pub fn mul_feature(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (n, f, s) = self.feature_check(x, v)?;
        let xv = self.value(x).data();
        let vv = self.value(v).data();
        let mut out = Vec::with_capacity(xv.len());
        for i in 0..n * f * s {
            out.push(xv[i] * vv[(i / s) % f]);
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(value, Op::MulFeature(x, v)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if ka != kb {
            return Err(Error::Dim(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            ka,
            n,
            1.0,
            self.value(a).data(),
            (ka as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            0.0,
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        debug_assert!(slope.is_finite());
        let value = self.value(x).map(|v| if v >= 0.0 { v } else { slope * v });
        self.push(value, Op::LeakyRelu(x, slope))
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(f64::abs);
        self.push(value, Op::Abs(x))
    }

    pub fn mul_mask(&mut self, x: NodeId, mask: Tensor) -> Result<NodeId> {
        let value = self.value(x).zip_map(&mask, |a, m| a * m)?;
        Ok(self.push(value, Op::MulMask(x, mask)))
    }

    /// (1-g)*a + g*b. The combinator core: gradient flows to both branches
    /// scaled by their interpolation weights.
    pub fn interp(&mut self, a: NodeId, b: NodeId, g: f64) -> Result<NodeId> {
        if !g.is_finite() {
            return Err(Error::Contract(format!("non-finite gate {g}")));
        }
        self.binary_elementwise(a, b, |x, y| (1.0 - g) * x + g * y, Op::Interp(a, b, g))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        k: NodeId,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be >= 1".into()));
        }
        let (n, c, h, w) = self.value(x).dims4()?;
        let (f, kc, kh, kw) = self.value(k).dims4()?;
        if kc != c {
            return Err(Error::Dim(format!(
                "conv2d kernel expects {kc} input channels, input has {c}"
            )));
        }
        let pads = resolve_pads((h, w), (kh, kw), stride, padding);
        let (pt, pb, pl, pr) = pads;
        let (ph, pw) = (h + pt + pb, w + pl + pr);
        if kh > ph || kw > pw {
            return Err(Error::Dim(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {ph}x{pw}"
            )));
        }
        let oh = (ph - kh) / stride + 1;
        let ow = (pw - kw) / stride + 1;

        let xv = self.value(x).data();
        let kv = self.value(k).data();
        let mut out = vec![0.0; n * f * oh * ow];
        for in_ in 0..n {
            for fo in 0..f {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for i in 0..kh {
                                // Input row in unpadded coordinates.
                                let iy = (y * stride + i) as isize - pt as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for j in 0..kw {
                                    let ix = (xo * stride + j) as isize - pl as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += xv[((in_ * c + ci) * h + iy as usize) * w
                                        + ix as usize]
                                        * kv[((fo * c + ci) * kh + i) * kw + j];
                                }
                            }
                        }
                        out[((in_ * f + fo) * oh + y) * ow + xo] = acc;
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, f, oh, ow], out)?;
        Ok(self.push(value, Op::Conv2d { x, k, stride, pads }))
    }

    pub fn pool2d(
        &mut self,
        x: NodeId,
        kind: PoolKind,
        window: usize,
        stride: usize,
    ) -> Result<NodeId> {
        if window == 0 || stride == 0 {
            return Err(Error::Contract("pool2d window and stride must be >= 1".into()));
        }
        let (n, c, h, w) = self.value(x).dims4()?;
        if window > h || window > w {
            return Err(Error::Dim(format!(
                "pool2d window {window} exceeds spatial extent {h}x{w}"
            )));
        }
        let oh = (h - window) / stride + 1;
        let ow = (w - window) / stride + 1;
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = Vec::new();
        if kind == PoolKind::Max {
            argmax.resize(out.len(), 0usize);
        }
        for in_ in 0..n {
            for ci in 0..c {
                let base = (in_ * c + ci) * h * w;
                for y in 0..oh {
                    for xo in 0..ow {
                        let o = ((in_ * c + ci) * oh + y) * ow + xo;
                        match kind {
                            PoolKind::Mean => {
                                let mut acc = 0.0;
                                for i in 0..window {
                                    for j in 0..window {
                                        acc += xv[base
                                            + (y * stride + i) * w
                                            + (xo * stride + j)];
                                    }
                                }
                                out[o] = acc / (window * window) as f64;
                            }
                            PoolKind::Max => {
                                // First occurrence in row-major scan wins ties.
                                let mut best = f64::NEG_INFINITY;
                                let mut best_at = base + y * stride * w + xo * stride;
                                for i in 0..window {
                                    for j in 0..window {
                                        let at = base
                                            + (y * stride + i) * w
                                            + (xo * stride + j);
                                        if xv[at] > best {
                                            best = xv[at];
                                            best_at = at;
                                        }
                                    }
                                }
                                out[o] = best;
                                argmax[o] = best_at;
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, Op::Pool2d { x, kind, window, stride, argmax }))
    }

    /// Train-mode batch normalization over the feature axis, returning the
    /// normalized output and the batch statistics (for running-average
    /// updates, which are the caller's business).
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, BnBatchStats)> {
        let (n, f, s) = self.feature_check(x, gamma)?;
        self.feature_check(x, beta)?;
        let m = n * s;
        if m < 2 {
            return Err(Error::Contract(
                "batchnorm in train mode needs at least 2 values per feature".into(),
            ));
        }
        let xv = self.value(x).data();
        let mut mean = vec![0.0; f];
        let mut var = vec![0.0; f];
        for i in 0..n * f * s {
            mean[(i / s) % f] += xv[i];
        }
        for mu in &mut mean {
            *mu /= m as f64;
        }
        for i in 0..n * f * s {
            let d = xv[i] - mean[(i / s) % f];
            var[(i / s) % f] += d * d;
        }
        for v in &mut var {
            *v /= m as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();

        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for i in 0..n * f * s {
            let fi = (i / s) % f;
            let xh = (xv[i] - mean[fi]) * inv_std[fi];
            xhat.push(xh);
            out.push(gv[fi] * xh + bv[fi]);
        }
        let shape = self.value(x).shape().to_vec();
        let value = Tensor::new(shape.clone(), out)?;
        let saved = BnSaved { xhat: Tensor::new(shape, xhat)?, inv_std };
        let id = self.push(value, Op::BatchNorm { x, gamma, beta, saved });
        Ok((id, BnBatchStats { mean, var }))
    }

    /// Mean over the batch of -log softmax(logits)[label], computed with
    /// max-subtraction. Gradient per row is (softmax - onehot)/N.
    pub fn softmax_xent(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (n, k) = self.value(logits).dims2()?;
        if labels.len() != n {
            return Err(Error::Dim(format!(
                "{n} logit rows but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index(format!("label {bad} out of range for {k} classes")));
        }
        let z = self.value(logits).data();
        let mut softmax = vec![0.0; n * k];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &z[r * k..(r + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..k {
                let e = (row[j] - max).exp();
                softmax[r * k + j] = e;
                denom += e;
            }
            for j in 0..k {
                softmax[r * k + j] /= denom;
            }
            loss += denom.ln() - (row[labels[r]] - max);
        }
        loss /= n as f64;
        let softmax = Tensor::new(vec![n, k], softmax)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent { logits, labels: labels.to_vec(), softmax },
        ))
    }

    /// Reverse sweep from a scalar loss. Populates a gradient for every node;
    /// nodes the loss does not depend on get zeros. Calling twice on the same
    /// tape is an error — build a new tape instead.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::Contract(
                "backward already ran on this tape; gradients would silently accumulate"
                    .into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape()))
            .collect();
        grads[loss.0].data_mut()[0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            // Inputs always precede node i, so split keeps borrows disjoint.
            let (lo, hi) = grads.split_at_mut(i);
            let gout = &hi[0];
            if gout.data().iter().all(|&g| g == 0.0) {
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut lo[a.0], gout.data(), 1.0);
                    accumulate(&mut lo[b.0], gout.data(), 1.0);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut lo[a.0], gout.data(), 1.0);
                    accumulate(&mut lo[b.0], gout.data(), -1.0);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    accumulate_prod(&mut lo[a.0], gout.data(), bv);
                    accumulate_prod(&mut lo[b.0], gout.data(), av);
                }
                Op::Scale(x, c) => accumulate(&mut lo[x.0], gout.data(), *c),
                Op::AddScalar(x) => accumulate(&mut lo[x.0], gout.data(), 1.0),
                Op::AddFeature(x, v) => {
                    accumulate(&mut lo[x.0], gout.data(), 1.0);
                    let (_, f, s) = feature_layout(self.nodes[x.0].value.shape()).unwrap();
                    let gv = lo[v.0].data_mut();
                    for (i, &g) in gout.data().iter().enumerate() {
                        gv[(i / s) % f] += g;
                    }
                }
                Op::MulFeature(x, v) => {
                    let (_, f, s) = feature_layout(self.nodes[x.0].value.shape()).unwrap();
                    let vv = self.nodes[v.0].value.data();
                    {
                        let gx = lo[x.0].data_mut();
                        for (i, &g) in gout.data().iter().enumerate() {
                            gx[i] += g * vv[(i / s) % f];
                        }
                    }
                    let xv = self.nodes[x.0].value.data();
                    let gv = lo[v.0].data_mut();
                    for (i, &g) in gout.data().iter().enumerate() {
                        gv[(i / s) % f] += g * xv[i];
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                    let n = self.nodes[b.0].value.dims2().unwrap().1;
                    // dA = G * B^T
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        gout.data(),
                        (n as isize, 1),
                        self.nodes[b.0].value.data(),
                        (1, n as isize),
                        1.0,
                        lo[a.0].data_mut(),
                    );
                    // dB = A^T * G
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        self.nodes[a.0].value.data(),
                        (1, k as isize),
                        gout.data(),
                        (n as isize, 1),
                        1.0,
                        lo[b.0].data_mut(),
                    );
                }
                // Subgradient at the kink comes from the x >= 0 branch.
                Op::Relu(x) => {
                    let xv = self.nodes[x.0].value.data();
                    let gx = lo[x.0].data_mut();
                    for (i, &g) in gout.data().iter().enumerate() {
                        if xv[i] >= 0.0 {
                            gx[i] += g;
                        }
                    }
                }
                Op::LeakyRelu(x, slope) => {
                    let xv = self.nodes[x.0].value.data();
                    let gx = lo[x.0].data_mut();
                    for (i, &g) in gout.data().iter().enumerate() {
                        gx[i] += if xv[i] >= 0.0 { g } else { slope * g };
                    }
                }
                Op::Abs(x) => {
                    let xv = self.nodes[x.0].value.data();
                    let gx = lo[x.0].data_mut();
                    for (i, &g) in gout.data().iter().enumerate() {
                        gx[i] += if xv[i] >= 0.0 { g } else { -g };
                    }
                }
                Op::MulMask(x, mask) => accumulate_prod(&mut lo[x.0], gout.data(), mask.data()),
                Op::Interp(a, b, g) => {
                    accumulate(&mut lo[a.0], gout.data(), 1.0 - g);
                    accumulate(&mut lo[b.0], gout.data(), *g);
                }
                Op::Sum(x) => {
                    let g = gout.data()[0];
                    for gx in lo[x.0].data_mut() {
                        *gx += g;
                    }
                }
                Op::Reshape(x) => accumulate(&mut lo[x.0], gout.data(), 1.0),
                Op::Conv2d { x, k, stride, pads } => {
                    let (n, c, h, w) = self.nodes[x.0].value.dims4().unwrap();
                    let (f, _, kh, kw) = self.nodes[k.0].value.dims4().unwrap();
                    let (oh, ow) = {
                        let s = self.nodes[i].value.shape();
                        (s[2], s[3])
                    };
                    let (pt, _, pl, _) = *pads;
                    let xv = self.nodes[x.0].value.data();
                    let kv = self.nodes[k.0].value.data();
                    let go = gout.data();
                    {
                        let gk = lo[k.0].data_mut();
                        for in_ in 0..n {
                            for fo in 0..f {
                                for y in 0..oh {
                                    for xo in 0..ow {
                                        let g = go[((in_ * f + fo) * oh + y) * ow + xo];
                                        if g == 0.0 {
                                            continue;
                                        }
                                        for ci in 0..c {
                                            for ki in 0..kh {
                                                let iy = (y * stride + ki) as isize - pt as isize;
                                                if iy < 0 || iy >= h as isize {
                                                    continue;
                                                }
                                                for kj in 0..kw {
                                                    let ix =
                                                        (xo * stride + kj) as isize - pl as isize;
                                                    if ix < 0 || ix >= w as isize {
                                                        continue;
                                                    }
                                                    gk[((fo * c + ci) * kh + ki) * kw + kj] += g
                                                        * xv[((in_ * c + ci) * h + iy as usize)
                                                            * w
                                                            + ix as usize];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    let gx = lo[x.0].data_mut();
                    for in_ in 0..n {
                        for fo in 0..f {
                            for y in 0..oh {
                                for xo in 0..ow {
                                    let g = go[((in_ * f + fo) * oh + y) * ow + xo];
                                    if g == 0.0 {
                                        continue;
                                    }
                                    for ci in 0..c {
                                        for ki in 0..kh {
                                            let iy = (y * stride + ki) as isize - pt as isize;
                                            if iy < 0 || iy >= h as isize {
                                                continue;
                                            }
                                            for kj in 0..kw {
                                                let ix =
                                                    (xo * stride + kj) as isize - pl as isize;
                                                if ix < 0 || ix >= w as isize {
                                                    continue;
                                                }
                                                gx[((in_ * c + ci) * h + iy as usize) * w
                                                    + ix as usize] += g
                                                    * kv[((fo * c + ci) * kh + ki) * kw + kj];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Pool2d { x, kind, window, stride, argmax } => {
                    let (n, c, h, w) = self.nodes[x.0].value.dims4().unwrap();
                    let (oh, ow) = {
                        let s = self.nodes[i].value.shape();
                        (s[2], s[3])
                    };
                    let go = gout.data();
                    let gx = lo[x.0].data_mut();
                    match kind {
                        PoolKind::Max => {
                            for (o, &src) in argmax.iter().enumerate() {
                                gx[src] += go[o];
                            }
                        }
                        PoolKind::Mean => {
                            let inv = 1.0 / (window * window) as f64;
                            for in_ in 0..n {
                                for ci in 0..c {
                                    let base = (in_ * c + ci) * h * w;
                                    for y in 0..oh {
                                        for xo in 0..ow {
                                            let g = go[((in_ * c + ci) * oh + y) * ow + xo] * inv;
                                            for ki in 0..*window {
                                                for kj in 0..*window {
                                                    gx[base
                                                        + (y * stride + ki) * w
                                                        + (xo * stride + kj)] += g;
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::BatchNorm { x, gamma, beta, saved } => {
                    let (n, f, s) = feature_layout(self.nodes[x.0].value.shape()).unwrap();
                    let m = (n * s) as f64;
                    let go = gout.data();
                    let xh = saved.xhat.data();
                    let gv = self.nodes[gamma.0].value.data();

                    // Per-feature reductions of dxhat and dxhat*xhat.
                    let mut sum_dxh = vec![0.0; f];
                    let mut sum_dxh_xh = vec![0.0; f];
                    for i2 in 0..go.len() {
                        let fi = (i2 / s) % f;
                        let dxh = go[i2] * gv[fi];
                        sum_dxh[fi] += dxh;
                        sum_dxh_xh[fi] += dxh * xh[i2];
                    }
                    {
                        let gx = lo[x.0].data_mut();
                        for i2 in 0..go.len() {
                            let fi = (i2 / s) % f;
                            let dxh = go[i2] * gv[fi];
                            gx[i2] += saved.inv_std[fi] / m
                                * (m * dxh - sum_dxh[fi] - xh[i2] * sum_dxh_xh[fi]);
                        }
                    }
                    {
                        let gg = lo[gamma.0].data_mut();
                        for i2 in 0..go.len() {
                            gg[(i2 / s) % f] += go[i2] * xh[i2];
                        }
                    }
                    let gb = lo[beta.0].data_mut();
                    for i2 in 0..go.len() {
                        gb[(i2 / s) % f] += go[i2];
                    }
                }
                Op::SoftmaxXent { logits, labels, softmax } => {
                    let g = gout.data()[0];
                    let (n, k) = softmax.dims2().unwrap();
                    let p = softmax.data();
                    let gl = lo[logits.0].data_mut();
                    let inv_n = 1.0 / n as f64;
                    for r in 0..n {
                        for j in 0..k {
                            let onehot = if labels[r] == j { 1.0 } else { 0.0 };
                            gl[r * k + j] += g * (p[r * k + j] - onehot) * inv_n;
                        }
                    }
                }
            }
        }
        self.grads = Some(grads);
        Ok(())
    }
}

fn accumulate(into: &mut Tensor, from: &[f64], scale: f64) {
    for (d, &s) in into.data_mut().iter_mut().zip(from) {
        *d += scale * s;
    }
}

fn accumulate_prod(into: &mut Tensor, a: &[f64], b: &[f64]) {
    for ((d, &x), &y) in into.data_mut().iter_mut().zip(a).zip(b) {
        *d += x * y;
    }
}

/// Central-difference gradient of a scalar function: the verification oracle
/// every backward implementation is judged against.
pub fn finite_diff_grad(f: &mut dyn FnMut(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    assert!(eps > 0.0, "finite_diff_grad needs eps > 0");
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let lo = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (hi - lo) / (2.0 * eps);
    }
    grad
}
