//! The layer zoo and the GradNet combinator.
//!
//! A GradNet layer is interpolate(early(x), late(x), g) with the gate g
//! supplied by the annealing schedule. Most gradual layers are literally the
//! generic [`GradNetCombinator`] over two static components; GReLU and
//! Inverse GReLU instead fold the gate into a leaky-relu slope (same math,
//! no second branch), and Gradual NiN shares its first convolution between
//! branches, so it gets a dedicated node.

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tape::{NodeId, Padding, PoolKind, Tape};
use crate::tensor::Tensor;
use rand::Rng;

/// Index into the model's parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics for one batchnorm layer. Updated only by train-mode
/// forward passes that actually execute the BN branch.
#[derive(Clone, Debug)]
pub struct BnRunning {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BnRunning {
    pub fn new(features: usize, momentum: f64, eps: f64) -> Self {
        BnRunning { mean: vec![0.0; features], var: vec![1.0; features], momentum, eps }
    }

    fn fold(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        for (r, &b) in self.mean.iter_mut().zip(batch_mean) {
            *r = self.momentum * *r + (1.0 - self.momentum) * b;
        }
        for (r, &b) in self.var.iter_mut().zip(batch_var) {
            *r = self.momentum * *r + (1.0 - self.momentum) * b;
        }
    }
}

/// Everything a forward pass needs besides the input itself.
pub struct ForwardCtx<'a> {
    pub mode: Mode,
    /// The schedule's gate for this step.
    pub g: f64,
    /// ParamId -> tape leaf for this pass.
    pub params: &'a [NodeId],
    pub bn: &'a mut [BnRunning],
    pub seed: u64,
    pub epoch: u64,
    pub batch: u64,
}

/// The weighted mean of two shape-compatible components. `fixed_g` pins the
/// gate (the constant-mix baselines); otherwise the schedule's gate applies.
/// At exact endpoints only the active branch runs — observable through cost
/// and rng consumption, never through values.
#[derive(Clone, Debug)]
pub struct GradNetCombinator {
    pub early: Box<Layer>,
    pub late: Box<Layer>,
    pub fixed_g: Option<f64>,
}

#[derive(Clone, Debug)]
pub enum Layer {
    Identity,
    Dense { w: ParamId, b: ParamId },
    Relu,
    LeakyRelu { slope: f64 },
    Abs,
    /// GradNet(identity -> relu) folded into a leaky relu with slope 1-g.
    GRelu,
    /// GradNet(abs -> relu): a leaky relu with slope g-1.
    InverseGRelu,
    /// Inverted dropout: keep with probability 1-p, scale kept values by
    /// 1/(1-p). Identity in eval mode. `stream` is its rng stream id.
    Dropout { p: f64, stream: u64 },
    MeanPool { window: usize, stride: usize },
    MaxPool { window: usize, stride: usize },
    BatchNorm { gamma: ParamId, beta: ParamId, state: usize },
    Conv { k: ParamId, stride: usize, padding: Padding },
    /// conv -> relu -> 1x1 conv as the late branch over a shared first
    /// convolution: (1-g)*c + g*conv1x1(relu(c)), c = conv(x).
    GradualNin { k: ParamId, k1: ParamId },
    Flatten,
    GradNet(GradNetCombinator),
}

impl Layer {
    /// Wrap two components in the generic combinator.
    pub fn gradnet(early: Layer, late: Layer) -> Layer {
        Layer::GradNet(GradNetCombinator {
            early: Box::new(early),
            late: Box::new(late),
            fixed_g: None,
        })
    }

    pub fn gradnet_fixed(early: Layer, late: Layer, g: f64) -> Layer {
        Layer::GradNet(GradNetCombinator {
            early: Box::new(early),
            late: Box::new(late),
            fixed_g: Some(g),
        })
    }

    /// Gradual dropout per the combinator definition: identity early branch,
    /// inverted dropout late branch.
    pub fn gradual_dropout(p: f64, stream: u64) -> Layer {
        Layer::gradnet(Layer::Identity, Layer::Dropout { p, stream })
    }

    /// Gradual pooling: mean pool early, max pool late, same windows.
    pub fn gradual_pool(window: usize, stride: usize) -> Layer {
        Layer::gradnet(
            Layer::MeanPool { window, stride },
            Layer::MaxPool { window, stride },
        )
    }

    /// Gradual batchnorm: BN early, identity late. Past g=1 the BN branch is
    /// never executed, so neither batch nor running statistics are touched
    /// and single-example evaluation is exact.
    pub fn gradual_batchnorm(gamma: ParamId, beta: ParamId, state: usize) -> Layer {
        Layer::gradnet(Layer::BatchNorm { gamma, beta, state }, Layer::Identity)
    }

    /// Gradual convolution: identity early, same-padded stride-1 conv late.
    pub fn gradual_conv(k: ParamId) -> Layer {
        Layer::gradnet(Layer::Identity, Layer::Conv { k, stride: 1, padding: Padding::Same })
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId, ctx: &mut ForwardCtx) -> Result<NodeId> {
        match self {
            Layer::Identity => Ok(x),
            Layer::Dense { w, b } => {
                let h = tape.matmul(x, ctx.params[w.0])?;
                tape.add_feature(h, ctx.params[b.0])
            }
            Layer::Relu => Ok(tape.relu(x)),
            Layer::LeakyRelu { slope } => Ok(tape.leaky_relu(x, *slope)),
            Layer::Abs => Ok(tape.abs(x)),
            Layer::GRelu => Ok(tape.leaky_relu(x, 1.0 - ctx.g)),
            Layer::InverseGRelu => Ok(tape.leaky_relu(x, ctx.g - 1.0)),
            Layer::Dropout { p, stream: sid } => {
                if ctx.mode == Mode::Eval || *p == 0.0 {
                    return Ok(x);
                }
                let keep = 1.0 - p;
                let mut rng = stream(ctx.seed, *sid, ctx.epoch, ctx.batch);
                let shape = tape.value(x).shape().to_vec();
                let mask: Vec<f64> = (0..tape.value(x).len())
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                tape.mul_mask(x, Tensor::new(shape, mask)?)
            }
            Layer::MeanPool { window, stride } => tape.pool2d(x, PoolKind::Mean, *window, *stride),
            Layer::MaxPool { window, stride } => tape.pool2d(x, PoolKind::Max, *window, *stride),
            Layer::BatchNorm { gamma, beta, state } => {
                let (gamma, beta) = (ctx.params[gamma.0], ctx.params[beta.0]);
                match ctx.mode {
                    Mode::Train => {
                        let eps = ctx.bn[*state].eps;
                        let (y, stats) = tape.batchnorm(x, gamma, beta, eps)?;
                        ctx.bn[*state].fold(&stats.mean, &stats.var);
                        Ok(y)
                    }
                    Mode::Eval => {
                        // Affine form from running stats:
                        // y = x * (gamma*inv) + (beta - mean*gamma*inv)
                        let st = &ctx.bn[*state];
                        let inv: Vec<f64> =
                            st.var.iter().map(|&v| 1.0 / (v + st.eps).sqrt()).collect();
                        let f = inv.len();
                        let inv = tape.leaf(Tensor::new(vec![f], inv)?);
                        let mean = tape.leaf(Tensor::new(vec![f], st.mean.clone())?);
                        let scale = tape.mul(gamma, inv)?;
                        let shift_sub = tape.mul(mean, scale)?;
                        let shift = tape.sub(beta, shift_sub)?;
                        let y = tape.mul_feature(x, scale)?;
                        tape.add_feature(y, shift)
                    }
                }
            }
            Layer::Conv { k, stride, padding } => {
                tape.conv2d(x, ctx.params[k.0], *stride, *padding)
            }
            Layer::GradualNin { k, k1 } => {
                let c = tape.conv2d(x, ctx.params[k.0], 1, Padding::Same)?;
                let g = ctx.g;
                if g == 0.0 {
                    return Ok(c);
                }
                let r = tape.relu(c);
                let nin = tape.conv2d(r, ctx.params[k1.0], 1, Padding::Same)?;
                if g == 1.0 {
                    return Ok(nin);
                }
                tape.interp(c, nin, g)
            }
            Layer::Flatten => {
                let shape = tape.value(x).shape();
                let n = shape[0];
                let rest: usize = shape[1..].iter().product();
                tape.reshape(x, &[n, rest])
            }
            Layer::GradNet(comb) => {
                let g = comb.fixed_g.unwrap_or(ctx.g);
                if g == 0.0 {
                    return comb.early.forward(tape, x, ctx);
                }
                if g == 1.0 {
                    return comb.late.forward(tape, x, ctx);
                }
                let e = comb.early.forward(tape, x, ctx)?;
                let l = comb.late.forward(tape, x, ctx)?;
                if tape.value(e).shape() != tape.value(l).shape() {
                    return Err(Error::Dim(format!(
                        "combinator branches disagree on shape: {:?} vs {:?}",
                        tape.value(e).shape(),
                        tape.value(l).shape()
                    )));
                }
                tape.interp(e, l, g)
            }
        }
    }

    /// Parameter ids used by this layer (and its branches).
    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Layer::Dense { w, b } => vec![*w, *b],
            Layer::BatchNorm { gamma, beta, .. } => vec![*gamma, *beta],
            Layer::Conv { k, .. } => vec![*k],
            Layer::GradualNin { k, k1 } => vec![*k, *k1],
            Layer::GradNet(c) => {
                let mut ids = c.early.param_ids();
                ids.extend(c.late.param_ids());
                ids
            }
            _ => vec![],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx<'a>(
        mode: Mode,
        g: f64,
        params: &'a [NodeId],
        bn: &'a mut [BnRunning],
    ) -> ForwardCtx<'a> {
        ForwardCtx { mode, g, params, bn, seed: 3, epoch: 1, batch: 2 }
    }

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn grelu_matches_arithmetic() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[-2.0, 3.0]));
        let mut bn = [];
        let y = Layer::GRelu
            .forward(&mut tape, x, &mut ctx(Mode::Train, 0.25, &[], &mut bn))
            .unwrap();
        assert_eq!(tape.value(y).data(), &[-1.5, 3.0]);
    }

    #[test]
    fn grelu_equals_generic_combinator() {
        let generic = Layer::gradnet(Layer::Identity, Layer::Relu);
        for g in [0.0, 0.3, 0.7, 1.0] {
            let mut tape = Tape::new();
            let x = tape.leaf(t(&[1, 4], &[-1.5, -0.2, 0.4, 2.0]));
            let mut bn = [];
            let fused = Layer::GRelu
                .forward(&mut tape, x, &mut ctx(Mode::Train, g, &[], &mut bn))
                .unwrap();
            let mut bn = [];
            let wide = generic
                .forward(&mut tape, x, &mut ctx(Mode::Train, g, &[], &mut bn))
                .unwrap();
            let diff = tape.value(fused).max_abs_diff(tape.value(wide));
            assert!(diff < 1e-12, "g={g}: {diff}");
        }
    }

    #[test]
    fn inverse_grelu_values() {
        let mut bn = [];
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 3], &[-2.0, -2.0, 4.0]));
        let y0 = Layer::InverseGRelu
            .forward(&mut tape, x, &mut ctx(Mode::Train, 0.0, &[], &mut bn))
            .unwrap();
        assert_eq!(tape.value(y0).data(), &[2.0, 2.0, 4.0]);
        let y5 = Layer::InverseGRelu
            .forward(&mut tape, x, &mut ctx(Mode::Train, 0.5, &[], &mut bn))
            .unwrap();
        assert_eq!(tape.value(y5).data(), &[1.0, 1.0, 4.0]);
    }

    #[test]
    fn dropout_eval_is_identity_and_p0_exact() {
        let mut bn = [];
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, -2.0, 3.0, -4.0]));
        let d = Layer::Dropout { p: 0.5, stream: 0 };
        let y = d.forward(&mut tape, x, &mut ctx(Mode::Eval, 1.0, &[], &mut bn)).unwrap();
        assert_eq!(y, x);

        let d0 = Layer::Dropout { p: 0.0, stream: 0 };
        let y0 = d0.forward(&mut tape, x, &mut ctx(Mode::Train, 1.0, &[], &mut bn)).unwrap();
        assert_eq!(tape.value(y0).data(), tape.value(x).data());
    }

    #[test]
    fn dropout_masks_replay_by_stream() {
        let d = Layer::Dropout { p: 0.5, stream: 4 };
        let mut bn = [];
        let mut out = Vec::new();
        for _ in 0..2 {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::full(&[1, 64], 1.0));
            let y = d.forward(&mut tape, x, &mut ctx(Mode::Train, 1.0, &[], &mut bn)).unwrap();
            out.push(tape.value(y).clone());
        }
        assert_eq!(out[0], out[1]);
    }

    #[test]
    fn gradual_pool_is_convex_mix() {
        let layer = Layer::gradual_pool(2, 2);
        let mut bn = [];
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = layer.forward(&mut tape, x, &mut ctx(Mode::Train, 0.5, &[], &mut bn)).unwrap();
        assert_eq!(tape.value(y).data(), &[3.25]);
    }

    #[test]
    fn gradual_bn_midpoint_matches_arithmetic() {
        // batch [1,3], gamma=1, beta=0, g=0.5 -> 0.5*[-1,1] + 0.5*[1,3] = [0,2]
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 1], &[1.0, 3.0]));
        let gamma = tape.leaf(t(&[1], &[1.0]));
        let beta = tape.leaf(t(&[1], &[0.0]));
        let params = [gamma, beta];
        let mut bn = [BnRunning::new(1, 0.9, 1e-12)];
        let layer = Layer::gradual_batchnorm(ParamId(0), ParamId(1), 0);
        let y = layer
            .forward(&mut tape, x, &mut ctx(Mode::Train, 0.5, &params, &mut bn))
            .unwrap();
        let got = tape.value(y).data();
        assert!((got[0] - 0.0).abs() < 1e-6 && (got[1] - 2.0).abs() < 1e-6, "{got:?}");
    }

    #[test]
    fn gradual_bn_at_g1_skips_bn_entirely() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[5.0, -1.0]));
        let gamma = tape.leaf(t(&[2], &[1.0, 1.0]));
        let beta = tape.leaf(t(&[2], &[0.0, 0.0]));
        let params = [gamma, beta];
        let mut bn = [BnRunning::new(2, 0.9, 1e-5)];
        let before = (bn[0].mean.clone(), bn[0].var.clone());
        let layer = Layer::gradual_batchnorm(ParamId(0), ParamId(1), 0);
        // Batch of one would be a contract error if the BN branch ran.
        let y = layer
            .forward(&mut tape, x, &mut ctx(Mode::Train, 1.0, &params, &mut bn))
            .unwrap();
        assert_eq!(y, x);
        assert_eq!((bn[0].mean.clone(), bn[0].var.clone()), before);
    }

    #[test]
    fn combinator_rejects_mismatched_branches() {
        // Early branch keeps spatial dims, late halves them.
        let layer = Layer::gradnet(Layer::Identity, Layer::MaxPool { window: 2, stride: 2 });
        let mut bn = [];
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 4, 4]));
        let err = layer.forward(&mut tape, x, &mut ctx(Mode::Train, 0.5, &[], &mut bn));
        assert!(err.is_err());
    }

    #[test]
    fn gradual_conv_identity_kernel_fixed_point() {
        // 1x1 identity kernel: both branches equal x, so output == x for all g.
        let mut bn = [];
        for g in [0.0, 0.4, 1.0] {
            let mut tape = Tape::new();
            let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, -2.0, 0.5, 3.0]));
            let k = tape.leaf(t(&[1, 1, 1, 1], &[1.0]));
            let params = [k];
            let layer = Layer::gradual_conv(ParamId(0));
            let y = layer
                .forward(&mut tape, x, &mut ctx(Mode::Train, g, &params, &mut bn))
                .unwrap();
            let diff = tape.value(y).max_abs_diff(tape.value(x));
            assert!(diff < 1e-15, "g={g}: {diff}");
        }
    }

    #[test]
    fn flatten_shape() {
        let mut bn = [];
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3, 4, 5]));
        let y = Layer::Flatten
            .forward(&mut tape, x, &mut ctx(Mode::Train, 0.0, &[], &mut bn))
            .unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 60]);
    }
}
