//! Finite-difference verification of every differentiable operation and
//! every layer kind. The numeric oracle defines truth: central differences
//! with eps=1e-5, inputs sampled away from kinks.

use crate::layers::{BnRunning, ForwardCtx, Layer, Mode, ParamId};
use crate::rng::stream;
use crate::tape::{finite_diff_grad, NodeId, Padding, PoolKind, Tape};
use crate::tensor::Tensor;
use rand::Rng;
use std::fmt::Write as _;

pub const DEFAULT_TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct CheckEntry {
    pub name: String,
    pub max_rel_err: f64,
}

impl CheckEntry {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < tol
    }
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub tol: f64,
    pub entries: Vec<CheckEntry>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed(self.tol))
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{:<44} max_rel_err={:>12.3e}  {}",
                e.name,
                e.max_rel_err,
                if e.passed(self.tol) { "ok" } else { "FAIL" }
            );
        }
        if let Some(w) = self
            .entries
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        {
            let _ = writeln!(
                s,
                "{} checks, tol {:.1e}, worst {} at {:.3e}: {}",
                self.entries.len(),
                self.tol,
                w.name,
                w.max_rel_err,
                if self.passed() { "PASS" } else { "FAIL" }
            );
        }
        s
    }
}

/// Elementwise |a-n| / max(|a|, |n|, 1e-3), maxed over elements.
pub fn max_rel_err(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

/// Values with pairwise gaps ≥ 0.05 in shuffled order, roughly centered.
/// Safe for kinked ops: an eps=1e-5 perturbation cannot cross a relu zero
/// or flip a pooling argmax.
fn kink_free(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let len: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..len)
        .map(|i| (i as f64 - len as f64 / 2.0) * 0.05 + 0.025)
        .collect();
    for i in (1..len).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

fn smooth(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let len: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Reduce an op output to a scalar with fixed random weights so every output
/// element contributes a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, y: NodeId, weights: &Tensor) -> NodeId {
    let w = tape.leaf(weights.clone());
    let prod = tape.mul(y, w).expect("weight shape matches output");
    tape.sum(prod)
}

struct Suite {
    entries: Vec<CheckEntry>,
}

impl Suite {
    /// Check d(loss)/d(x0) for `fwd: (tape, x) -> scalar loss node`.
    fn check<F>(&mut self, name: &str, x0: &Tensor, mut fwd: F)
    where
        F: FnMut(&mut Tape, NodeId) -> NodeId,
    {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let loss = fwd(&mut tape, x);
        tape.backward(loss).expect("scalar loss");
        let analytic = tape.grad(x).expect("backward ran").clone();

        let mut f = |t: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let x = tape.leaf(t.clone());
            let loss = fwd(&mut tape, x);
            tape.value(loss).item()
        };
        let numeric = finite_diff_grad(&mut f, x0, EPS);
        self.entries.push(CheckEntry {
            name: name.to_string(),
            max_rel_err: max_rel_err(&analytic, &numeric),
        });
    }
}

fn op_checks(s: &mut Suite) {
    let mut r = stream(0xC0FFEE, 1, 0, 0);
    let a23 = smooth(&[2, 3], &mut r);
    let w23 = smooth(&[2, 3], &mut r);

    s.check("op add", &a23, {
        let (b, w) = (smooth(&[2, 3], &mut r), w23.clone());
        move |t, x| {
            let bn = t.leaf(b.clone());
            let y = t.add(x, bn).unwrap();
            weighted_sum(t, y, &w)
        }
    });
    s.check("op sub", &a23, {
        let (b, w) = (smooth(&[2, 3], &mut r), w23.clone());
        move |t, x| {
            let bn = t.leaf(b.clone());
            let y = t.sub(bn, x).unwrap();
            weighted_sum(t, y, &w)
        }
    });
    s.check("op mul", &a23, {
        let (b, w) = (smooth(&[2, 3], &mut r), w23.clone());
        move |t, x| {
            let bn = t.leaf(b.clone());
            let y = t.mul(x, bn).unwrap();
            weighted_sum(t, y, &w)
        }
    });
    s.check("op scale", &a23, {
        let w = w23.clone();
        move |t, x| {
            let y = t.scale(x, -1.7);
            weighted_sum(t, y, &w)
        }
    });
    s.check("op add_scalar", &a23, {
        let w = w23.clone();
        move |t, x| {
            let y = t.add_scalar(x, 0.37);
            weighted_sum(t, y, &w)
        }
    });
    s.check("op sum", &a23, |t, x| t.sum(x));
    s.check("op reshape", &a23, {
        let w = smooth(&[6], &mut r);
        move |t, x| {
            let y = t.reshape(x, &[6]).unwrap();
            weighted_sum(t, y, &w)
        }
    });

    // feature-axis broadcasts, on both 2-d and 4-d activations
    let x43 = smooth(&[4, 3], &mut r);
    let w43 = smooth(&[4, 3], &mut r);
    s.check("op add_feature x", &x43, {
        let (b, w) = (smooth(&[3], &mut r), w43.clone());
        move |t, x| {
            let bn = t.leaf(b.clone());
            let y = t.add_feature(x, bn).unwrap();
            weighted_sum(t, y, &w)
        }
    });
    s.check("op add_feature bias", &smooth(&[3], &mut r), {
        let (x, w) = (x43.clone(), w43.clone());
        move |t, bt| {
            let xn = t.leaf(x.clone());
            let y = t.add_feature(xn, bt).unwrap();
            weighted_sum(t, y, &w)
        }
    });
    let x4d = smooth(&[2, 3, 2, 2], &mut r);
    let w4d = smooth(&[2, 3, 2, 2], &mut r);
    s.check("op mul_feature x (4d)", &x4d, {
        let (g, w) = (smooth(&[3], &mut r), w4d.clone());
        move |t, x| {
            let gn = t.leaf(g.clone());
            let y = t.mul_feature(x, gn).unwrap();
            weighted_sum(t, y, &w)
        }
    });
    s.check("op mul_feature gamma (4d)", &smooth(&[3], &mut r), {
        let (x, w) = (x4d.clone(), w4d.clone());
        move |t, gt| {
            let xn = t.leaf(x.clone());
            let y = t.mul_feature(xn, gt).unwrap();
            weighted_sum(t, y, &w)
        }
    });

    // matmul: each side
    let a34 = smooth(&[3, 4], &mut r);
    let b42 = smooth(&[4, 2], &mut r);
    let w32 = smooth(&[3, 2], &mut r);
    s.check("op matmul lhs", &a34, {
        let (b, w) = (b42.clone(), w32.clone());
        move |t, x| {
            let bn = t.leaf(b.clone());
            let y = t.matmul(x, bn).unwrap();
            weighted_sum(t, y, &w)
        }
    });
    s.check("op matmul rhs", &b42, {
        let (a, w) = (a34.clone(), w32.clone());
        move |t, x| {
            let an = t.leaf(a.clone());
            let y = t.matmul(an, x).unwrap();
            weighted_sum(t, y, &w)
        }
    });

    // kinked elementwise ops, inputs bounded away from zero
    let xk = kink_free(&[3, 4], &mut r);
    let wk = smooth(&[3, 4], &mut r);
    for (name, f) in [
        ("op relu", 0),
        ("op leaky_relu(0.3)", 1),
        ("op abs", 2),
    ] {
        s.check(name, &xk, {
            let w = wk.clone();
            move |t, x| {
                let y = match f {
                    0 => t.relu(x),
                    1 => t.leaky_relu(x, 0.3),
                    _ => t.abs(x),
                };
                weighted_sum(t, y, &w)
            }
        });
    }

    s.check("op mul_mask", &smooth(&[3, 4], &mut r), {
        let mask = Tensor::new(
            vec![3, 4],
            (0..12).map(|i| if i % 3 == 0 { 0.0 } else { 2.0 }).collect(),
        )
        .unwrap();
        let w = wk.clone();
        move |t, x| {
            let y = t.mul_mask(x, mask.clone()).unwrap();
            weighted_sum(t, y, &w)
        }
    });

    for &g in &[0.0, 0.3, 1.0] {
        s.check(&format!("op interp g={g}"), &smooth(&[3, 4], &mut r), {
            let (b, w) = (smooth(&[3, 4], &mut r), wk.clone());
            move |t, x| {
                let bn = t.leaf(b.clone());
                let y = t.interp(x, bn, g).unwrap();
                weighted_sum(t, y, &w)
            }
        });
    }

    // conv2d: input and kernel grads, same and valid padding
    let xc = smooth(&[2, 2, 5, 5], &mut r);
    let kc = smooth(&[3, 2, 3, 3], &mut r);
    for (name, pad, stride, oh, ow) in [
        ("op conv2d x same s2", Padding::Same, 2, 3, 3),
        ("op conv2d x valid s1", Padding::Valid, 1, 3, 3),
    ] {
        let w = smooth(&[2, 3, oh, ow], &mut r);
        s.check(name, &xc, {
            let (k, w) = (kc.clone(), w.clone());
            move |t, x| {
                let kn = t.leaf(k.clone());
                let y = t.conv2d(x, kn, stride, pad).unwrap();
                weighted_sum(t, y, &w)
            }
        });
        s.check(&name.replace(" x ", " k "), &kc, {
            let (x, w) = (xc.clone(), w.clone());
            move |t, kt| {
                let xn = t.leaf(x.clone());
                let y = t.conv2d(xn, kt, stride, pad).unwrap();
                weighted_sum(t, y, &w)
            }
        });
    }

    // pools: strictly separated values so argmax is stable
    let xp = kink_free(&[1, 2, 4, 4], &mut r);
    let wp = smooth(&[1, 2, 2, 2], &mut r);
    for (name, kind) in [("op pool2d mean", PoolKind::Mean), ("op pool2d max", PoolKind::Max)] {
        s.check(name, &xp, {
            let w = wp.clone();
            move |t, x| {
                let y = t.pool2d(x, kind, 2, 2).unwrap();
                weighted_sum(t, y, &w)
            }
        });
    }

    let bn_x = smooth(&[6, 3], &mut r);
    let bn_gm = smooth(&[3], &mut r);
    let bn_bt = smooth(&[3], &mut r);
    let bn_w = smooth(&[6, 3], &mut r);
    s.check("op batchnorm x", &bn_x, {
        let (gm, bt, w) = (bn_gm.clone(), bn_bt.clone(), bn_w.clone());
        move |t, x| {
            let g = t.leaf(gm.clone());
            let b = t.leaf(bt.clone());
            let (y, _) = t.batchnorm(x, g, b, 1e-5).unwrap();
            weighted_sum(t, y, &w)
        }
    });
    s.check("op batchnorm gamma", &bn_gm, {
        let (x, bt, w) = (bn_x.clone(), bn_bt.clone(), bn_w.clone());
        move |t, gt| {
            let xn = t.leaf(x.clone());
            let b = t.leaf(bt.clone());
            let (y, _) = t.batchnorm(xn, gt, b, 1e-5).unwrap();
            weighted_sum(t, y, &w)
        }
    });

    s.check("op softmax_xent", &smooth(&[5, 4], &mut r), |t, x| {
        t.softmax_xent(x, &[0, 3, 1, 2, 0]).unwrap()
    });
}

struct LayerCase {
    name: String,
    layer: Layer,
    params: Vec<Tensor>,
    bn_features: usize,
    x0: Tensor,
}

fn layer_cases(rng: &mut impl Rng) -> Vec<LayerCase> {
    let mut cases = Vec::new();
    let flat = kink_free(&[4, 6], rng);
    let spatial = kink_free(&[2, 2, 4, 4], rng);

    cases.push(LayerCase {
        name: "identity".into(),
        layer: Layer::Identity,
        params: vec![],
        bn_features: 0,
        x0: flat.clone(),
    });
    cases.push(LayerCase {
        name: "dense".into(),
        layer: Layer::Dense { w: ParamId(0), b: ParamId(1) },
        params: vec![smooth(&[6, 3], rng), smooth(&[3], rng)],
        bn_features: 0,
        x0: smooth(&[4, 6], rng),
    });
    for (name, layer) in [
        ("relu", Layer::Relu),
        ("leaky_relu(0.4)", Layer::LeakyRelu { slope: 0.4 }),
        ("abs", Layer::Abs),
        ("grelu", Layer::GRelu),
        ("inverse_grelu", Layer::InverseGRelu),
    ] {
        cases.push(LayerCase {
            name: name.into(),
            layer,
            params: vec![],
            bn_features: 0,
            x0: flat.clone(),
        });
    }
    cases.push(LayerCase {
        name: "dropout(0.5)".into(),
        layer: Layer::Dropout { p: 0.5, stream: 9 },
        params: vec![],
        bn_features: 0,
        x0: smooth(&[4, 6], rng),
    });
    cases.push(LayerCase {
        name: "gradual_dropout(0.5)".into(),
        layer: Layer::gradual_dropout(0.5, 9),
        params: vec![],
        bn_features: 0,
        x0: smooth(&[4, 6], rng),
    });
    cases.push(LayerCase {
        name: "mean_pool".into(),
        layer: Layer::MeanPool { window: 2, stride: 2 },
        params: vec![],
        bn_features: 0,
        x0: spatial.clone(),
    });
    cases.push(LayerCase {
        name: "max_pool".into(),
        layer: Layer::MaxPool { window: 2, stride: 2 },
        params: vec![],
        bn_features: 0,
        x0: spatial.clone(),
    });
    cases.push(LayerCase {
        name: "gradual_pool".into(),
        layer: Layer::gradual_pool(2, 2),
        params: vec![],
        bn_features: 0,
        x0: spatial.clone(),
    });
    cases.push(LayerCase {
        name: "mixed_pool_const(0.25)".into(),
        layer: Layer::gradnet_fixed(
            Layer::MeanPool { window: 2, stride: 2 },
            Layer::MaxPool { window: 2, stride: 2 },
            0.25,
        ),
        params: vec![],
        bn_features: 0,
        x0: spatial.clone(),
    });
    cases.push(LayerCase {
        name: "batchnorm".into(),
        layer: Layer::BatchNorm { gamma: ParamId(0), beta: ParamId(1), state: 0 },
        params: vec![smooth(&[6], rng), smooth(&[6], rng)],
        bn_features: 6,
        x0: smooth(&[5, 6], rng),
    });
    cases.push(LayerCase {
        name: "gradual_batchnorm".into(),
        layer: Layer::gradual_batchnorm(ParamId(0), ParamId(1), 0),
        params: vec![smooth(&[6], rng), smooth(&[6], rng)],
        bn_features: 6,
        x0: smooth(&[5, 6], rng),
    });
    cases.push(LayerCase {
        name: "conv".into(),
        layer: Layer::Conv { k: ParamId(0), stride: 1, padding: Padding::Same },
        params: vec![smooth(&[3, 2, 3, 3], rng)],
        bn_features: 0,
        x0: smooth(&[2, 2, 4, 4], rng),
    });
    cases.push(LayerCase {
        name: "gradual_conv".into(),
        layer: Layer::gradual_conv(ParamId(0)),
        params: vec![smooth(&[2, 2, 3, 3], rng)],
        bn_features: 0,
        x0: smooth(&[2, 2, 4, 4], rng),
    });
    cases.push(LayerCase {
        name: "gradual_nin".into(),
        layer: Layer::GradualNin { k: ParamId(0), k1: ParamId(1) },
        params: vec![smooth(&[2, 2, 3, 3], rng), smooth(&[2, 2, 1, 1], rng)],
        bn_features: 0,
        x0: kink_free(&[2, 2, 4, 4], rng),
    });
    cases.push(LayerCase {
        name: "flatten".into(),
        layer: Layer::Flatten,
        params: vec![],
        bn_features: 0,
        x0: smooth(&[2, 2, 4, 4], rng),
    });
    cases
}

/// One layer forward at gate `g` under a fresh train-mode context. BN state
/// is rebuilt per call so finite-difference re-evaluations see identical
/// conditions.
fn layer_forward(
    tape: &mut Tape,
    layer: &Layer,
    g: f64,
    bn_features: usize,
    x: NodeId,
    params: &[NodeId],
) -> NodeId {
    let mut bn = if bn_features > 0 {
        vec![BnRunning::new(bn_features, 0.9, 1e-5)]
    } else {
        vec![]
    };
    let mut ctx = ForwardCtx {
        mode: Mode::Train,
        g,
        params,
        bn: &mut bn,
        seed: 17,
        epoch: 1,
        batch: 2,
    };
    layer.forward(tape, x, &mut ctx).expect("layer forward")
}

fn layer_checks(s: &mut Suite) {
    let mut r = stream(0xBEEF, 2, 0, 0);
    let cases = layer_cases(&mut r);
    for LayerCase { name, layer, params, bn_features, x0 } in cases {
        for &g in &[0.0, 0.5, 1.0] {
            let out_shape = {
                let mut tape = Tape::new();
                let nodes: Vec<NodeId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
                let x = tape.leaf(x0.clone());
                let y = layer_forward(&mut tape, &layer, g, bn_features, x, &nodes);
                tape.value(y).shape().to_vec()
            };
            let w = smooth(&out_shape, &mut r);

            s.check(&format!("layer {name} g={g} d/dx"), &x0, |t, x| {
                let nodes: Vec<NodeId> = params.iter().map(|p| t.leaf(p.clone())).collect();
                let y = layer_forward(t, &layer, g, bn_features, x, &nodes);
                weighted_sum(t, y, &w)
            });

            for pi in 0..params.len() {
                s.check(&format!("layer {name} g={g} d/dparam{pi}"), &params[pi], |t, perturbed| {
                    let nodes: Vec<NodeId> = params
                        .iter()
                        .enumerate()
                        .map(|(j, p)| if j == pi { perturbed } else { t.leaf(p.clone()) })
                        .collect();
                    let x = t.leaf(x0.clone());
                    let y = layer_forward(t, &layer, g, bn_features, x, &nodes);
                    weighted_sum(t, y, &w)
                });
            }
        }
    }
}

/// Run every check. Passes iff all max relative errors are below `tol`.
pub fn gradcheck_suite(tol: f64) -> CheckReport {
    let mut s = Suite { entries: Vec::new() };
    op_checks(&mut s);
    layer_checks(&mut s);
    CheckReport { tol, entries: s.entries }
}
