//! Training protocol: Adam, orthogonal initialization, early stopping.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Adam hyperparameters. Defaults are the standard ones.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction:
/// m̂ = m/(1-β₁ᵗ), v̂ = v/(1-β₂ᵗ), θ ← θ − lr·m̂/(√v̂ + ε).
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, param_shapes: &[&[usize]]) -> Self {
        Adam {
            cfg,
            step: 0,
            m: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all parameters. `names` is used only for diagnostics
    /// when a gradient has gone NaN.
    pub fn step(
        &mut self,
        params: &mut [Tensor],
        grads: &[Tensor],
        names: &[String],
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "adam got {} params, {} grads, state for {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.data().iter().any(|v| v.is_nan()) {
                let name = names.get(i).map(String::as_str).unwrap_or("?");
                return Err(Error::Contract(format!(
                    "NaN gradient in parameter '{name}' at adam step {}",
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for i in 0..params.len() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let g = grads[i].data();
            let p = params[i].data_mut();
            for j in 0..p.len() {
                m[j] = self.cfg.beta1 * m[j] + (1.0 - self.cfg.beta1) * g[j];
                v[j] = self.cfg.beta2 * v[j] + (1.0 - self.cfg.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}

/// Orthogonal initialization: QR of a Gaussian matrix with the signs fixed so
/// R's diagonal is positive (otherwise the distribution is biased), scaled by
/// `gain`. Tall or square outputs satisfy WᵀW = gain²·I; wide ones WWᵀ = gain²·I.
pub fn orthogonal_init(rows: usize, cols: usize, gain: f64, rng: &mut impl Rng) -> Tensor {
    assert!(rows >= 1 && cols >= 1);
    // Orthonormalize columns of the tall orientation, transpose back if needed.
    let (r, c, transpose) = if rows >= cols { (rows, cols, false) } else { (cols, rows, true) };
    let normal = StandardNormal;
    let data: Vec<f64> = (0..r * c).map(|_| normal.sample(rng)).collect();
    let a = DMatrix::from_row_slice(r, c, &data);
    let qr = a.qr();
    let mut q = qr.q();
    let rr = qr.r();
    for j in 0..c {
        if rr[(j, j)] < 0.0 {
            for i in 0..r {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let v = if transpose { q[(j, i)] } else { q[(i, j)] };
            out[i * cols + j] = gain * v;
        }
    }
    Tensor::new(vec![rows, cols], out).unwrap()
}

/// Convolution kernels are orthogonalized as their F×(C·kh·kw) flattening.
pub fn orthogonal_init_conv(
    f: usize,
    c: usize,
    kh: usize,
    kw: usize,
    gain: f64,
    rng: &mut impl Rng,
) -> Tensor {
    orthogonal_init(f, c * kh * kw, gain, rng)
        .reshape(&[f, c, kh, kw])
        .unwrap()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    /// Metric improved by at least min_delta; snapshot this model.
    NewBest,
    Continue,
    /// Patience exhausted.
    Stop,
}

/// Early stopping on a to-maximize validation metric. `patience: None` means
/// never stop (fixed-epoch training). The reported model is the best
/// snapshot, not the last — snapshotting is the caller's job on `NewBest`.
#[derive(Clone, Debug)]
pub struct EarlyStop {
    patience: Option<u32>,
    min_delta: f64,
    best: f64,
    best_epoch: Option<u32>,
    since_improvement: u32,
}

impl EarlyStop {
    pub fn new(patience: Option<u32>, min_delta: f64) -> Self {
        EarlyStop {
            patience,
            min_delta,
            best: f64::NEG_INFINITY,
            best_epoch: None,
            since_improvement: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> Option<u32> {
        self.best_epoch
    }

    /// Fold in one epoch's validation metric. A NaN metric counts as
    /// non-improvement (the divergence bookkeeping happens elsewhere).
    pub fn update(&mut self, epoch: u32, metric: f64) -> StopDecision {
        if !metric.is_nan() && metric >= self.best + self.min_delta {
            self.best = metric;
            self.best_epoch = Some(epoch);
            self.since_improvement = 0;
            return StopDecision::NewBest;
        }
        self.since_improvement += 1;
        match self.patience {
            Some(p) if self.since_improvement >= p => StopDecision::Stop,
            _ => StopDecision::Continue,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn adam_first_step_closed_form() {
        let mut adam = Adam::new(AdamConfig::default(), &[&[1]]);
        let mut p = [Tensor::scalar(0.0)];
        adam.step(&mut p, &[Tensor::scalar(1.0)], &["w".into()]).unwrap();
        // First step: m̂ = g, v̂ = g², so Δθ = -lr/(1+eps) regardless of |g|.
        let expect = -1e-3 / (1.0 + 1e-8);
        assert!((p[0].item() - expect).abs() < 1e-12);

        let mut adam2 = Adam::new(AdamConfig::default(), &[&[1]]);
        let mut p2 = [Tensor::scalar(0.0)];
        adam2.step(&mut p2, &[Tensor::scalar(-1.0)], &["w".into()]).unwrap();
        assert!((p2[0].item() + expect).abs() < 1e-12);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut adam = Adam::new(AdamConfig::default(), &[&[3]]);
        let mut p = [Tensor::new(vec![3], vec![0.5, -0.5, 2.0]).unwrap()];
        let before = p[0].clone();
        adam.step(&mut p, &[Tensor::zeros(&[3])], &["w".into()]).unwrap();
        assert_eq!(p[0], before);
    }

    #[test]
    fn adam_first_step_scale_equivariant() {
        // Exact first-step form: dtheta = -lr * g / (|g| + eps), so scaling
        // gradients by c changes the update by < 1e-6 relative as long as
        // eps stays negligible against |g|.
        let mut updates = Vec::new();
        for c in [0.1, 1.0, 100.0] {
            let mut adam = Adam::new(AdamConfig::default(), &[&[2]]);
            let mut p = [Tensor::zeros(&[2])];
            let raw = [0.3 * c, -1.7 * c];
            let g = Tensor::new(vec![2], raw.to_vec()).unwrap();
            adam.step(&mut p, &[g], &["w".into()]).unwrap();
            for j in 0..2 {
                let expect = -1e-3 * raw[j] / (raw[j].abs() + 1e-8);
                assert!((p[0].data()[j] - expect).abs() < 1e-15, "c={c} j={j}");
            }
            updates.push([p[0].data()[0], p[0].data()[1]]);
        }
        for u in &updates[1..] {
            for j in 0..2 {
                let rel = (u[j] - updates[0][j]).abs() / updates[0][j].abs();
                assert!(rel < 1e-6, "rel={rel}");
            }
        }
    }

    #[test]
    fn adam_nan_grad_names_parameter() {
        let mut adam = Adam::new(AdamConfig::default(), &[&[1]]);
        let mut p = [Tensor::scalar(0.0)];
        let err = adam
            .step(&mut p, &[Tensor::scalar(f64::NAN)], &["layer3.w".into()])
            .unwrap_err()
            .to_string();
        assert!(err.contains("layer3.w"), "{err}");
    }

    #[test]
    fn orthogonal_square_and_gain() {
        let mut rng = stream(1, 2, 3, 4);
        for &(r, c) in &[(64usize, 64usize), (128, 64)] {
            let w = orthogonal_init(r, c, 1.0, &mut rng);
            let err = gram_err(&w, 1.0);
            assert!(err < 1e-10, "({r},{c}): {err}");
        }
        let w = orthogonal_init(32, 32, 2.0, &mut rng);
        assert!(gram_err(&w, 4.0) < 1e-10);
    }

    #[test]
    fn orthogonal_wide_has_orthonormal_rows() {
        let mut rng = stream(9, 9, 9, 9);
        let w = orthogonal_init(64, 128, 1.0, &mut rng);
        // WWᵀ = I for the wide case.
        let (r, c) = w.dims2().unwrap();
        let d = w.data();
        let mut max_err: f64 = 0.0;
        for i in 0..r {
            for j in 0..r {
                let mut dot = 0.0;
                for k in 0..c {
                    dot += d[i * c + k] * d[j * c + k];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                max_err = max_err.max((dot - expect).abs());
            }
        }
        assert!(max_err < 1e-10, "{max_err}");
    }

    #[test]
    fn orthogonal_1x1_is_pm_gain() {
        let mut rng = stream(0, 0, 0, 0);
        for _ in 0..20 {
            let w = orthogonal_init(1, 1, 0.8, &mut rng);
            assert!((w.item().abs() - 0.8).abs() < 1e-12);
        }
    }

    fn gram_err(w: &Tensor, expect_diag: f64) -> f64 {
        let (r, c) = w.dims2().unwrap();
        let d = w.data();
        let mut max_err: f64 = 0.0;
        for i in 0..c {
            for j in 0..c {
                let mut dot = 0.0;
                for k in 0..r {
                    dot += d[k * c + i] * d[k * c + j];
                }
                let expect = if i == j { expect_diag } else { 0.0 };
                max_err = max_err.max((dot - expect).abs());
            }
        }
        max_err
    }

    #[test]
    fn early_stop_patience_and_ties() {
        let mut es = EarlyStop::new(Some(3), 1e-4);
        assert_eq!(es.update(0, 0.9), StopDecision::NewBest);
        assert_eq!(es.update(1, 0.89), StopDecision::Continue);
        assert_eq!(es.update(2, 0.89), StopDecision::Continue);
        assert_eq!(es.update(3, 0.89), StopDecision::Stop);
        assert_eq!(es.best_epoch(), Some(0));

        // Equal-to-best is a non-improvement.
        let mut es = EarlyStop::new(Some(2), 1e-4);
        es.update(0, 0.5);
        assert_eq!(es.update(1, 0.5), StopDecision::Continue);
        assert_eq!(es.update(2, 0.5), StopDecision::Stop);
    }

    #[test]
    fn early_stop_improving_never_stops() {
        let mut es = EarlyStop::new(Some(1), 1e-4);
        for e in 0..50 {
            assert_eq!(es.update(e, 0.5 + 0.01 * f64::from(e)), StopDecision::NewBest);
        }
    }

    #[test]
    fn early_stop_nan_is_nonimprovement() {
        let mut es = EarlyStop::new(Some(2), 1e-4);
        es.update(0, 0.7);
        assert_eq!(es.update(1, f64::NAN), StopDecision::Continue);
        assert_eq!(es.update(2, f64::NAN), StopDecision::Stop);
        assert_eq!(es.best(), 0.7);
    }

    #[test]
    fn early_stop_none_patience_never_stops() {
        let mut es = EarlyStop::new(None, 1e-4);
        for e in 0..200 {
            assert_ne!(es.update(e, 0.1), StopDecision::Stop);
        }
    }
}
