//! Shared helpers for the benchmark targets.

use gradnet_core::rng::{ns, stream};
use gradnet_core::Tensor;
use rand::Rng;

/// Deterministic uniform tensor in [-1, 1).
pub fn rand_tensor(shape: &[usize], salt: u64) -> Tensor {
    let mut rng = stream(0xBEEF, ns::INIT, salt, 0);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}
