//! Dataset sanity-checker: load an IDX pair, a CIFAR-10 binary batch, or a
//! dataset directory, and print shape, class balance, and pixel statistics.

use gradnet_core::data::{load_cifar10_bin, load_idx};
use gradnet_core::{Dataset, Error, Result};
use std::path::{Path, PathBuf};

/// Guess the labels file that pairs with an IDX images file
/// (`train-images-idx3-ubyte` -> `train-labels-idx1-ubyte`).
fn sibling_labels(images: &Path) -> Option<PathBuf> {
    let name = images.file_name()?.to_str()?;
    let guess = name.replace("images", "labels").replace("idx3", "idx1");
    if guess == name {
        return None;
    }
    let path = images.with_file_name(guess);
    path.is_file().then_some(path)
}

fn load_dir(dir: &Path) -> Result<Dataset> {
    let mnist_images = dir.join("train-images-idx3-ubyte");
    if mnist_images.is_file() {
        return load_idx(&mnist_images, &dir.join("train-labels-idx1-ubyte"));
    }
    let batches: Vec<PathBuf> = (1..=5)
        .map(|i| dir.join(format!("data_batch_{i}.bin")))
        .filter(|p| p.is_file())
        .collect();
    if !batches.is_empty() {
        return load_cifar10_bin(&batches);
    }
    Err(Error::Config(format!(
        "{}: no train-images-idx3-ubyte or data_batch_*.bin found",
        dir.display()
    )))
}

pub fn run(data: &Path) -> Result<()> {
    let ds = if data.is_dir() {
        load_dir(data)?
    } else if data.extension().is_some_and(|e| e == "bin") {
        load_cifar10_bin(&[data])?
    } else {
        let labels = sibling_labels(data).ok_or_else(|| {
            Error::Config(format!(
                "{}: cannot infer labels file (expected an images/idx3 sibling)",
                data.display()
            ))
        })?;
        load_idx(data, &labels)?
    };

    let shape = ds.images.shape();
    println!("source:   {}", data.display());
    println!("examples: {}", ds.len());
    println!(
        "shape:    {} (CxHxW per example)",
        shape[1..].iter().map(ToString::to_string).collect::<Vec<_>>().join("x")
    );
    println!("classes:  {}", ds.num_classes);

    let mut hist = vec![0usize; ds.num_classes];
    for &l in &ds.labels {
        hist[l] += 1;
    }
    for (c, n) in hist.iter().enumerate() {
        println!("  label {c}: {n}");
    }

    let px = ds.images.data();
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0;
    for &v in px {
        min = min.min(v);
        max = max.max(v);
        sum += v;
    }
    println!(
        "pixels:   min={min:.4} max={max:.4} mean={:.4}",
        sum / px.len() as f64
    );
    Ok(())
}
