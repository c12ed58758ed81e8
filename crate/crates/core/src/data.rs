//! Dataset ingestion and batching: MNIST IDX, CIFAR-10 binary, synthetic
//! blobs, horizontal-flip augmentation, deterministic shuffled batches.

use crate::error::{Error, Result};
use crate::rng::{ns, stream};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fs;
use std::io::Write;
use std::path::Path;

const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;
const IDX_MAGIC_LABELS: u32 = 0x0000_0801;

/// An immutable labeled image set. Pixels live in [0,1].
#[derive(Clone, Debug)]
pub struct Dataset {
    /// N×C×H×W.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_len(&self) -> usize {
        self.images.len() / self.len().max(1)
    }

    /// New dataset from a subset of indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let sl = self.sample_len();
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * sl);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&src[i * sl..(i + 1) * sl]);
            labels.push(self.labels[i]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Dataset {
            images: Tensor::new(shape, data).unwrap(),
            labels,
            num_classes: self.num_classes,
        }
    }

    /// Gather one batch of images (as a tensor) and labels.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let sub = self.subset(indices);
        (sub.images, sub.labels)
    }

    /// Split off the last `frac` of samples (by current order) as a
    /// validation set. Used when a dataset has no designated val files.
    pub fn split_val(&self, frac: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&frac) {
            return Err(Error::Config(format!("val fraction {frac} outside [0,1)")));
        }
        let n = self.len();
        let n_val = ((n as f64) * frac).ceil() as usize;
        let cut = n - n_val;
        if cut == 0 || n_val == 0 {
            return Err(Error::Config(format!(
                "val fraction {frac} leaves an empty split of {n} samples"
            )));
        }
        let train: Vec<usize> = (0..cut).collect();
        let val: Vec<usize> = (cut..n).collect();
        Ok((self.subset(&train), self.subset(&val)))
    }

    /// Keep only the first `n` samples.
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

fn read_be_u32(buf: &[u8], at: usize) -> Result<u32> {
    let bytes: [u8; 4] = buf
        .get(at..at + 4)
        .ok_or_else(|| Error::Format("truncated IDX header".into()))?
        .try_into()
        .unwrap();
    Ok(u32::from_be_bytes(bytes))
}

/// Parse the big-endian IDX pair used by MNIST. Images get shape
/// N×1×H×W with pixel bytes scaled by 1/255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = fs::read(images_path)?;
    let lab = fs::read(labels_path)?;

    let magic = read_be_u32(&img, 0)?;
    if magic != IDX_MAGIC_IMAGES {
        return Err(Error::Format(format!(
            "bad image magic 0x{magic:08x} in {} (want 0x{IDX_MAGIC_IMAGES:08x})",
            images_path.display()
        )));
    }
    let n = read_be_u32(&img, 4)? as usize;
    let h = read_be_u32(&img, 8)? as usize;
    let w = read_be_u32(&img, 12)? as usize;
    let want = 16 + n * h * w;
    if img.len() != want {
        return Err(Error::Format(format!(
            "image file {} has {} bytes, header implies {want}",
            images_path.display(),
            img.len()
        )));
    }

    let lmagic = read_be_u32(&lab, 0)?;
    if lmagic != IDX_MAGIC_LABELS {
        return Err(Error::Format(format!(
            "bad label magic 0x{lmagic:08x} in {} (want 0x{IDX_MAGIC_LABELS:08x})",
            labels_path.display()
        )));
    }
    let ln = read_be_u32(&lab, 4)? as usize;
    if ln != n {
        return Err(Error::Format(format!("{n} images but {ln} labels")));
    }
    if lab.len() != 8 + ln {
        return Err(Error::Format(format!(
            "label file {} has {} bytes, header implies {}",
            labels_path.display(),
            lab.len(),
            8 + ln
        )));
    }

    let data: Vec<f64> = img[16..].iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels: Vec<usize> = lab[8..].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    Ok(Dataset {
        images: Tensor::new(vec![n, 1, h, w], data)?,
        labels,
        num_classes,
    })
}

/// Write a dataset as an IDX pair. Pixels are quantized to bytes with
/// round(v·255); values already on the 1/255 grid (everything `load_idx`
/// produces) round-trip bit-exactly.
pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (n, c, h, w) = ds.images.dims4()?;
    if c != 1 {
        return Err(Error::Contract(format!("IDX stores single-channel images, got C={c}")));
    }
    let mut img = Vec::with_capacity(16 + n * h * w);
    img.extend_from_slice(&IDX_MAGIC_IMAGES.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&(h as u32).to_be_bytes());
    img.extend_from_slice(&(w as u32).to_be_bytes());
    for &v in ds.images.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Contract(format!("pixel {v} outside [0,1]")));
        }
        img.push((v * 255.0).round() as u8);
    }
    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&IDX_MAGIC_LABELS.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    for &l in &ds.labels {
        if l > u8::MAX as usize {
            return Err(Error::Contract(format!("label {l} does not fit in a byte")));
        }
        lab.push(l as u8);
    }
    fs::File::create(images_path)?.write_all(&img)?;
    fs::File::create(labels_path)?.write_all(&lab)?;
    Ok(())
}

const CIFAR_RECORD: usize = 3073;

/// Load one or more CIFAR-10 binary batch files (3073-byte records:
/// 1 label byte + 3072 pixel bytes in R,G,B planes of 32×32).
pub fn load_cifar10_bin<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let buf = fs::read(p.as_ref())?;
        if buf.is_empty() || buf.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format(format!(
                "{} has {} bytes, not a multiple of {CIFAR_RECORD}",
                p.as_ref().display(),
                buf.len()
            )));
        }
        for rec in buf.chunks_exact(CIFAR_RECORD) {
            let label = rec[0] as usize;
            if label >= 10 {
                return Err(Error::Format(format!("label byte {label} out of range 0..10")));
            }
            labels.push(label);
            data.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
        }
    }
    let n = labels.len();
    Ok(Dataset {
        images: Tensor::new(vec![n, 3, 32, 32], data)?,
        labels,
        num_classes: 10,
    })
}

/// k well-separated Gaussian clusters in d dimensions (unit variance,
/// means 8 units apart along the first axis, so pairwise distance >= 8 sigma).
/// Deterministic in seed. Shape is N×1×1×d so the rest of the pipeline treats
/// it like image data.
pub fn synth_blobs(n: usize, d: usize, k: usize, seed: u64) -> Result<Dataset> {
    if k < 2 || n < k || d == 0 {
        return Err(Error::Config(format!(
            "synth_blobs needs n >= k >= 2 and d >= 1, got n={n} d={d} k={k}"
        )));
    }
    let mut rng = stream(seed, ns::INIT, 0, 0);
    let normal = StandardNormal;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let cluster = i % k;
        labels.push(cluster);
        for j in 0..d {
            let mean = if j == 0 { 8.0 * cluster as f64 } else { 0.0 };
            let v: f64 = normal.sample(&mut rng);
            data.push(mean + v);
        }
    }
    Ok(Dataset {
        images: Tensor::new(vec![n, 1, 1, d], data)?,
        labels,
        num_classes: k,
    })
}

/// Mirror each image in the batch across the vertical axis with probability
/// `p`, independently per image. Labels are untouched by construction.
pub fn augment_hflip(images: &mut Tensor, p: f64, rng: &mut impl Rng) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("flip probability {p} outside [0,1]")));
    }
    let (n, c, h, w) = images.dims4()?;
    let data = images.data_mut();
    for i in 0..n {
        if p == 0.0 || !rng.random_bool(p) {
            continue;
        }
        for ci in 0..c {
            for y in 0..h {
                let row = ((i * c + ci) * h + y) * w;
                data[row..row + w].reverse();
            }
        }
    }
    Ok(())
}

/// Batch iteration plan: deterministic shuffle keyed by (seed, epoch).
#[derive(Clone, Copy, Debug)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
    pub drop_last: bool,
}

/// Index batches for one epoch: a seeded Fisher-Yates permutation of 0..n
/// partitioned into consecutive chunks. The last partial batch is kept
/// unless `drop_last`.
pub fn batches(n: usize, plan: &BatchPlan, epoch: u32) -> Vec<Vec<usize>> {
    assert!(plan.batch_size >= 1, "batch_size must be >= 1");
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = stream(plan.seed, ns::SHUFFLE, u64::from(epoch), 0);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let mut out: Vec<Vec<usize>> = idx.chunks(plan.batch_size).map(<[usize]>::to_vec).collect();
    if plan.drop_last && out.last().is_some_and(|b| b.len() < plan.batch_size) {
        out.pop();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn byte_grid_dataset(n: usize, h: usize, w: usize, seed: u64) -> Dataset {
        let mut rng = stream(seed, 1, 2, 3);
        let data: Vec<f64> =
            (0..n * h * w).map(|_| f64::from(rng.random_range(0u32..256)) / 255.0).collect();
        let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
        Dataset {
            images: Tensor::new(vec![n, 1, h, w], data).unwrap(),
            labels,
            num_classes: 10,
        }
    }

    #[test]
    fn idx_round_trip_bit_exact() {
        let dir = tempdir().unwrap();
        let ds = byte_grid_dataset(17, 5, 4, 42);
        let ip = dir.path().join("imgs");
        let lp = dir.path().join("labs");
        write_idx(&ds, &ip, &lp).unwrap();
        let back = load_idx(&ip, &lp).unwrap();
        assert_eq!(back.images, ds.images);
        assert_eq!(back.labels, ds.labels);
    }

    #[test]
    fn idx_rejects_wrong_magic_and_truncation() {
        let dir = tempdir().unwrap();
        let ds = byte_grid_dataset(3, 2, 2, 1);
        let ip = dir.path().join("imgs");
        let lp = dir.path().join("labs");
        write_idx(&ds, &ip, &lp).unwrap();

        let mut img = fs::read(&ip).unwrap();
        img[3] = 0x99;
        let bad = dir.path().join("bad");
        fs::write(&bad, &img).unwrap();
        let err = load_idx(&bad, &lp).unwrap_err().to_string();
        assert!(err.contains("0x00000899"), "{err}");

        let img = fs::read(&ip).unwrap();
        fs::write(&bad, &img[..img.len() - 1]).unwrap();
        assert!(load_idx(&bad, &lp).is_err());
    }

    #[test]
    fn idx_pixel_scaling() {
        let dir = tempdir().unwrap();
        let ds = Dataset {
            images: Tensor::new(vec![1, 1, 1, 2], vec![0.0, 1.0]).unwrap(),
            labels: vec![7],
            num_classes: 10,
        };
        let ip = dir.path().join("i");
        let lp = dir.path().join("l");
        write_idx(&ds, &ip, &lp).unwrap();
        let raw = fs::read(&ip).unwrap();
        assert_eq!(&raw[16..], &[0u8, 255u8]);
        let back = load_idx(&ip, &lp).unwrap();
        assert_eq!(back.images.data(), &[0.0, 1.0]);
    }

    #[test]
    fn cifar_load_and_validation() {
        let dir = tempdir().unwrap();
        let mut rec = vec![3u8];
        rec.extend((0..3072).map(|i| (i % 256) as u8));
        let p = dir.path().join("batch.bin");
        fs::write(&p, &rec).unwrap();
        let ds = load_cifar10_bin(&[&p]).unwrap();
        assert_eq!(ds.images.shape(), &[1, 3, 32, 32]);
        assert_eq!(ds.labels, vec![3]);
        assert!(ds.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));

        // Truncated file rejected.
        fs::write(&p, &rec[..rec.len() - 1]).unwrap();
        assert!(load_cifar10_bin(&[&p]).is_err());

        // Label byte >= 10 rejected.
        rec[0] = 10;
        fs::write(&p, &rec).unwrap();
        assert!(load_cifar10_bin(&[&p]).is_err());
    }

    #[test]
    fn synth_blobs_deterministic_and_separated() {
        let a = synth_blobs(100, 3, 4, 7).unwrap();
        let b = synth_blobs(100, 3, 4, 7).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
        assert_eq!(synth_blobs(4, 2, 4, 0).unwrap().len(), 4);
        assert!(synth_blobs(3, 2, 4, 0).is_err());
    }

    #[test]
    fn hflip_involution_and_extremes() {
        let mut rng = stream(1, ns::AUGMENT, 0, 0);
        let orig = byte_grid_dataset(4, 3, 3, 9).images;

        let mut unflipped = orig.clone();
        augment_hflip(&mut unflipped, 0.0, &mut rng).unwrap();
        assert_eq!(unflipped, orig);

        let mut once = orig.clone();
        augment_hflip(&mut once, 1.0, &mut rng).unwrap();
        assert_ne!(once, orig);
        let mut twice = once.clone();
        augment_hflip(&mut twice, 1.0, &mut rng).unwrap();
        assert_eq!(twice, orig);

        // A horizontally symmetric image is a fixed point.
        let mut sym = Tensor::new(vec![1, 1, 1, 3], vec![0.25, 0.5, 0.25]).unwrap();
        augment_hflip(&mut sym, 1.0, &mut rng).unwrap();
        assert_eq!(sym.data(), &[0.25, 0.5, 0.25]);
    }

    #[test]
    fn batches_cover_everything_once() {
        let plan = BatchPlan { batch_size: 7, seed: 5, drop_last: false };
        let bs = batches(23, &plan, 3);
        let mut seen: Vec<usize> = bs.concat();
        assert_eq!(bs.last().unwrap().len(), 2);
        seen.sort_unstable();
        assert_eq!(seen, (0..23).collect::<Vec<_>>());

        let dropped = batches(23, &BatchPlan { drop_last: true, ..plan }, 3);
        assert_eq!(dropped.len(), 3);
        assert!(dropped.iter().all(|b| b.len() == 7));
    }

    #[test]
    fn batches_deterministic_per_epoch() {
        let plan = BatchPlan { batch_size: 4, seed: 11, drop_last: false };
        assert_eq!(batches(10, &plan, 2), batches(10, &plan, 2));
        assert_ne!(batches(10, &plan, 2), batches(10, &plan, 3));
        // One oversized batch is just a permutation.
        let one = batches(10, &BatchPlan { batch_size: 64, ..plan }, 0);
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn split_val_takes_tail() {
        let ds = byte_grid_dataset(10, 2, 2, 3);
        let (tr, va) = ds.split_val(0.1).unwrap();
        assert_eq!(tr.len(), 9);
        assert_eq!(va.len(), 1);
        assert_eq!(va.labels[0], ds.labels[9]);
        assert!(ds.split_val(1.0).is_err());
    }
}
