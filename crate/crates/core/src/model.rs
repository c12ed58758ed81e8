//! Model construction from a validated config: shape propagation, parameter
//! initialization, forward pass over a tape, and snapshot serialization.

use crate::config::{ExperimentConfig, LayerSpec, PadSpec};
use crate::error::{Error, Result};
use crate::layers::{BnRunning, ForwardCtx, Layer, Mode, ParamId};
use crate::optim::{orthogonal_init, orthogonal_init_conv};
use crate::rng::{ns, stream};
use crate::tape::{NodeId, Padding, Tape};
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

/// Parameter tensors plus stable names ("layer3.w") used in snapshots and
/// optimizer error messages.
#[derive(Clone, Debug)]
pub struct ParamStore {
    pub tensors: Vec<Tensor>,
    pub names: Vec<String>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.tensors.iter().map(|t| t.shape().to_vec()).collect()
    }
}

#[derive(Debug)]
pub struct Model {
    pub layers: Vec<Layer>,
    pub params: ParamStore,
    pub bn: Vec<BnRunning>,
    /// Per-sample input shape [C, H, W].
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
}

impl Model {
    pub fn param_count(&self) -> usize {
        self.params.tensors.iter().map(|t| t.len()).sum()
    }

    /// Run one batch through the model on a fresh tape. Returns the tape,
    /// the output node, and the leaf nodes of every parameter (in store
    /// order) so the caller can read gradients after `backward`.
    pub fn forward(
        &mut self,
        x: &Tensor,
        mode: Mode,
        g: f64,
        seed: u64,
        epoch: u32,
        batch: u64,
    ) -> Result<(Tape, NodeId, Vec<NodeId>)> {
        let mut tape = Tape::new();
        let param_nodes: Vec<NodeId> = self
            .params
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone()))
            .collect();
        let mut h = tape.leaf(x.clone());
        {
            let mut ctx = ForwardCtx {
                mode,
                g,
                params: &param_nodes,
                bn: &mut self.bn,
                seed,
                epoch: u64::from(epoch),
                batch,
            };
            for layer in &self.layers {
                h = layer.forward(&mut tape, h, &mut ctx)?;
            }

        }
        Ok((tape, h, param_nodes))
    }
}

struct Builder {
    layers: Vec<Layer>,
    params: ParamStore,
    bn: Vec<BnRunning>,
    seed: u64,
    gain: f64,
}

impl Builder {
    fn add_param(&mut self, name: String, t: Tensor) -> ParamId {
        let id = ParamId(self.params.tensors.len());
        self.params.tensors.push(t);
        self.params.names.push(name);
        id
    }

    fn init_rng(&self) -> rand_chacha::ChaCha8Rng {
        stream(self.seed, ns::INIT, self.params.tensors.len() as u64, 0)
    }

    fn dense(&mut self, idx: usize, fan_in: usize, units: usize) -> Layer {
        let mut rng = self.init_rng();
        let w = orthogonal_init(fan_in, units, self.gain, &mut rng);
        let w = self.add_param(format!("layer{idx}.w"), w);
        let b = self.add_param(format!("layer{idx}.b"), Tensor::zeros(&[units]));
        Layer::Dense { w, b }
    }

    fn conv_kernel(&mut self, idx: usize, name: &str, f: usize, c: usize, k: usize) -> ParamId {
        let mut rng = self.init_rng();
        let t = orthogonal_init_conv(f, c, k, k, self.gain, &mut rng);
        self.add_param(format!("layer{idx}.{name}"), t)
    }

    fn batchnorm(&mut self, idx: usize, features: usize) -> (ParamId, ParamId, usize) {
        let gamma = self.add_param(format!("layer{idx}.gamma"), Tensor::full(&[features], 1.0));
        let beta = self.add_param(format!("layer{idx}.beta"), Tensor::zeros(&[features]));
        let state = self.bn.len();
        self.bn.push(BnRunning::new(features, 0.9, 1e-5));
        (gamma, beta, state)
    }
}

fn pool_out(i: usize, window: usize, stride: usize, h: usize, w: usize, tag: &str) -> Result<(usize, usize)> {
    if h < window || w < window {
        return Err(Error::Config(format!(
            "layer {i} ({tag}): window {window} exceeds input {h}x{w}"
        )));
    }
    Ok(((h - window) / stride + 1, (w - window) / stride + 1))
}

fn need_spatial(i: usize, tag: &str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() != 3 {
        return Err(Error::Config(format!(
            "layer {i} ({tag}): needs a CxHxW input, got shape {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2]))
}

fn need_flat(i: usize, tag: &str, shape: &[usize]) -> Result<usize> {
    if shape.len() != 1 {
        return Err(Error::Config(format!(
            "layer {i} ({tag}): needs a flattened input, got shape {shape:?} (add a flatten layer)"
        )));
    }
    Ok(shape[0])
}

/// Instantiate the model described by `config` for the given per-sample
/// input shape, propagating shapes through every layer and initializing
/// parameters from the config seed. Errors name the offending layer index.
pub fn build_model(
    config: &ExperimentConfig,
    input_shape: &[usize],
    num_classes: usize,
) -> Result<Model> {
    let specs = config.model.layer_specs();
    if specs.is_empty() {
        return Err(Error::Config("model has no layers".into()));
    }
    if input_shape.len() != 3 {
        return Err(Error::Config(format!(
            "input shape must be [C, H, W], got {input_shape:?}"
        )));
    }
    let mut b = Builder {
        layers: Vec::new(),
        params: ParamStore { tensors: Vec::new(), names: Vec::new() },
        bn: Vec::new(),
        seed: config.seed,
        gain: config.init_gain,
    };
    let mut shape: Vec<usize> = input_shape.to_vec();

    for (i, spec) in specs.iter().enumerate() {
        let layer = match spec {
            LayerSpec::Flatten => {
                shape = vec![shape.iter().product()];
                Layer::Flatten
            }
            LayerSpec::Dense { units } => {
                let fan_in = need_flat(i, "dense", &shape)?;
                shape = vec![*units];
                b.dense(i, fan_in, *units)
            }
            LayerSpec::DenseHead => {
                let fan_in = need_flat(i, "dense_head", &shape)?;
                shape = vec![num_classes];
                b.dense(i, fan_in, num_classes)
            }
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::LeakyRelu { slope } => Layer::LeakyRelu { slope: *slope },
            LayerSpec::Grelu => Layer::GRelu,
            LayerSpec::InverseGrelu => Layer::InverseGRelu,
            LayerSpec::Dropout { p } => Layer::Dropout { p: *p, stream: i as u64 },
            LayerSpec::GradualDropout { p } => Layer::gradual_dropout(*p, i as u64),
            LayerSpec::MeanPool { window, stride } => {
                let (c, h, w) = need_spatial(i, "mean_pool", &shape)?;
                let s = stride.unwrap_or(*window);
                let (oh, ow) = pool_out(i, *window, s, h, w, "mean_pool")?;
                shape = vec![c, oh, ow];
                Layer::MeanPool { window: *window, stride: s }
            }
            LayerSpec::MaxPool { window, stride } => {
                let (c, h, w) = need_spatial(i, "max_pool", &shape)?;
                let s = stride.unwrap_or(*window);
                let (oh, ow) = pool_out(i, *window, s, h, w, "max_pool")?;
                shape = vec![c, oh, ow];
                Layer::MaxPool { window: *window, stride: s }
            }
            LayerSpec::GradualPool { window, stride } => {
                let (c, h, w) = need_spatial(i, "gradual_pool", &shape)?;
                let s = stride.unwrap_or(*window);
                let (oh, ow) = pool_out(i, *window, s, h, w, "gradual_pool")?;
                shape = vec![c, oh, ow];
                Layer::gradual_pool(*window, s)
            }
            LayerSpec::MixedPoolConst { window, stride, fixed_g } => {
                let (c, h, w) = need_spatial(i, "mixed_pool_const", &shape)?;
                let s = stride.unwrap_or(*window);
                let (oh, ow) = pool_out(i, *window, s, h, w, "mixed_pool_const")?;
                shape = vec![c, oh, ow];
                Layer::gradnet_fixed(
                    Layer::MeanPool { window: *window, stride: s },
                    Layer::MaxPool { window: *window, stride: s },
                    *fixed_g,
                )
            }
            LayerSpec::Batchnorm => {
                let (gamma, beta, state) = b.batchnorm(i, shape[0]);
                Layer::BatchNorm { gamma, beta, state }
            }
            LayerSpec::GradualBatchnorm => {
                let (gamma, beta, state) = b.batchnorm(i, shape[0]);
                Layer::gradual_batchnorm(gamma, beta, state)
            }
            LayerSpec::Conv { filters, kernel, stride, padding } => {
                let (c, h, w) = need_spatial(i, "conv", &shape)?;
                let (oh, ow) = match padding {
                    PadSpec::Same => (h.div_ceil(*stride), w.div_ceil(*stride)),
                    PadSpec::Valid => {
                        if h < *kernel || w < *kernel {
                            return Err(Error::Config(format!(
                                "layer {i} (conv): kernel {kernel} exceeds input {h}x{w}"
                            )));
                        }
                        ((h - kernel) / stride + 1, (w - kernel) / stride + 1)
                    }
                };
                let k = b.conv_kernel(i, "k", *filters, c, *kernel);
                shape = vec![*filters, oh, ow];
                Layer::Conv {
                    k,
                    stride: *stride,
                    padding: match padding {
                        PadSpec::Same => Padding::Same,
                        PadSpec::Valid => Padding::Valid,
                    },
                }
            }
            LayerSpec::GradualConv { kernel } => {
                let (c, _, _) = need_spatial(i, "gradual_conv", &shape)?;
                let k = b.conv_kernel(i, "k", c, c, *kernel);
                Layer::gradual_conv(k)
            }
            LayerSpec::GradualNin { kernel } => {
                let (c, _, _) = need_spatial(i, "gradual_nin", &shape)?;
                let k = b.conv_kernel(i, "k", c, c, *kernel);
                let k1 = b.conv_kernel(i, "k1", c, c, 1);
                Layer::GradualNin { k, k1 }
            }
        };
        b.layers.push(layer);
    }

    if shape != vec![num_classes] {
        return Err(Error::Config(format!(
            "model output shape {shape:?} does not match {num_classes} classes \
             (end with a dense/dense_head layer)"
        )));
    }

    Ok(Model {
        layers: b.layers,
        params: b.params,
        bn: b.bn,
        input_shape: input_shape.to_vec(),
        num_classes,
    })
}

/// Everything a snapshot stores besides the tensors themselves.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SnapshotMeta {
    pub epoch: u32,
    pub g: f64,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct SnapshotHeader {
    meta: SnapshotMeta,
    tensors: Vec<TensorInfo>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

fn snapshot_tensors(model: &Model) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = model
        .params
        .names
        .iter()
        .cloned()
        .zip(model.params.tensors.iter().cloned())
        .collect();
    for (i, bn) in model.bn.iter().enumerate() {
        let mean = Tensor::new(vec![bn.mean.len()], bn.mean.clone()).expect("bn stats nonempty");
        let var = Tensor::new(vec![bn.var.len()], bn.var.clone()).expect("bn stats nonempty");
        out.push((format!("bn{i}.running_mean"), mean));
        out.push((format!("bn{i}.running_var"), var));
    }
    out
}

/// Write the model as a JSON header line followed by each tensor's data as
/// little-endian f64, in header order. BN running statistics ride along so a
/// reloaded model evaluates identically.
pub fn save_snapshot(path: &Path, model: &Model, meta: &SnapshotMeta) -> Result<()> {
    let tensors = snapshot_tensors(model);
    let header = SnapshotHeader {
        meta: meta.clone(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorInfo { name: name.clone(), shape: t.shape().to_vec() })
            .collect(),
    };
    let mut buf = serde_json::to_vec(&header)?;
    buf.push(b'\n');
    for (_, t) in &tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Read a snapshot produced by `save_snapshot`.
pub fn read_snapshot(path: &Path) -> Result<(SnapshotMeta, Vec<(String, Tensor)>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("snapshot: missing header line".into()))?;
    let header: SnapshotHeader = serde_json::from_slice(&bytes[..nl])?;
    let mut off = nl + 1;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for info in header.tensors {
        let len: usize = info.shape.iter().product();
        let need = len * 8;
        if bytes.len() < off + need {
            return Err(Error::Format(format!(
                "snapshot: truncated at tensor {} (need {need} bytes, have {})",
                info.name,
                bytes.len() - off
            )));
        }
        let data: Vec<f64> = bytes[off..off + need]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        off += need;
        tensors.push((info.name, Tensor::new(info.shape, data)?));
    }
    if off != bytes.len() {
        return Err(Error::Format(format!(
            "snapshot: {} trailing bytes after last tensor",
            bytes.len() - off
        )));
    }
    Ok((header.meta, tensors))
}

/// Load snapshot tensors into an already-built model with matching
/// architecture; names and shapes must agree exactly.
pub fn load_snapshot(path: &Path, model: &mut Model) -> Result<SnapshotMeta> {
    let (meta, tensors) = read_snapshot(path)?;
    let expect = snapshot_tensors(model);
    if tensors.len() != expect.len() {
        return Err(Error::Format(format!(
            "snapshot has {} tensors, model expects {}",
            tensors.len(),
            expect.len()
        )));
    }
    for ((name, t), (want_name, want)) in tensors.iter().zip(&expect) {
        if name != want_name || t.shape() != want.shape() {
            return Err(Error::Format(format!(
                "snapshot tensor {name} {:?} does not match model tensor {want_name} {:?}",
                t.shape(),
                want.shape()
            )));
        }
    }
    let n_params = model.params.tensors.len();
    for (i, (_, t)) in tensors.into_iter().enumerate() {
        if i < n_params {
            model.params.tensors[i] = t;
        } else {
            let bi = (i - n_params) / 2;
            if (i - n_params) % 2 == 0 {
                model.bn[bi].mean = t.into_data();
            } else {
                model.bn[bi].var = t.into_data();
            }
        }
    }
    Ok(meta)
}
