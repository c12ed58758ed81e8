//! The training loop: schedule, batches, augmentation, optimizer, metrics,
//! early stopping, and run artifacts (metrics CSV, best-model snapshot,
//! run summary).

use crate::annealing::{LinearSchedule, ScheduleMode};
use crate::config::{DatasetName, DatasetSpec, ExperimentConfig};
use crate::data::{augment_hflip, batches, load_cifar10_bin, load_idx, synth_blobs, BatchPlan, Dataset};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::{build_model, save_snapshot, Model, SnapshotMeta};
use crate::optim::{Adam, EarlyStop, StopDecision};
use crate::rng::{ns, stream};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

pub const METRICS_FILE: &str = "metrics.csv";
pub const SNAPSHOT_FILE: &str = "snapshot.bin";
pub const RUN_FILE: &str = "run.json";
pub const CONFIG_FILE: &str = "config.json";
pub const CSV_HEADER: &str = "epoch,g,train_loss,train_acc,val_loss,val_acc,wall_seconds";

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub g: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    EarlyStopped,
    Diverged,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunHistory {
    pub records: Vec<EpochRecord>,
    pub status: RunStatus,
    pub best_epoch: Option<u32>,
    pub best_val_acc: f64,
    pub final_g: f64,
    pub param_count: usize,
    /// Sweep depths count hidden layers only; the output layer is excluded.
    pub depth_convention: &'static str,
}

impl RunHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.epoch, r.g, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.wall_seconds
            );
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
}

/// Load the train/validation pair described by a dataset spec. `seed` only
/// matters for synth (it generates the data).
pub fn load_dataset(spec: &DatasetSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    let dir = spec.resolve_dir();
    let (mut train, mut val) = match spec.name {
        DatasetName::Mnist => {
            let train = load_idx(
                &dir.join("train-images-idx3-ubyte"),
                &dir.join("train-labels-idx1-ubyte"),
            )?;
            match spec.val_fraction {
                Some(f) => train.split_val(f)?,
                None => {
                    let val = load_idx(
                        &dir.join("t10k-images-idx3-ubyte"),
                        &dir.join("t10k-labels-idx1-ubyte"),
                    )?;
                    (train, val)
                }
            }
        }
        DatasetName::Cifar10 => {
            let paths: Vec<_> = (1..=5)
                .map(|i| dir.join(format!("data_batch_{i}.bin")))
                .filter(|p| p.exists())
                .collect();
            if paths.is_empty() {
                return Err(Error::Config(format!(
                    "no data_batch_*.bin files under {}",
                    dir.display()
                )));
            }
            let train = load_cifar10_bin(&paths)?;
            match spec.val_fraction {
                Some(f) => train.split_val(f)?,
                None => {
                    let val = load_cifar10_bin(&[dir.join("test_batch.bin")])?;
                    (train, val)
                }
            }
        }
        DatasetName::Synth => {
            let s = spec.synth.expect("validated");
            let ds = synth_blobs(s.n, s.d, s.k, seed)?;
            ds.split_val(spec.val_fraction.unwrap_or(0.1))?
        }
    };
    if let Some(n) = spec.limit_train {
        train = train.take(n);
    }
    if let Some(n) = spec.limit_val {
        val = val.take(n);
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("empty train or validation split".into()));
    }
    Ok((train, val))
}

/// Mean loss and accuracy over a dataset in eval mode at gate `g`.
/// Deterministic and side-effect free: repeated calls give identical results.
pub fn evaluate(model: &mut Model, data: &Dataset, g: f64, batch_size: usize) -> Result<EvalMetrics> {
    if data.num_classes != model.num_classes {
        return Err(Error::Contract(format!(
            "dataset has {} classes, model has {}",
            data.num_classes, model.num_classes
        )));
    }
    let n = data.len();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(batch_size) {
        let (images, labels) = data.gather(chunk);
        let (mut tape, logits, _) = model.forward(&images, Mode::Eval, g, 0, 0, 0)?;
        let loss = tape.softmax_xent(logits, &labels)?;
        loss_sum += tape.value(loss).item() * chunk.len() as f64;
        correct += count_correct(tape.value(logits), &labels);
    }
    Ok(EvalMetrics { loss: loss_sum / n as f64, accuracy: correct as f64 / n as f64 })
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let [n, k] = [logits.shape()[0], logits.shape()[1]];
    let d = logits.data();
    let mut correct = 0;
    for (i, &label) in labels.iter().enumerate().take(n) {
        let row = &d[i * k..(i + 1) * k];
        let mut arg = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[arg] {
                arg = j;
            }
        }
        if arg == label {
            correct += 1;
        }
    }
    correct
}

/// Train per the config. Writes `metrics.csv`, `run.json`, `config.json`,
/// and the best-model `snapshot.bin` into `config.out_dir` when set; the
/// same history is returned either way.
pub fn train(config: &ExperimentConfig) -> Result<RunHistory> {
    train_with(config, &mut |_| {})
}

/// `train`, invoking `on_epoch` after each completed epoch (progress
/// reporting; the record is exactly what lands in the history).
pub fn train_with(
    config: &ExperimentConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<RunHistory> {
    config.validate()?;
    let (train_set, val_set) = load_dataset(&config.dataset, config.seed)?;
    let input_shape = train_set.images.shape()[1..].to_vec();
    let mut model = build_model(config, &input_shape, train_set.num_classes)?;
    train_loaded(config, &mut model, &train_set, &val_set, on_epoch)
}

/// The epoch loop on an already-built model and already-loaded splits;
/// `train` is the front door, this is the engine (and what sweeps reuse).
pub fn train_loaded(
    config: &ExperimentConfig,
    model: &mut Model,
    train_set: &Dataset,
    val_set: &Dataset,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<RunHistory> {
    if let Some(dir) = &config.out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(config)?)?;
    }
    let schedule = LinearSchedule::new(config.schedule.tau, config.schedule.mode)?;
    let shapes = model.params.shapes();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut adam = Adam::new(config.optimizer.clone(), &shape_refs);
    let mut stopper = EarlyStop::new(config.early_stop.patience, config.early_stop.min_delta);
    let plan = BatchPlan { batch_size: config.batch_size, seed: config.seed, drop_last: false };
    let chance = 1.0 / train_set.num_classes as f64;

    let started = Instant::now();
    let mut records: Vec<EpochRecord> = Vec::new();
    let mut status = RunStatus::Completed;
    let mut last_train_acc = 0.0;

    'epochs: for epoch in 0..config.max_epochs {
        let g_epoch = schedule.gate_at(epoch).value();
        let batch_ids = batches(train_set.len(), &plan, epoch);
        let steps = batch_ids.len();
        let mut loss_sum = 0.0;
        let mut correct = 0usize;

        for (bi, ids) in batch_ids.iter().enumerate() {
            let g = match schedule.mode() {
                ScheduleMode::Epoch => g_epoch,
                ScheduleMode::Fractional => schedule.gate_for_batch(epoch, bi, steps).value(),
            };
            let (mut images, labels) = train_set.gather(ids);
            if config.dataset.hflip_p > 0.0 {
                let mut rng = stream(config.seed, ns::AUGMENT, u64::from(epoch), bi as u64);
                augment_hflip(&mut images, config.dataset.hflip_p, &mut rng)?;
            }
            let (mut tape, logits, param_nodes) =
                model.forward(&images, Mode::Train, g, config.seed, epoch, bi as u64)?;
            let loss = tape.softmax_xent(logits, &labels)?;
            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                status = RunStatus::Diverged;
                break 'epochs;
            }
            loss_sum += loss_val * ids.len() as f64;
            correct += count_correct(tape.value(logits), &labels);
            tape.backward(loss)?;
            let grads: Vec<Tensor> = param_nodes
                .iter()
                .map(|&p| tape.grad(p).expect("backward ran").clone())
                .collect();
            adam.step(&mut model.params.tensors, &grads, &model.params.names)?;
        }

        let train_loss = loss_sum / train_set.len() as f64;
        let train_acc = correct as f64 / train_set.len() as f64;
        last_train_acc = train_acc;
        let val = evaluate(model, val_set, g_epoch, config.batch_size)?;

        records.push(EpochRecord {
            epoch,
            g: g_epoch,
            train_loss,
            train_acc,
            val_loss: val.loss,
            val_acc: val.accuracy,
            wall_seconds: if config.timing { started.elapsed().as_secs_f64() } else { 0.0 },
        });
        on_epoch(records.last().expect("just pushed"));

        match stopper.update(epoch, val.accuracy) {
            StopDecision::NewBest => {
                if let Some(dir) = &config.out_dir {
                    let meta = SnapshotMeta {
                        epoch,
                        g: g_epoch,
                        input_shape: model.input_shape.clone(),
                        num_classes: model.num_classes,
                    };
                    save_snapshot(&dir.join(SNAPSHOT_FILE), model, &meta)?;
                }
            }
            StopDecision::Continue => {}
            StopDecision::Stop => {
                status = RunStatus::EarlyStopped;
                break 'epochs;
            }
        }
    }

    if status == RunStatus::Completed
        && records.len() == config.max_epochs as usize
        && last_train_acc <= chance + 0.02
    {
        status = RunStatus::Diverged;
    }

    let history = RunHistory {
        final_g: records.last().map_or(0.0, |r| r.g),
        records,
        status,
        best_epoch: stopper.best_epoch(),
        best_val_acc: if stopper.best_epoch().is_some() { stopper.best() } else { f64::NAN },
        param_count: model.param_count(),
        depth_convention: "hidden_layers",
    };

    if let Some(dir) = &config.out_dir {
        write_artifacts(dir, &history)?;
    }
    Ok(history)
}

fn write_artifacts(dir: &Path, history: &RunHistory) -> Result<()> {
    std::fs::write(dir.join(METRICS_FILE), history.to_csv())?;
    std::fs::write(dir.join(RUN_FILE), serde_json::to_string_pretty(history)?)?;
    Ok(())
}
