//! gradnet-core: a small CPU deep-learning stack built around one idea —
//! training a network as a weighted mean of two architectures and annealing
//! the weight from the easy one to the hard one.
//!
//! A GradNet layer computes `(1-g)·early(x) + g·late(x)` where the gate
//! `g = min(t/τ, 1)` rises linearly over the first τ epochs. Pick `early`
//! to be friendly to optimization (identity, mean pooling, batchnorm) and
//! `late` to be the architecture you actually want (ReLU, max pooling,
//! plain feedforward), and networks that fail to train statically — very
//! deep ReLU stacks, dropout at p=0.9 — become trainable, ending up in the
//! static architecture once g reaches 1.
//!
//! The crate is self-contained: tensors and reverse-mode autodiff
//! ([`tape`]), the gate schedule ([`annealing`]), the layer zoo ([`layers`]),
//! Adam + orthogonal init ([`optim`]), dataset loading ([`data`]), and a
//! config-driven training harness ([`config`], [`model`], [`train`]) with a
//! finite-difference verification suite ([`gradcheck`]).

pub mod annealing;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use annealing::{gate, GateValue, LinearSchedule, ScheduleMode};
pub use config::{DatasetName, DatasetSpec, ExperimentConfig, LayerSpec, ModelSpec};
pub use data::{BatchPlan, Dataset};
pub use error::{Error, Result};
pub use gradcheck::{gradcheck_suite, CheckReport, DEFAULT_TOL};
pub use layers::{BnRunning, ForwardCtx, GradNetCombinator, Layer, Mode, ParamId};
pub use model::{build_model, load_snapshot, read_snapshot, save_snapshot, Model, SnapshotMeta};
pub use optim::{orthogonal_init, Adam, AdamConfig, EarlyStop, StopDecision};
pub use rng::{ns, stream};
pub use tape::{finite_diff_grad, NodeId, Padding, PoolKind, Tape};
pub use tensor::Tensor;
pub use train::{
    evaluate, load_dataset, train, train_loaded, train_with, EpochRecord, EvalMetrics, RunHistory,
    RunStatus, CONFIG_FILE, CSV_HEADER, METRICS_FILE, RUN_FILE, SNAPSHOT_FILE,
};
