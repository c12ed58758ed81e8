//! Experiment configuration: one JSON document, validated fully before any
//! training starts. Unknown keys are rejected everywhere — a typo in a config
//! should fail loudly, not silently fall back to a default.

use crate::annealing::ScheduleMode;
use crate::error::{Error, Result};
use crate::optim::AdamConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Environment variable naming the default dataset root.
pub const DATA_DIR_ENV: &str = "GRADNET_DATA_DIR";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: u32,
    #[serde(default)]
    pub early_stop: EarlyStopSpec,
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Orthogonal-init gain for weight matrices and kernels.
    #[serde(default = "default_gain")]
    pub init_gain: f64,
    /// Record real wall-clock times in the history. Disable for runs whose
    /// metrics files must be bit-identical across repetitions.
    #[serde(default = "default_true")]
    pub timing: bool,
}

fn default_gain() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_json(&text)
    }

    /// Structural validation that doesn't need the dataset: positive sizes,
    /// probabilities in range, tau non-negative. Shape propagation happens at
    /// build time when the input shape is known.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        if !self.schedule.tau.is_finite() || self.schedule.tau < 0.0 {
            return Err(Error::Config(format!(
                "schedule.tau must be finite and >= 0, got {}",
                self.schedule.tau
            )));
        }
        if !self.init_gain.is_finite() || self.init_gain <= 0.0 {
            return Err(Error::Config(format!("init_gain must be positive, got {}", self.init_gain)));
        }
        self.dataset.validate()?;
        for (i, spec) in self.model.layer_specs().iter().enumerate() {
            spec.validate()
                .map_err(|e| Error::Config(format!("model layer {i}: {e}")))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub tau: f64,
    #[serde(default)]
    pub mode: ScheduleMode,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStopSpec {
    /// `null` disables early stopping (fixed-epoch training).
    pub patience: Option<u32>,
    #[serde(default = "default_min_delta")]
    pub min_delta: f64,
}

fn default_min_delta() -> f64 {
    1e-4
}

impl Default for EarlyStopSpec {
    fn default() -> Self {
        EarlyStopSpec { patience: Some(10), min_delta: default_min_delta() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Mnist,
    Cifar10,
    Synth,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: DatasetName,
    /// Dataset directory; defaults to $GRADNET_DATA_DIR/<name> or data/<name>.
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// Tail fraction held out for validation when the dataset has no
    /// designated validation files.
    #[serde(default)]
    pub val_fraction: Option<f64>,
    /// Optional caps, applied from the front after loading.
    #[serde(default)]
    pub limit_train: Option<usize>,
    #[serde(default)]
    pub limit_val: Option<usize>,
    /// Horizontal-flip augmentation probability (train batches only).
    #[serde(default)]
    pub hflip_p: f64,
    /// Synth-only: sample count, dimension, cluster count.
    #[serde(default)]
    pub synth: Option<SynthSpec>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n: usize,
    pub d: usize,
    pub k: usize,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hflip_p) {
            return Err(Error::Config(format!("hflip_p {} outside [0,1]", self.hflip_p)));
        }
        if let Some(f) = self.val_fraction {
            if !(0.0..1.0).contains(&f) || f == 0.0 {
                return Err(Error::Config(format!("val_fraction {f} outside (0,1)")));
            }
        }
        if self.name == DatasetName::Synth && self.synth.is_none() {
            return Err(Error::Config("synth dataset needs a synth: {n,d,k} block".into()));
        }
        Ok(())
    }

    /// Directory this dataset loads from.
    pub fn resolve_dir(&self) -> PathBuf {
        if let Some(d) = &self.dir {
            return d.clone();
        }
        let sub = match self.name {
            DatasetName::Mnist => "mnist",
            DatasetName::Cifar10 => "cifar10",
            DatasetName::Synth => ".",
        };
        match std::env::var_os(DATA_DIR_ENV) {
            Some(root) => PathBuf::from(root).join(sub),
            None => PathBuf::from("data").join(sub),
        }
    }
}

/// Either an explicit layer list or a compact MLP template (handy for depth
/// and dropout sweeps).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Layers(Vec<LayerSpec>),
    Template(MlpTemplate),
}

impl ModelSpec {
    /// The explicit layer list, expanding the template form.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        match self {
            ModelSpec::Layers(specs) => specs.clone(),
            ModelSpec::Template(t) => t.expand(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum TemplateActivation {
    Relu,
    Grelu,
    InverseGrelu,
    Linear,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutTemplate {
    pub p: f64,
    pub gradual: bool,
}

/// `{"template":"mlp", "width":64, "depth":64, "activation":"grelu"}` —
/// `depth` hidden layers of `width` units (activation and optional dropout
/// after each), then a dense head sized by the dataset's class count.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpTemplate {
    pub template: TemplateName,
    pub width: usize,
    pub depth: usize,
    pub activation: TemplateActivation,
    #[serde(default)]
    pub dropout: Option<DropoutTemplate>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum TemplateName {
    Mlp,
}

impl MlpTemplate {
    pub fn expand(&self) -> Vec<LayerSpec> {
        let mut out = vec![LayerSpec::Flatten];
        for _ in 0..self.depth {
            out.push(LayerSpec::Dense { units: self.width });
            match self.activation {
                TemplateActivation::Relu => out.push(LayerSpec::Relu),
                TemplateActivation::Grelu => out.push(LayerSpec::Grelu),
                TemplateActivation::InverseGrelu => out.push(LayerSpec::InverseGrelu),
                TemplateActivation::Linear => {}
            }
            if let Some(d) = &self.dropout {
                out.push(if d.gradual {
                    LayerSpec::GradualDropout { p: d.p }
                } else {
                    LayerSpec::Dropout { p: d.p }
                });
            }
        }
        out.push(LayerSpec::DenseHead);
        out
    }
}

fn default_stride() -> Option<usize> {
    None
}

/// One layer in a declarative model description. `window`-bearing layers
/// default their stride to the window (non-overlapping).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense { units: usize },
    /// Final dense layer sized by the dataset's class count; what the MLP
    /// template emits so one template serves any dataset.
    DenseHead,
    Relu,
    LeakyRelu { slope: f64 },
    Grelu,
    InverseGrelu,
    Dropout { p: f64 },
    GradualDropout { p: f64 },
    MeanPool { window: usize, #[serde(default = "default_stride")] stride: Option<usize> },
    MaxPool { window: usize, #[serde(default = "default_stride")] stride: Option<usize> },
    GradualPool { window: usize, #[serde(default = "default_stride")] stride: Option<usize> },
    MixedPoolConst {
        window: usize,
        #[serde(default = "default_stride")]
        stride: Option<usize>,
        fixed_g: f64,
    },
    Batchnorm,
    GradualBatchnorm,
    Conv {
        filters: usize,
        kernel: usize,
        #[serde(default = "default_conv_stride")]
        stride: usize,
        #[serde(default)]
        padding: PadSpec,
    },
    GradualConv { kernel: usize },
    GradualNin { kernel: usize },
    Flatten,
}

fn default_conv_stride() -> usize {
    1
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum PadSpec {
    Valid,
    #[default]
    Same,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            LayerSpec::Dense { units } if *units == 0 => {
                Err(Error::Config("dense units must be >= 1".into()))
            }
            LayerSpec::Dropout { p } | LayerSpec::GradualDropout { p } => {
                if !(0.0..1.0).contains(p) {
                    Err(Error::Config(format!("dropout p {p} outside [0,1)")))
                } else {
                    Ok(())
                }
            }
            LayerSpec::LeakyRelu { slope } if !slope.is_finite() => {
                Err(Error::Config("leaky_relu slope must be finite".into()))
            }
            LayerSpec::MixedPoolConst { fixed_g, .. } => {
                if !(0.0..=1.0).contains(fixed_g) {
                    Err(Error::Config(format!("fixed_g {fixed_g} outside [0,1]")))
                } else {
                    Ok(())
                }
            }
            LayerSpec::MeanPool { window, .. }
            | LayerSpec::MaxPool { window, .. }
            | LayerSpec::GradualPool { window, .. }
                if *window == 0 =>
            {
                Err(Error::Config("pool window must be >= 1".into()))
            }
            LayerSpec::Conv { filters, kernel, stride, .. } => {
                if *filters == 0 || *kernel == 0 || *stride == 0 {
                    Err(Error::Config("conv filters, kernel, stride must be >= 1".into()))
                } else {
                    Ok(())
                }
            }
            LayerSpec::GradualConv { kernel } | LayerSpec::GradualNin { kernel }
                if *kernel == 0 =>
            {
                Err(Error::Config("kernel must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal(model: &str) -> String {
        format!(
            r#"{{
              "dataset": {{"name": "synth", "synth": {{"n": 100, "d": 4, "k": 2}}}},
              "model": {model},
              "schedule": {{"tau": 5.0}},
              "batch_size": 10,
              "max_epochs": 3,
              "seed": 0
            }}"#
        )
    }

    #[test]
    fn parses_layer_list() {
        let cfg = ExperimentConfig::from_json(&minimal(
            r#"[{"type":"flatten"},{"type":"dense","units":8},{"type":"grelu"},{"type":"dense_head"}]"#,
        ))
        .unwrap();
        assert_eq!(cfg.model.layer_specs().len(), 4);
        assert_eq!(cfg.optimizer.lr, 1e-3);
        assert_eq!(cfg.early_stop.patience, Some(10));
        assert!(cfg.timing);
    }

    #[test]
    fn parses_template_and_expands() {
        let cfg = ExperimentConfig::from_json(&minimal(
            r#"{"template":"mlp","width":64,"depth":3,"activation":"grelu"}"#,
        ))
        .unwrap();
        let specs = cfg.model.layer_specs();
        // flatten + 3*(dense+grelu) + head
        assert_eq!(specs.len(), 8);
        assert_eq!(specs[1], LayerSpec::Dense { units: 64 });
        assert_eq!(specs[7], LayerSpec::DenseHead);
    }

    #[test]
    fn rejects_unknown_keys_and_types() {
        assert!(ExperimentConfig::from_json(&minimal(
            r#"[{"type":"warp_drive"}]"#
        ))
        .is_err());
        let with_extra = minimal(r#"[{"type":"relu"}]"#).replace(
            "\"seed\": 0",
            "\"seed\": 0, \"unknown_field\": 1",
        );
        assert!(ExperimentConfig::from_json(&with_extra).is_err());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ExperimentConfig::from_json(
            &minimal(r#"[{"type":"dropout","p":1.0}]"#)
        )
        .is_err());
        let neg_tau = minimal(r#"[{"type":"relu"}]"#).replace("\"tau\": 5.0", "\"tau\": -1.0");
        assert!(ExperimentConfig::from_json(&neg_tau).is_err());
        let zero_tau = minimal(r#"[{"type":"relu"}]"#).replace("\"tau\": 5.0", "\"tau\": 0.0");
        assert!(ExperimentConfig::from_json(&zero_tau).is_ok());
    }

    #[test]
    fn patience_null_means_no_early_stop() {
        let text = minimal(r#"[{"type":"relu"}]"#).replace(
            "\"seed\": 0",
            "\"seed\": 0, \"early_stop\": {\"patience\": null, \"min_delta\": 1e-4}",
        );
        let cfg = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(cfg.early_stop.patience, None);
    }
}
