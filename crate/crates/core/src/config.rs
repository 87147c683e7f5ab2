//! Run configuration: a JSON document whose fields all have defaults.
//!
//! Precedence, lowest to highest: built-in defaults, the config file,
//! command-line flags. `CAPSNET_DATA_DIR` supplies `data.dir` when neither
//! the file nor the flags do.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::caps::{ArchitectureSpec, RoutingMethod};
use crate::data::AugmentConfig;
use crate::error::{config_err, Error, Result};
use crate::objectives::{ActivationParams, MarginSchedule};
use crate::routing::FuzzyConfig;
use crate::train::{LrSchedule, TrainConfig};

pub const DATA_DIR_ENV: &str = "CAPSNET_DATA_DIR";
pub const RESOLVED_CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureSection {
    /// Preset name (`baseline`, `expanded`, `tiny`) or a layer string such as
    /// `Conv1: (64, 5, 2) - PrimaryCaps: (8, 1, 1) - ...`.
    pub layers: String,
    /// Input side; defaults to the preset's (28 for layer strings). A size
    /// other than the layers' native one refits the Classcaps kernel.
    pub input_size: Option<usize>,
    pub capsule_dim: usize,
    pub dropout: f64,
    pub pointwise_bias: bool,
}

impl Default for ArchitectureSection {
    fn default() -> Self {
        Self {
            layers: "baseline".into(),
            input_size: None,
            capsule_dim: 16,
            dropout: 0.2,
            pointwise_bias: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoutingSection {
    pub method: RoutingMethod,
    pub iterations: usize,
    pub shortcut: bool,
    pub fuzzy: FuzzyConfig,
}

impl Default for RoutingSection {
    fn default() -> Self {
        Self {
            method: RoutingMethod::Fuzzy,
            iterations: 2,
            shortcut: true,
            fuzzy: FuzzyConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectivesSection {
    pub activation: ActivationParams,
    pub margin: MarginSchedule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub lr: LrSchedule,
    pub seed: u64,
    pub record_wall_time: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            eval_batch_size: t.eval_batch_size,
            lr: t.lr,
            seed: t.seed,
            record_wall_time: t.record_wall_time,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Directory holding `train-*-ubyte[.gz]` (and optionally `t10k-*`).
    pub dir: Option<PathBuf>,
    /// Examples taken from the start of the training file; `None` uses all.
    pub subset_size: Option<usize>,
    /// Validation examples split off the subset; the rest train.
    pub n_val: usize,
    pub split_seed: u64,
    pub augmentation: AugmentConfig,
    /// Train on centred, zero-padded frames shifted by up to
    /// `augmentation.affnist_shift_px` per batch, instead of the 28x28
    /// originals with `augmentation.translate_px` shifts.
    pub padded_training: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dir: None,
            subset_size: Some(10_000),
            n_val: 2_000,
            split_seed: 0,
            augmentation: AugmentConfig::default(),
            padded_training: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub run_dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            run_dir: PathBuf::from("runs/latest"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub architecture: ArchitectureSection,
    pub routing: RoutingSection,
    pub objectives: ObjectivesSection,
    pub training: TrainingSection,
    pub data: DataSection,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| config_err!("{e}"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| config_err!("{}: {e}", path.display()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Fills `data.dir` from `CAPSNET_DATA_DIR` when unset.
    pub fn apply_env(&mut self) {
        if self.data.dir.is_none() {
            if let Some(dir) = std::env::var_os(DATA_DIR_ENV) {
                self.data.dir = Some(PathBuf::from(dir));
            }
        }
    }

    /// The network architecture described by the `architecture` and
    /// `routing` sections.
    pub fn architecture_spec(&self) -> Result<ArchitectureSpec> {
        let a = &self.architecture;
        let mut spec = match ArchitectureSpec::preset(&a.layers) {
            Ok(spec) => spec,
            Err(_) if a.layers.contains(':') => ArchitectureSpec::from_layers_unchecked(&a.layers)?,
            Err(e) => return Err(e),
        };
        let native = spec.input_size;
        spec.input_size = a.input_size.unwrap_or(if self.data.padded_training {
            self.data.augmentation.pad_to
        } else {
            native
        });
        spec.capsule_dim = a.capsule_dim;
        spec.dropout = a.dropout;
        spec.pointwise_bias = a.pointwise_bias;
        spec.routing = self.routing.method;
        spec.iterations = self.routing.iterations;
        spec.shortcut = self.routing.shortcut;
        if spec.input_size != native {
            spec.fit_class_kernel()?;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            eval_batch_size: t.eval_batch_size,
            lr: t.lr,
            margin: self.objectives.margin,
            seed: t.seed,
            translate_px: if self.data.padded_training {
                self.data.augmentation.affnist_shift_px
            } else {
                self.data.augmentation.translate_px
            },
            record_wall_time: t.record_wall_time,
        }
    }

    /// Existing data directory, or a config error naming the field.
    pub fn data_dir(&self) -> Result<&Path> {
        let dir = self
            .data
            .dir
            .as_deref()
            .ok_or_else(|| config_err!("data.dir: no dataset path given (use --data-dir or {DATA_DIR_ENV})"))?;
        if !dir.is_dir() {
            return Err(config_err!("data.dir: {} is not a directory", dir.display()));
        }
        Ok(dir)
    }

    /// Checks every section and reports all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut check = |field: &str, r: Result<()>| {
            if let Err(e) = r {
                problems.push(format!("{field}: {e}"));
            }
        };
        check("architecture", self.architecture_spec().map(|_| ()));
        check("routing.fuzzy", self.routing.fuzzy.validate());
        check("objectives.activation", self.objectives.activation.validate());
        check("training", self.train_config().validate());
        check("data.augmentation", self.data.augmentation.validate());
        if let Some(n) = self.data.subset_size {
            if self.data.n_val >= n {
                problems.push(format!("data.n_val: {} leaves no training examples in a subset of {n}", self.data.n_val));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid configuration:\n  {}", problems.join("\n  "))))
        }
    }
}
