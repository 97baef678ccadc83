//! Run configuration: a flat TOML key/value file covering model, data,
//! training, policy and harness settings. Its canonical serialization is
//! hashed and the hash is stamped into every artifact.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{gen_synthetic, load_cifar10, CifarOptions, Dataset, Normalization, SyntheticSpec};
use crate::discretize::RepairPolicy;
use crate::graph::{GraphError, Network, Shape};
use crate::mixed::Parameterization;
use crate::templates::{build_network, NetworkConfig, TemplateName};
use crate::trainer::{default_arch_epochs, ThetaPreset, TrainConfig, TransformMode};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid value for `{key}`: {message}")]
    Invalid { key: &'static str, message: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn invalid(key: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key, message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Original,
    OursCell,
    OursFull,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Original, Method::OursCell, Method::OursFull];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Original => "original",
            Method::OursCell => "ours-cell",
            Method::OursFull => "ours-full",
        }
    }

    pub fn transform_mode(self) -> TransformMode {
        match self {
            Method::Original => TransformMode::Off,
            Method::OursCell => TransformMode::Cell,
            Method::OursFull => TransformMode::Full,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| format!("unknown method `{s}` (expected original, ours-cell or ours-full)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: TemplateName,
    pub channels: usize,
    /// Cells of `plain-cnn`, blocks per stage of `resnet-mini`.
    pub cells: usize,

    pub dataset: DatasetKind,
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub image_channels: usize,
    pub noise: f64,
    pub jitter: usize,
    pub data_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cifar_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cifar_subset_per_class: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cifar_test_subset_per_class: Option<usize>,
    pub norm_mean: [f64; 3],
    pub norm_std: [f64; 3],

    pub total_epochs: usize,
    /// Defaults to a quarter of `total_epochs`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arch_epochs: Option<usize>,
    pub batch_size: usize,
    pub lr_omega: f64,
    pub momentum: f64,
    pub lr_theta: f64,
    pub parameterization: Parameterization,
    pub transform_mode: TransformMode,
    pub seed: u64,
    pub repair_policy: RepairPolicy,
    pub cosine_schedule: bool,
    pub augment: bool,
    pub theta_preset: ThetaPreset,

    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub workers: usize,
    /// Short-training budget per candidate when enumerating architectures.
    pub oracle_epochs: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let syn = SyntheticSpec::default();
        let norm = Normalization::default();
        let train = TrainConfig::default();
        Self {
            model: TemplateName::Tiny,
            channels: 8,
            cells: 2,
            dataset: DatasetKind::Synthetic,
            classes: syn.classes,
            train_per_class: syn.train_per_class,
            test_per_class: syn.test_per_class,
            image_size: syn.image_size,
            image_channels: syn.channels,
            noise: syn.noise,
            jitter: syn.jitter,
            data_seed: syn.seed,
            cifar_dir: None,
            cifar_subset_per_class: None,
            cifar_test_subset_per_class: None,
            norm_mean: norm.mean,
            norm_std: norm.std,
            total_epochs: train.total_epochs,
            arch_epochs: None,
            batch_size: train.batch_size,
            lr_omega: train.lr_omega,
            momentum: train.momentum,
            lr_theta: train.lr_theta,
            parameterization: train.parameterization,
            transform_mode: train.transform_mode,
            seed: train.seed,
            repair_policy: train.repair_policy,
            cosine_schedule: train.cosine_schedule,
            augment: train.augment,
            theta_preset: train.theta_preset,
            methods: Method::ALL.to_vec(),
            seeds: vec![1, 2, 3, 4, 5],
            workers: 1,
            oracle_epochs: 2,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse { path: origin.to_string(), message: e.to_string() })?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Canonical text form: every key, in declaration order.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization, hex encoded. `out_dir` and
    /// `workers` cannot change results and are left out.
    pub fn hash(&self) -> String {
        let defaults = RunConfig::default();
        let canonical = RunConfig { out_dir: defaults.out_dir, workers: defaults.workers, ..self.clone() };
        hex::encode(Sha256::digest(canonical.to_toml().as_bytes()))
    }

    pub fn arch_epochs(&self) -> usize {
        self.arch_epochs.unwrap_or_else(|| default_arch_epochs(self.total_epochs))
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        if self.channels == 0 {
            return Err(invalid("channels", "must be positive"));
        }
        if self.cells == 0 {
            return Err(invalid("cells", "must be positive"));
        }
        if self.total_epochs == 0 {
            return Err(invalid("total_epochs", "must be positive"));
        }
        if self.transform_mode != TransformMode::Off && self.arch_epochs() >= self.total_epochs {
            return Err(invalid("arch_epochs", format!("{} must be below total_epochs ({})", self.arch_epochs(), self.total_epochs)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be at least 1"));
        }
        for (key, v) in [("lr_omega", self.lr_omega), ("momentum", self.momentum), ("lr_theta", self.lr_theta), ("noise", self.noise)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(key, format!("must be finite and >= 0, got {v}")));
            }
        }
        if self.norm_std.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(invalid("norm_std", "entries must be positive"));
        }
        if self.methods.is_empty() {
            return Err(invalid("methods", "must list at least one method"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "must list at least one seed"));
        }
        if self.workers == 0 {
            return Err(invalid("workers", "must be at least 1"));
        }
        match self.dataset {
            DatasetKind::Synthetic => {
                if self.classes < 2 {
                    return Err(invalid("classes", "need at least 2"));
                }
                for (key, v) in [
                    ("train_per_class", self.train_per_class),
                    ("test_per_class", self.test_per_class),
                    ("image_size", self.image_size),
                    ("image_channels", self.image_channels),
                ] {
                    if v == 0 {
                        return Err(invalid(key, "must be positive"));
                    }
                }
            }
            DatasetKind::Cifar10 => {
                if self.cifar_dir.is_none() {
                    return Err(invalid("cifar_dir", "required when dataset = \"cifar10\""));
                }
            }
        }
        Ok(())
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.classes,
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
            image_size: self.image_size,
            channels: self.image_channels,
            noise: self.noise,
            jitter: self.jitter,
            seed: self.data_seed,
        }
    }

    pub fn dataset(&self) -> Result<Dataset, crate::Error> {
        Ok(match self.dataset {
            DatasetKind::Synthetic => gen_synthetic(&self.synthetic_spec())?,
            DatasetKind::Cifar10 => {
                let dir = self.cifar_dir.as_deref().ok_or_else(|| invalid("cifar_dir", "missing"))?;
                let opts = CifarOptions {
                    subset_per_class: self.cifar_subset_per_class,
                    test_subset_per_class: self.cifar_test_subset_per_class,
                    normalization: Normalization { mean: self.norm_mean, std: self.norm_std },
                };
                load_cifar10(dir, &opts)?
            }
        })
    }

    pub fn input_shape(&self) -> Shape {
        match self.dataset {
            DatasetKind::Synthetic => Shape::new(self.image_channels, self.image_size, self.image_size),
            DatasetKind::Cifar10 => Shape::new(3, 32, 32),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self.dataset {
            DatasetKind::Synthetic => self.classes,
            DatasetKind::Cifar10 => crate::data::CIFAR_CLASSES,
        }
    }

    pub fn network(&self) -> Result<Network, GraphError> {
        let cfg = NetworkConfig::new(self.channels, self.num_classes(), self.input_shape()).with_cells(self.cells);
        build_network(self.model, &cfg)
    }

    /// Training settings for one run; `mode` and `seed` override the file's values.
    pub fn train_config(&self, mode: TransformMode, seed: u64) -> TrainConfig {
        TrainConfig {
            total_epochs: self.total_epochs,
            arch_epochs: self.arch_epochs(),
            batch_size: self.batch_size,
            lr_omega: self.lr_omega,
            momentum: self.momentum,
            lr_theta: self.lr_theta,
            parameterization: self.parameterization,
            transform_mode: mode,
            seed,
            repair_policy: self.repair_policy,
            cosine_schedule: self.cosine_schedule,
            augment: self.augment,
            theta_preset: self.theta_preset,
        }
    }
}
