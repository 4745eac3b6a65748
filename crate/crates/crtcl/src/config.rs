//! Experiment configuration: one TOML tree covering the dataset, model,
//! training schedule, active-learning loop and outputs.

use std::path::{Path, PathBuf};

use crtcl_core::active::ALConfig;
use crtcl_core::data::{synth_dataset, Dataset, SynthConfig};
use crtcl_core::models::{GeneratorConfig, ImageShape};
use crtcl_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{load_cifar10, load_mnist_idx, read_file};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    /// Labels come from the hidden ground truth.
    #[default]
    Simulated,
    /// Labels come from clients of the HTTP labeling service.
    Service,
}

impl OracleMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Simulated => "simulated",
            Self::Service => "service",
        }
    }
}

/// A dataset read from disk, optionally keeping only the first samples of
/// each split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirDataset {
    pub dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic(SynthConfig),
    Cifar10(DirDataset),
    Mnist(DirDataset),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self::Synthetic(SynthConfig::default())
    }
}

impl DatasetSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Synthetic(_) => "synthetic",
            Self::Cifar10(_) => "cifar10",
            Self::Mnist(_) => "mnist",
        }
    }

    /// Parses the `--dataset` flag: `synthetic`, `cifar10:<dir>` or
    /// `mnist:<dir>`.
    pub fn parse_flag(flag: &str) -> Result<Self> {
        let (kind, dir) = match flag.split_once(':') {
            Some((k, d)) => (k, Some(d)),
            None => (flag, None),
        };
        let dir_dataset = |d: Option<&str>| match d {
            Some(d) if !d.is_empty() => Ok(DirDataset {
                dir: PathBuf::from(d),
                train_limit: None,
                test_limit: None,
            }),
            _ => Err(Error::Config(format!("--dataset {kind} needs a directory, e.g. {kind}:/data/{kind}"))),
        };
        match kind {
            "synthetic" if dir.is_none() => Ok(Self::Synthetic(SynthConfig::default())),
            "cifar10" => dir_dataset(dir).map(Self::Cifar10),
            "mnist" => dir_dataset(dir).map(Self::Mnist),
            _ => Err(Error::Config(format!(
                "--dataset: unknown value `{flag}`; expected synthetic, cifar10:<dir> or mnist:<dir>"
            ))),
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        let limited = |ds: Dataset, d: &DirDataset| {
            let (train, test) = (ds.train.len(), ds.test.len());
            ds.truncated(d.train_limit.unwrap_or(train), d.test_limit.unwrap_or(test))
        };
        Ok(match self {
            Self::Synthetic(cfg) => synth_dataset(cfg)?,
            Self::Cifar10(d) => limited(load_cifar10(&d.dir)?, d),
            Self::Mnist(d) => limited(load_mnist_idx(&d.dir)?, d),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    /// Output channels of the four conv blocks.
    pub widths: [usize; 4],
    /// Also feed the raw image to the critic.
    pub image_tap: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            widths: [32, 64, 128, 256],
            image_tap: false,
        }
    }
}

impl ModelSpec {
    pub fn generator(&self, input: ImageShape, classes: usize) -> GeneratorConfig {
        let mut cfg = GeneratorConfig::desk(input, classes, self.widths);
        cfg.taps.image = self.image_tap;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSpec {
    pub bind: String,
    pub port: u16,
}

impl Default for ServiceSpec {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1".into(),
            port: 8080,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed of trial 0; trial `i` uses `seed + i`.
    pub seed: u64,
    pub trials: usize,
    /// Run trials on separate threads.
    pub parallel: bool,
    pub out: PathBuf,
    pub oracle: OracleMode,
    /// Fill the `seconds` column of training logs with wall-clock time.
    /// Off by default so reruns produce identical files.
    pub record_timing: bool,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub active: ALConfig,
    pub service: ServiceSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 3,
            parallel: false,
            out: PathBuf::from("runs/crtcl"),
            oracle: OracleMode::Simulated,
            record_timing: false,
            dataset: DatasetSpec::default(),
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            active: ALConfig::default(),
            service: ServiceSpec::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a TOML document. Errors name the offending
    /// field path.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let at = if path == "." { String::new() } else { format!("{path}: ") };
            Error::Config(format!("{at}{}", inner.message().trim()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let field = |path: &str, msg: &str| Err(Error::Config(format!("{path}: {msg}")));
        if self.trials == 0 {
            return field("trials", "must be at least 1");
        }
        if self.model.widths.contains(&0) {
            return field("model.widths", "every width must be at least 1");
        }
        if self.active.ece_bins == 0 {
            return field("active.ece_bins", "must be at least 1");
        }
        if self.active.score_batch == 0 {
            return field("active.score_batch", "must be at least 1");
        }
        if let DatasetSpec::Synthetic(s) = &self.dataset {
            if s.classes < 2 {
                return field("dataset.classes", "must be at least 2");
            }
            if s.size < 16 {
                return field("dataset.size", "must be at least 16 for four pooling blocks");
            }
        }
        let al = self.active.clone().normalized();
        al.validate().map_err(|e| Error::Config(format!("active: {e}")))?;
        al.apply_to(&self.train)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    /// Seed of trial `i`.
    pub fn trial_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_add(i as u64)
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}
