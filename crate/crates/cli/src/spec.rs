use std::path::{Path, PathBuf};

use csac::analysis::StudyInit;
use csac::datasets::ROTATED_MNIST_ANGLES;
use csac::federation::{Method, TrainingConfig};
use csac::{Error, Result};
use serde::{Deserialize, Serialize};

/// Which multi-domain dataset to build.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    RotatedMnist {
        #[serde(default = "default_per_class")]
        per_class: usize,
        #[serde(default = "default_angles")]
        angles: Vec<f64>,
        #[serde(default)]
        seed: u64,
        /// Directory with the IDX files; defaults to `<data root>/mnist`.
        #[serde(default)]
        source: Option<PathBuf>,
    },
    Synthetic {
        #[serde(default = "default_domains")]
        domains: usize,
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_shift")]
        shift: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_side")]
        side: usize,
        #[serde(default = "default_train_per_class")]
        train_per_class: usize,
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
        #[serde(default = "default_noise")]
        noise: f64,
    },
}

fn default_per_class() -> usize {
    100
}
fn default_angles() -> Vec<f64> {
    ROTATED_MNIST_ANGLES.to_vec()
}
fn default_domains() -> usize {
    4
}
fn default_classes() -> usize {
    10
}
fn default_shift() -> f64 {
    1.0
}
fn default_side() -> usize {
    20
}
fn default_train_per_class() -> usize {
    50
}
fn default_test_per_class() -> usize {
    30
}
fn default_noise() -> f64 {
    0.1
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::RotatedMnist {
            per_class: default_per_class(),
            angles: default_angles(),
            seed: 0,
            source: None,
        }
    }
}

impl DatasetSpec {
    pub fn synthetic(domains: usize, classes: usize, shift: f64, seed: u64) -> Self {
        DatasetSpec::Synthetic {
            domains,
            classes,
            shift,
            seed,
            side: default_side(),
            train_per_class: default_train_per_class(),
            test_per_class: default_test_per_class(),
            noise: default_noise(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            DatasetSpec::RotatedMnist { .. } => "rotated-mnist",
            DatasetSpec::Synthetic { .. } => "synthetic",
        }
    }
}

/// Settings of the parameter-distance study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySpec {
    pub models_per_domain: usize,
    pub layers: Vec<String>,
    pub init: StudyInit,
    pub epochs: usize,
}

impl Default for StudySpec {
    fn default() -> Self {
        StudySpec {
            models_per_domain: 5,
            layers: ["conv1", "conv2", "fc1", "fc2"].map(String::from).to_vec(),
            init: StudyInit::Shared,
            epochs: 5,
        }
    }
}

/// A complete experiment description, as read from a JSON config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub dataset: DatasetSpec,
    pub target: String,
    pub method: Method,
    pub training: TrainingConfig,
    pub out: PathBuf,
    pub seeds: Vec<u64>,
    /// Dataset cache root.
    pub data_dir: Option<PathBuf>,
    pub ablations: Vec<String>,
    pub study: StudySpec,
    pub save_checkpoints: bool,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            dataset: DatasetSpec::default(),
            target: "M0".into(),
            method: Method::Csac,
            training: TrainingConfig::default(),
            out: PathBuf::from("results"),
            seeds: vec![0],
            data_dir: None,
            ablations: Vec::new(),
            study: StudySpec::default(),
            save_checkpoints: false,
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub target: Option<String>,
    pub method: Option<String>,
    pub seeds: Option<String>,
    pub out: Option<PathBuf>,
    pub rounds: Option<usize>,
    pub lambda: Option<f64>,
    pub data_dir: Option<PathBuf>,
}

pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<u64>()
                .map_err(|_| Error::InvalidArgument(format!("bad seed `{p}` in `{s}`")))
        })
        .collect()
}

impl ExperimentSpec {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Defaults, then the config file, then explicit flags.
    pub fn resolve(config: Option<&Path>, ov: &Overrides) -> Result<Self> {
        let mut spec = match config {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        if let Some(t) = &ov.target {
            spec.target = t.clone();
        }
        if let Some(m) = &ov.method {
            spec.method = Method::parse(m)?;
        }
        if let Some(s) = &ov.seeds {
            spec.seeds = parse_seeds(s)?;
        }
        if let Some(o) = &ov.out {
            spec.out = o.clone();
        }
        if let Some(r) = ov.rounds {
            spec.training.rounds = r;
        }
        if let Some(l) = ov.lambda {
            spec.training.lambda = l;
        }
        if let Some(d) = &ov.data_dir {
            spec.data_dir = Some(d.clone());
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("seeds must be non-empty".into()));
        }
        self.training.validate()
    }

    /// Cache root: the spec value, else `CSAC_DATA_DIR`, else `~/.cache/csac`.
    pub fn data_root(&self) -> PathBuf {
        if let Some(d) = &self.data_dir {
            return d.clone();
        }
        if let Some(d) = std::env::var_os("CSAC_DATA_DIR") {
            return PathBuf::from(d);
        }
        let home = std::env::var_os("HOME").map_or_else(|| PathBuf::from("."), PathBuf::from);
        home.join(".cache").join("csac")
    }

    /// Training config for one seed.
    pub fn training_for(&self, seed: u64) -> TrainingConfig {
        TrainingConfig {
            seed,
            ..self.training.clone()
        }
    }
}
