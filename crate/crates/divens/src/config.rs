//! Experiment configuration: one JSON document naming the dataset, the
//! ensemble architecture, the training recipe, and the attack suite.
//!
//! The CLI deserializes a config, validates every field, and only then
//! starts loading data or training, so a typo or an out-of-range
//! hyperparameter is reported before any compute happens. Unknown fields
//! are rejected rather than ignored. Every knob has a default tuned for
//! desk-scale runs (a 10-class synthetic blob problem that trains in
//! minutes on one CPU), which makes the empty document `{}` a complete,
//! valid configuration.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackConfig, AttackMethod};
use crate::data::{load_idx, synth_blobs, Dataset};
use crate::diversity::AdpConfig;
use crate::error::{Error, Result};
use crate::model::MlpConfig;
use crate::training::TrainConfig;

fn default_blob_classes() -> usize {
    10
}
fn default_blob_dim() -> usize {
    20
}
fn default_blob_train_per_class() -> usize {
    400
}
fn default_blob_test_per_class() -> usize {
    100
}
fn default_blob_spread() -> f64 {
    0.08
}
fn default_idx_train_limit() -> Option<usize> {
    Some(4000)
}
fn default_idx_test_limit() -> Option<usize> {
    Some(1000)
}

/// Where the train and test examples come from.
///
/// The `blobs` variant generates the desk-scale synthetic problem from the
/// experiment seed alone; the `idx` variant reads big-endian IDX image and
/// label pairs from disk. IDX limits keep desk-scale runs fast by taking
/// only the first examples of each file; set a limit to `null` explicitly
/// to use the whole file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSpec {
    /// Synthetic unit-sphere Gaussian blobs, split per class into train
    /// and test.
    Blobs {
        /// Number of classes.
        #[serde(default = "default_blob_classes")]
        classes: usize,
        /// Feature dimension.
        #[serde(default = "default_blob_dim")]
        dim: usize,
        /// Training examples per class.
        #[serde(default = "default_blob_train_per_class")]
        train_per_class: usize,
        /// Test examples per class.
        #[serde(default = "default_blob_test_per_class")]
        test_per_class: usize,
        /// Noise scale around each class mean.
        #[serde(default = "default_blob_spread")]
        spread: f64,
    },
    /// IDX image/label file pairs (the MNIST container format).
    Idx {
        /// Training images file.
        train_images: String,
        /// Training labels file.
        train_labels: String,
        /// Test images file.
        test_images: String,
        /// Test labels file.
        test_labels: String,
        /// Keep only the first `n` training examples (`null` keeps all).
        #[serde(default = "default_idx_train_limit")]
        train_limit: Option<usize>,
        /// Keep only the first `n` test examples (`null` keeps all).
        #[serde(default = "default_idx_test_limit")]
        test_limit: Option<usize>,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Blobs {
            classes: default_blob_classes(),
            dim: default_blob_dim(),
            train_per_class: default_blob_train_per_class(),
            test_per_class: default_blob_test_per_class(),
            spread: default_blob_spread(),
        }
    }
}

impl DatasetSpec {
    /// Checks the schema-level constraints that do not require touching
    /// the filesystem.
    pub fn validate(&self) -> Result<()> {
        match self {
            DatasetSpec::Blobs {
                classes,
                dim,
                train_per_class,
                test_per_class,
                spread,
            } => {
                if *classes < 2 {
                    return Err(Error::Usage(format!(
                        "dataset: classes must be >= 2, got {classes}"
                    )));
                }
                if *dim < 1 {
                    return Err(Error::Usage("dataset: dim must be >= 1".into()));
                }
                if *train_per_class < 1 || *test_per_class < 1 {
                    return Err(Error::Usage(format!(
                        "dataset: per-class counts must be >= 1, got train {train_per_class} / test {test_per_class}"
                    )));
                }
                if !(*spread > 0.0 && spread.is_finite()) {
                    return Err(Error::Usage(format!(
                        "dataset: spread must be a positive finite number, got {spread}"
                    )));
                }
            }
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_limit,
                test_limit,
            } => {
                for (name, path) in [
                    ("train_images", train_images),
                    ("train_labels", train_labels),
                    ("test_images", test_images),
                    ("test_labels", test_labels),
                ] {
                    if path.is_empty() {
                        return Err(Error::Usage(format!("dataset: {name} path is empty")));
                    }
                }
                if train_limit == &Some(0) || test_limit == &Some(0) {
                    return Err(Error::Usage(
                        "dataset: limits must be >= 1 (use null to keep every example)".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Loads the `(train, test)` pair, generating blobs from `seed`.
    pub fn load(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetSpec::Blobs {
                classes,
                dim,
                train_per_class,
                test_per_class,
                spread,
            } => {
                let all = synth_blobs(
                    seed,
                    *classes,
                    *dim,
                    train_per_class + test_per_class,
                    *spread,
                )?;
                all.split_per_class(*train_per_class)
            }
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_limit,
                test_limit,
            } => {
                let mut train = load_idx(train_images, train_labels)?;
                if let Some(n) = train_limit {
                    train = train.take(*n)?;
                }
                let mut test = load_idx(test_images, test_labels)?;
                if let Some(n) = test_limit {
                    test = test.take(*n)?;
                }
                Ok((train, test))
            }
        }
    }
}

fn default_ensemble_size() -> usize {
    3
}
fn default_mlp() -> MlpConfig {
    MlpConfig::new(default_blob_dim(), default_blob_classes())
        .expect("the built-in architecture is valid")
}
fn default_train() -> TrainConfig {
    TrainConfig::new(
        40,
        0,
        AdpConfig::new(2.0, 0.5).expect("the built-in coefficients are valid"),
    )
}
fn default_attacks() -> Vec<AttackConfig> {
    vec![AttackConfig::new(AttackMethod::Pgd)]
}

/// A full experiment: data, architecture, training, and the attacks to
/// evaluate against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Data source.
    #[serde(default)]
    pub dataset: DatasetSpec,
    /// Number of ensemble members.
    #[serde(default = "default_ensemble_size")]
    pub ensemble_size: usize,
    /// Shared member architecture.
    #[serde(default = "default_mlp")]
    pub mlp: MlpConfig,
    /// Training recipe, including the regularizer coefficients.
    #[serde(default = "default_train")]
    pub train: TrainConfig,
    /// Attacks run by the `eval` command.
    #[serde(default = "default_attacks")]
    pub attacks: Vec<AttackConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSpec::default(),
            ensemble_size: default_ensemble_size(),
            mlp: default_mlp(),
            train: default_train(),
            attacks: default_attacks(),
        }
    }
}

impl ExperimentConfig {
    /// Parses and fully validates a JSON document.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| Error::Usage(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a JSON config file.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Usage(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_json_str(&text)
    }

    /// The effective config as pretty-printed JSON (defaults filled in).
    pub fn to_json_string(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    /// Replaces the experiment seed (the `--seed` flag wins over the file).
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self
    }

    /// Validates every section plus the cross-field constraints that are
    /// knowable without reading data files.
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        if self.ensemble_size < 1 {
            return Err(Error::Usage("ensemble_size must be >= 1".into()));
        }
        self.mlp.validate()?;
        self.train.validate()?;
        for (i, attack) in self.attacks.iter().enumerate() {
            attack
                .validate()
                .map_err(|e| Error::Usage(format!("attacks[{i}]: {e}")))?;
        }
        if let DatasetSpec::Blobs { classes, dim, .. } = &self.dataset {
            if self.mlp.input_dim != *dim {
                return Err(Error::Usage(format!(
                    "mlp.input_dim {} does not match dataset dim {dim}",
                    self.mlp.input_dim
                )));
            }
            if self.mlp.num_classes != *classes {
                return Err(Error::Usage(format!(
                    "mlp.num_classes {} does not match dataset classes {classes}",
                    self.mlp.num_classes
                )));
            }
        }
        Ok(())
    }

    /// Loads the dataset and checks it against the architecture.
    ///
    /// Blob dimensions are already checked by [`validate`](Self::validate);
    /// IDX files can only be checked after their headers are read, which
    /// happens here.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = self.dataset.load(self.train.seed)?;
        for (split, data) in [("train", &train), ("test", &test)] {
            if data.dim() != self.mlp.input_dim {
                return Err(Error::Usage(format!(
                    "{split} split has dimension {} but mlp.input_dim is {}",
                    data.dim(),
                    self.mlp.input_dim
                )));
            }
            if data.num_classes() != self.mlp.num_classes {
                return Err(Error::Usage(format!(
                    "{split} split has {} classes but mlp.num_classes is {}",
                    data.num_classes(),
                    self.mlp.num_classes
                )));
            }
        }
        Ok((train, test))
    }
}
