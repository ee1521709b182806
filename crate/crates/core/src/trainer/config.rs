use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cfd::LcscConfig;
use crate::data::phantom::PhantomConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{InputCombo, ModelConfig};
use crate::params::hex_digest;
use crate::segnet::SegNetConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    /// A synthetic cohort generated in memory.
    Phantom {
        n_subjects: usize,
        seed: u64,
        #[serde(default)]
        phantom: PhantomConfig,
    },
    /// `<path>/<subject>/{t1,fa,label}.nii[.gz]`.
    Directory {
        path: PathBuf,
        #[serde(default)]
        resize: Option<[usize; 3]>,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Phantom { n_subjects: 10, seed: 0, phantom: PhantomConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub labeled_fraction: f64,
    pub n_test: usize,
    pub seed: u64,
    /// Slicing axis of the volumes.
    pub axis: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { labeled_fraction: 0.2, n_test: 2, seed: 0, axis: 2 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalModel {
    #[default]
    Teacher,
    Student,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub gamma: f64,
    /// Noise augmentations per unlabeled sample for the consistency filter.
    pub m: usize,
    pub threshold: f64,
    /// Offset in the decomposition loss denominator; must exceed 1.
    pub epsilon: f64,
    pub use_dcp: bool,
    pub use_cse: bool,
    pub use_cfd: bool,
    pub input_combo: InputCombo,
    /// Off drops every unlabeled slice (purely supervised training).
    pub use_unlabeled: bool,
    /// Decomposition loss over labeled and unlabeled slices, or labeled only.
    pub dcp_on_unlabeled: bool,
    /// Consistency loss on noise-augmented instead of clean inputs.
    pub cse_noisy_input: bool,
    /// Flips plus brightness/contrast jitter.
    pub augment: bool,
    pub evaluate_with: EvalModel,
    pub binarize_threshold: f64,
    pub loss: LossWeights,
    pub t1: LcscConfig,
    pub fa: LcscConfig,
    pub segnet: SegNetConfig,
    pub data: DataSource,
    pub split: SplitConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lr: 2e-4,
            weight_decay: 1e-5,
            epochs: 200,
            batch_labeled: 4,
            batch_unlabeled: 4,
            gamma: 0.99,
            m: 3,
            threshold: 0.05,
            epsilon: 1.01,
            use_dcp: true,
            use_cse: true,
            use_cfd: true,
            input_combo: InputCombo::T1Fa,
            use_unlabeled: true,
            dcp_on_unlabeled: true,
            cse_noisy_input: false,
            augment: true,
            evaluate_with: EvalModel::Teacher,
            binarize_threshold: 0.5,
            loss: LossWeights::default(),
            t1: LcscConfig::default(),
            fa: LcscConfig::default(),
            segnet: SegNetConfig::default(),
            data: DataSource::default(),
            split: SplitConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} must be positive")))
            }
        };
        positive("lr", self.lr)?;
        positive("threshold", self.threshold)?;
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        if self.epochs == 0 || self.batch_labeled == 0 {
            return Err(Error::Config("epochs and batch_labeled must be positive".into()));
        }
        if self.use_unlabeled && self.batch_unlabeled == 0 {
            return Err(Error::Config("batch_unlabeled must be positive when unlabeled data is used".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} must lie in [0, 1]", self.gamma)));
        }
        if self.m == 0 {
            return Err(Error::Config("M must be at least 1".into()));
        }
        if !(self.epsilon > 1.0) {
            return Err(Error::Config(format!("epsilon {} must exceed 1", self.epsilon)));
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return Err(Error::Config("binarize_threshold must lie in (0, 1)".into()));
        }
        self.loss.validate()?;
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            t1: self.t1.clone(),
            fa: self.fa.clone(),
            segnet: self.segnet.clone(),
            use_cfd: self.use_cfd,
            input_combo: self.input_combo,
        }
        .effective()
    }

    /// The decomposition loss is active.
    pub fn dcp_active(&self) -> bool {
        self.use_dcp && self.loss.beta > 0.0 && self.model_config().use_cfd
    }

    /// Purely supervised variant: no decomposition loss, no filtering, no
    /// unlabeled data.
    pub fn baseline(&self) -> Self {
        let mut c = self.clone();
        c.loss.beta = 0.0;
        c.use_dcp = false;
        c.use_cse = false;
        c.use_unlabeled = false;
        c
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serializes"));
        hex_digest(h)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}
