//! Model, training and run configuration, plus the flat `key = value`
//! config-file format.
//!
//! ```text
//! # comment
//! model.input_dims = 64, 64, 76
//! model.block_channels = 4, 8, 16, 32
//! train.epochs = 50
//! aug.rotate_deg = 10
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::landmarks::{DecodeRule, LandmarkId};
use crate::neuralcore::AdadeltaConfig;
use crate::volgrid::{GridSpec, AIR_HU};

/// Smallest input extent that survives four 2x2x2 poolings.
pub const MIN_INPUT_DIM: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// 64x64x76 input, channels [4, 8, 16, 32].
    Toy,
    /// 128x128x152 input, channels [8, 16, 32, 64].
    Full,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Profile::Toy),
            "full" => Ok(Profile::Full),
            other => Err(Error::Config(format!("unknown profile {other:?}, expected toy or full"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_dims: [usize; 3],
    /// Channels after each block's maxout.
    pub block_channels: Vec<usize>,
    pub maxout_k: usize,
    pub dense_hidden: usize,
    /// Head order. Must be a permutation of the full catalog.
    pub landmarks: Vec<LandmarkId>,
    pub dropout_rate: f64,
    /// Target width in voxels.
    pub sigma: f64,
    pub seed: u64,
    /// Network grid spacing in mm.
    pub spacing: f64,
    pub pad_hu: f64,
    pub decode: DecodeRule,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dims: [128, 128, 152],
            block_channels: vec![8, 16, 32, 64],
            maxout_k: 2,
            dense_hidden: 512,
            landmarks: LandmarkId::ALL.to_vec(),
            dropout_rate: 0.5,
            sigma: 3.0,
            seed: 0,
            spacing: 2.0,
            pad_hu: AIR_HU,
            decode: DecodeRule::Argmax,
        }
    }
}

impl ModelConfig {
    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Full => ModelConfig::default(),
            Profile::Toy => ModelConfig {
                input_dims: [64, 64, 76],
                block_channels: vec![4, 8, 16, 32],
                ..ModelConfig::default()
            },
        }
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec {
            target_spacing: self.spacing,
            target_dims: self.input_dims,
            pad_value_hu: self.pad_hu,
        }
    }

    /// Spatial extent entering the dense stage.
    pub fn feature_spatial(&self) -> [usize; 3] {
        self.input_dims.map(|d| d >> self.block_channels.len())
    }

    pub fn feature_len(&self) -> usize {
        self.feature_spatial().iter().product::<usize>() * self.block_channels.last().copied().unwrap_or(0)
    }

    /// Logits per landmark head: `nx + ny + nz`.
    pub fn head_len(&self) -> usize {
        self.input_dims.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_channels.len() != 4 {
            return Err(Error::Config(format!(
                "model.block_channels needs 4 entries, got {}",
                self.block_channels.len()
            )));
        }
        if self.block_channels.contains(&0) {
            return Err(Error::Config("model.block_channels entries must be >= 1".into()));
        }
        if let Some(d) = self.input_dims.iter().find(|&&d| d < MIN_INPUT_DIM) {
            return Err(Error::Config(format!(
                "model.input_dims {:?}: every axis must be >= {MIN_INPUT_DIM} for four poolings, got {d}",
                self.input_dims
            )));
        }
        if !(2..=255).contains(&self.maxout_k) {
            return Err(Error::Config(format!("model.maxout_k must be in 2..=255, got {}", self.maxout_k)));
        }
        if self.dense_hidden == 0 {
            return Err(Error::Config("model.dense_hidden must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("model.dropout must be in [0, 1), got {}", self.dropout_rate)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("model.sigma must be positive, got {}", self.sigma)));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(Error::Config(format!("grid.spacing must be positive, got {}", self.spacing)));
        }
        let distinct: BTreeSet<_> = self.landmarks.iter().collect();
        if self.landmarks.len() != LandmarkId::COUNT || distinct.len() != LandmarkId::COUNT {
            return Err(Error::Config(
                "model.landmarks must list each of the 12 landmarks exactly once".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Presentations of each sample per epoch (0 is treated as 1).
    pub augment_per_sample: usize,
    pub shuffle_seed: u64,
    /// Final checkpoint; the best epoch goes to `<path>.best`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 1,
            augment_per_sample: 1,
            shuffle_seed: 0,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn presentations(&self) -> usize {
        self.augment_per_sample.max(1)
    }
}

/// Phantom dataset settings used by the CLI.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub n: usize,
    pub jitter: f64,
    /// Fraction of samples assigned to training.
    pub train_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n: 27,
            jitter: 0.1,
            train_fraction: 2.0 / 3.0,
        }
    }
}

/// Everything a CLI run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub optim: AdadeltaConfig,
    pub dataset: DatasetConfig,
}

impl RunConfig {
    pub fn profile(p: Profile) -> Self {
        RunConfig {
            model: ModelConfig::profile(p),
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
            optim: AdadeltaConfig::default(),
            dataset: DatasetConfig::default(),
        }
    }

    /// Sets every root seed at once.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.shuffle_seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.augment.validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(self.optim.rho > 0.0 && self.optim.rho < 1.0) {
            return Err(Error::Config(format!("optim.rho must be in (0, 1), got {}", self.optim.rho)));
        }
        if !(self.optim.epsilon > 0.0) {
            return Err(Error::Config(format!("optim.epsilon must be positive, got {}", self.optim.epsilon)));
        }
        if !(self.dataset.jitter >= 0.0 && self.dataset.jitter < 1.0) {
            return Err(Error::Config(format!("phantom.jitter must be in [0, 1), got {}", self.dataset.jitter)));
        }
        if !(self.dataset.train_fraction > 0.0 && self.dataset.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "phantom.train_fraction must be in (0, 1), got {}",
                self.dataset.train_fraction
            )));
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lineno = i + 1;
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {lineno}: expected `key = value`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {lineno}: duplicate key {key}")));
            }
            self.set(key, value)
                .map_err(|e| Error::Config(format!("line {lineno}: {e}")))?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, base: RunConfig) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = base;
        cfg.apply_text(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        match key {
            "model.input_dims" => m.input_dims = triple(value)?,
            "model.block_channels" => m.block_channels = list(value)?,
            "model.maxout_k" => m.maxout_k = scalar(value)?,
            "model.dense_hidden" => m.dense_hidden = scalar(value)?,
            "model.dropout" => m.dropout_rate = scalar(value)?,
            "model.sigma" => m.sigma = scalar(value)?,
            "model.seed" => m.seed = scalar(value)?,
            "model.landmarks" => {
                m.landmarks = value
                    .split(',')
                    .map(|s| s.trim().parse::<LandmarkId>().map_err(|e| e.to_string()))
                    .collect::<std::result::Result<_, _>>()?
            }
            "model.decode" => {
                m.decode = match value {
                    "argmax" => DecodeRule::Argmax,
                    "expectation" => DecodeRule::Expectation,
                    other => return Err(format!("model.decode: expected argmax or expectation, got {other:?}")),
                }
            }
            "grid.spacing" => m.spacing = scalar(value)?,
            "grid.pad_hu" => m.pad_hu = scalar(value)?,
            "train.epochs" => self.train.epochs = scalar(value)?,
            "train.batch_size" => self.train.batch_size = scalar(value)?,
            "train.augment_per_sample" => self.train.augment_per_sample = scalar(value)?,
            "train.shuffle_seed" => self.train.shuffle_seed = scalar(value)?,
            "train.checkpoint" => self.train.checkpoint = Some(PathBuf::from(value)),
            "aug.enabled" => self.augment.enabled = scalar(value)?,
            "aug.translate_frac" => self.augment.translate_frac = scalar(value)?,
            "aug.rotate_deg" => self.augment.rotate_deg = scalar(value)?,
            "optim.rho" => self.optim.rho = scalar(value)?,
            "optim.epsilon" => self.optim.epsilon = scalar(value)?,
            "phantom.n" => self.dataset.n = scalar(value)?,
            "phantom.jitter" => self.dataset.jitter = scalar(value)?,
            "phantom.train_fraction" => self.dataset.train_fraction = scalar(value)?,
            _ => return Err(format!("unknown key {key}")),
        }
        Ok(())
    }
}

fn scalar<V: FromStr>(s: &str) -> std::result::Result<V, String> {
    s.parse().map_err(|_| format!("cannot parse {s:?}"))
}

fn list(s: &str) -> std::result::Result<Vec<usize>, String> {
    s.split(',').map(|p| scalar(p.trim())).collect()
}

fn triple(s: &str) -> std::result::Result<[usize; 3], String> {
    let v = list(s)?;
    <[usize; 3]>::try_from(v).map_err(|v| format!("expected 3 comma-separated integers, got {}", v.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        for p in [Profile::Toy, Profile::Full] {
            RunConfig::profile(p).validate().unwrap();
        }
        let toy = ModelConfig::profile(Profile::Toy);
        assert_eq!(toy.feature_spatial(), [4, 4, 4]);
        assert_eq!(ModelConfig::default().head_len(), 408);
        assert_eq!(ModelConfig::default().head_len() * 12, 4896);
    }

    #[test]
    fn parses_namespaced_keys() {
        let mut cfg = RunConfig::profile(Profile::Toy);
        cfg.apply_text(
            "# toy run\nmodel.input_dims = 32, 32, 32\nmodel.sigma = 2.5 # narrower\n\
             train.epochs=3\naug.enabled = false\nmodel.decode = expectation\n",
        )
        .unwrap();
        assert_eq!(cfg.model.input_dims, [32, 32, 32]);
        assert_eq!(cfg.model.sigma, 2.5);
        assert_eq!(cfg.train.epochs, 3);
        assert!(!cfg.augment.enabled);
        assert_eq!(cfg.model.decode, DecodeRule::Expectation);
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_unknown_and_bad_values() {
        let mut cfg = RunConfig::profile(Profile::Toy);
        assert!(matches!(cfg.apply_text("model.colour = red"), Err(Error::Config(_))));
        assert!(matches!(cfg.clone().apply_text("model.sigma = x"), Err(Error::Config(_))));
        assert!(cfg.clone().apply_text("a = 1\na = 2").is_err());
        assert!(cfg.clone().apply_text("model.sigma").is_err());

        let mut c = cfg.clone();
        c.train.epochs = 0;
        assert!(c.validate().is_err());
        let mut c = cfg.clone();
        c.model.input_dims = [15, 64, 64];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = cfg.clone();
        c.model.block_channels = vec![4, 8, 16];
        assert!(c.validate().is_err());
        let mut c = cfg;
        c.model.landmarks[1] = LandmarkId::Na;
        assert!(c.validate().is_err());
    }
}
