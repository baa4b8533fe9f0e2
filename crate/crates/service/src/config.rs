//! Study and pipeline configuration, loaded from a JSON file.

use std::path::{Path, PathBuf};

use majorness_core::models::{ArchConfig, TrainConfig};
use majorness_core::reliability::FilterPolicy;
use majorness_core::scale::WalkOrder;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub raters_per_pair: usize,
    pub ratings_per_item: usize,
    pub anchor_count: usize,
    pub excerpt_seconds: f64,
    pub data_dir: Option<PathBuf>,
    /// Studies with at most this many ranking items compare every pair.
    pub full_pair_limit: usize,
    /// Number of pairs sampled (as a connected set) above `full_pair_limit`.
    pub pair_sample_size: usize,
    pub task_expiry_seconds: i64,
    pub walk_order: WalkOrder,
    pub seed: u64,
    pub simulation: SimulationConfig,
    pub reliability: FilterPolicy,
    pub training: TrainingConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            raters_per_pair: 5,
            ratings_per_item: 5,
            anchor_count: 10,
            excerpt_seconds: 15.0,
            data_dir: None,
            full_pair_limit: 200,
            pair_sample_size: 5000,
            task_expiry_seconds: 30 * 60,
            walk_order: WalkOrder::FromMostMajor,
            seed: 0,
            simulation: SimulationConfig::default(),
            reliability: FilterPolicy::default(),
            training: TrainingConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub items: usize,
    /// Leading items that also enter the pairwise study.
    pub ranking_items: usize,
    pub raters: usize,
    pub noise_sigma: f64,
    pub bias_sigma: f64,
    pub mode_major: usize,
    pub mode_minor: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self { items: 200, ranking_items: 100, raters: 40, noise_sigma: 0.1, bias_sigma: 0.05, mode_major: 48, mode_minor: 48 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub holdout_fraction: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self { arch: ArchConfig::default(), train: TrainConfig::default(), holdout_fraction: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub folds: usize,
    pub clip_seconds: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { folds: 10, clip_seconds: 12.0 }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

impl StudyConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let config: Self = serde_json::from_str(&text).map_err(|source| ConfigError::Parse { path: path.into(), source })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let counts = [
            ("raters_per_pair", self.raters_per_pair),
            ("ratings_per_item", self.ratings_per_item),
            ("anchor_count", self.anchor_count),
            ("pair_sample_size", self.pair_sample_size),
            ("evaluation.folds", self.evaluation.folds),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(ConfigError::Invalid(format!("{name} must be at least 1")));
        }
        if !(self.excerpt_seconds > 0.0 && self.excerpt_seconds.is_finite()) {
            return Err(ConfigError::Invalid("excerpt_seconds must be positive".into()));
        }
        if self.task_expiry_seconds <= 0 {
            return Err(ConfigError::Invalid("task_expiry_seconds must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.training.holdout_fraction) {
            return Err(ConfigError::Invalid("training.holdout_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}
