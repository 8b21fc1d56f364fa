//! The run configuration document (TOML) shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baseline::LogRegOptions;
use crate::crossval::CvSetup;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::synth::SynthConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub folds: usize,
    pub target_group: usize,
    /// Outcome balanced across folds; the rarest in the target group when
    /// unset.
    pub strat_outcome: Option<String>,
    pub fold_seed: u64,
    pub baseline_l2: f64,
    pub baseline_max_iter: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let cv = CvSetup::default();
        let lr = LogRegOptions::default();
        Self {
            folds: cv.folds,
            target_group: cv.target_group,
            strat_outcome: cv.strat_outcome,
            fold_seed: cv.fold_seed,
            baseline_l2: lr.l2,
            baseline_max_iter: lr.max_iter,
        }
    }
}

impl DataConfig {
    pub fn cv(&self) -> CvSetup {
        CvSetup {
            folds: self.folds,
            target_group: self.target_group,
            strat_outcome: self.strat_outcome.clone(),
            fold_seed: self.fold_seed,
        }
    }

    pub fn baseline(&self) -> LogRegOptions {
        LogRegOptions {
            l2: self.baseline_l2,
            max_iter: self.baseline_max_iter,
            ..LogRegOptions::default()
        }
    }
}

/// Column and group counts of a loaded dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DataShape {
    pub features: usize,
    pub groups: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss_weights: LossWeights,
    pub data: DataConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    /// Parses and validates a document. Missing `model.features` and
    /// `model.groups` are taken from `shape` when one is given; explicit
    /// values must agree with it.
    pub fn from_toml(text: &str, shape: Option<DataShape>) -> Result<Self> {
        let value: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let explicit = |key: &str| value.get("model").and_then(|m| m.get(key)).is_some();
        let (features_set, groups_set) = (explicit("features"), explicit("groups"));
        let mut cfg: RunConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Some(shape) = shape {
            for (set, field, actual, what) in [
                (features_set, &mut cfg.model.features, shape.features, "feature columns"),
                (groups_set, &mut cfg.model.groups, shape.groups, "groups"),
            ] {
                if !set {
                    *field = actual;
                } else if *field != actual {
                    return Err(Error::Config(format!(
                        "model config expects {field} {what} but the data has {actual}"
                    )));
                }
            }
        }
        cfg.train.loss_weights = cfg.loss_weights.clone();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, shape: Option<DataShape>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text, shape)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss_weights.validate()?;
        self.synth.validate()?;
        if self.data.folds < 2 {
            return Err(Error::Config("data: folds must be at least 2".into()));
        }
        if !(self.data.baseline_l2 >= 0.0 && self.data.baseline_l2.is_finite()) {
            return Err(Error::Config("data: baseline_l2 must be finite and ≥ 0".into()));
        }
        Ok(())
    }

    /// Effective configuration with every default written out.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
