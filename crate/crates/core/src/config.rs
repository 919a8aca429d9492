//! Run configuration: every tunable, with strict JSON parsing and exhaustive
//! validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GraphParams, DEFAULT_IMAGE_CAP};
use crate::harmonics::MAX_DEGREE;
use crate::optim::AdamWConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    pub cutoff: f64,
    pub max_neighbors: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            cutoff: 8.0,
            max_neighbors: 25,
        }
    }
}

impl GraphConfig {
    pub fn params(&self) -> GraphParams {
        GraphParams {
            cutoff: self.cutoff,
            max_neighbors: self.max_neighbors,
            image_cap: DEFAULT_IMAGE_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    /// Distance basis size; centres span `[0, cutoff]`.
    pub distance_rbf: usize,
    /// Angle basis size; centres span `[−1, 1]` in `cos θ`.
    pub angle_rbf: usize,
    /// Optional external atom table; one-hot over Z = 1..100 when absent.
    pub atom_table: Option<PathBuf>,
    pub atom_dim: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            distance_rbf: 64,
            angle_rbf: 64,
            atom_table: None,
            atom_dim: 92,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Moe,
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub width: usize,
    pub node_layers: usize,
    pub so3_node_layers: usize,
    pub l_max: usize,
    pub head: HeadKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 64,
            node_layers: 3,
            so3_node_layers: 1,
            l_max: 2,
            head: HeadKind::Moe,
        }
    }
}

impl ModelConfig {
    /// Channels per degree in the tensor-product layers.
    pub fn so3_channels(&self) -> usize {
        (self.width / 4).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub sigma: f64,
    pub tau: f64,
    /// Weights of the contrastive, SE3-denoising, and SO3-denoising terms.
    pub lambda: [f64; 3],
    pub lr: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            sigma: 0.15,
            tau: 0.1,
            lambda: [1.0, 0.5, 0.5],
            lr: 1e-5,
            lr_min: 1e-7,
            warmup_steps: 10,
            batch_size: 128,
            epochs: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping; `None` trains
    /// for the full epoch count.
    pub patience: Option<usize>,
    pub split: [f64; 3],
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            lr_min: 1e-6,
            warmup_steps: 10,
            batch_size: 16,
            epochs: 500,
            patience: Some(50),
            split: [0.8, 0.1, 0.1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(format!("precision must be f32 or f64, got `{other}`")),
        }
    }
}

/// File locations; each has a command-line flag that takes precedence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Checkpoint to start from.
    pub from: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub task: String,
    /// Random structures drawn by the self-check.
    pub trials: usize,
    pub io: IoConfig,
    pub graph: GraphConfig,
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub optimizer: AdamWConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F64,
            task: "property".into(),
            trials: 20,
            io: IoConfig::default(),
            graph: GraphConfig::default(),
            features: FeatureConfig::default(),
            model: ModelConfig::default(),
            optimizer: AdamWConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
        Self::from_json(&text)
    }

    /// Every violated constraint, not just the first.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut positive = |name: &str, v: f64| {
            if !(v > 0.0 && v.is_finite()) {
                errs.push(format!("{name} must be positive and finite, got {v}"));
            }
        };
        positive("graph.cutoff", self.graph.cutoff);
        positive("pretrain.sigma", self.pretrain.sigma);
        positive("pretrain.tau", self.pretrain.tau);
        positive("pretrain.lr", self.pretrain.lr);
        positive("finetune.lr", self.finetune.lr);
        positive("optimizer.eps", self.optimizer.eps);
        let mut nonzero = |name: &str, v: usize| {
            if v == 0 {
                errs.push(format!("{name} must be at least 1"));
            }
        };
        nonzero("graph.max_neighbors", self.graph.max_neighbors);
        nonzero("model.width", self.model.width);
        nonzero("pretrain.batch_size", self.pretrain.batch_size);
        nonzero("pretrain.epochs", self.pretrain.epochs);
        nonzero("finetune.batch_size", self.finetune.batch_size);
        nonzero("finetune.epochs", self.finetune.epochs);
        nonzero("features.atom_dim", self.features.atom_dim);
        nonzero("trials", self.trials);
        if let Some(0) = self.finetune.patience {
            errs.push("finetune.patience must be at least 1 when set".into());
        }
        if self.features.distance_rbf < 2 {
            errs.push("features.distance_rbf must be at least 2".into());
        }
        if self.features.angle_rbf < 2 {
            errs.push("features.angle_rbf must be at least 2".into());
        }
        if self.model.l_max > MAX_DEGREE {
            errs.push(format!(
                "model.l_max must be in 0..={MAX_DEGREE}, got {}",
                self.model.l_max
            ));
        }
        if !self.model.width.is_multiple_of(4) {
            errs.push(format!(
                "model.width must be a multiple of 4, got {}",
                self.model.width
            ));
        }
        for (name, lr, lr_min) in [
            ("pretrain", self.pretrain.lr, self.pretrain.lr_min),
            ("finetune", self.finetune.lr, self.finetune.lr_min),
        ] {
            if !(lr_min >= 0.0 && lr_min <= lr) {
                errs.push(format!("{name}.lr_min must lie in [0, lr], got {lr_min}"));
            }
        }
        if self
            .pretrain
            .lambda
            .iter()
            .any(|l| !(*l >= 0.0 && l.is_finite()))
        {
            errs.push(format!(
                "pretrain.lambda entries must be non-negative, got {:?}",
                self.pretrain.lambda
            ));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            errs.push(format!(
                "optimizer betas must lie in [0, 1), got ({}, {})",
                o.beta1, o.beta2
            ));
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            errs.push(format!(
                "optimizer.weight_decay must be non-negative, got {}",
                o.weight_decay
            ));
        }
        let s = self.finetune.split;
        if s.iter().any(|r| !(*r >= 0.0)) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            errs.push(format!(
                "finetune.split must be non-negative and sum to 1, got {s:?}"
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
        assert_eq!(cfg.pretrain.lambda, [1.0, 0.5, 0.5]);
        assert_eq!(cfg.pretrain.sigma, 0.15);
        assert_eq!(cfg.finetune.batch_size, 16);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = RunConfig::from_json(r#"{"model": {"width": 16}, "seed": 4}"#).unwrap();
        assert_eq!(cfg.model.width, 16);
        assert_eq!(cfg.model.l_max, 2);
        assert_eq!(cfg.seed, 4);
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = RunConfig::from_json(r#"{"model": {"widht": 16}}"#).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("widht"));
    }

    #[test]
    fn all_violations_listed() {
        let e = RunConfig::from_json(r#"{"graph": {"cutoff": -1}, "model": {"l_max": 5, "width": 6}, "pretrain": {"tau": 0}}"#)
            .unwrap_err();
        match e {
            Error::Config(list) => assert_eq!(list.len(), 4, "{list:?}"),
            other => panic!("{other}"),
        }
    }
}
