//! Flat run configuration: preset defaults, then a TOML file, then flags.

use std::path::{Path, PathBuf};

use anyhow::Context;
use hdmba::network::{Ablation, ModelConfig, TailFusion};
use hdmba::ssm::SsmConfig;
use hdmba::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::Usage;

pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// C = 64, I = 4, K = 4, M = 8.
    Default,
    /// C = 8, I = K = 1, M = 4, N = 4.
    Tiny,
    /// B = 305 at the calibrated width.
    Paper,
}

/// Every key a run can set. Written back fully resolved into each run
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlatConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bands: Option<usize>,
    pub channels: usize,
    pub rdm_count: usize,
    pub dml_per_rdm: usize,
    pub window: usize,
    pub state_size: usize,
    pub expansion: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt_rank: Option<usize>,
    pub bidirectional: bool,
    pub dt_min: f64,
    pub dt_max: f64,
    pub mlp_ratio: usize,
    pub use_ssm: bool,
    pub use_dconv: bool,
    pub use_gate: bool,
    pub use_mlp: bool,
    pub tail_fusion: TailFusion,
    pub theta1: f64,
    pub theta2: f64,
    pub lr0: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch: usize,
    pub iterations: u64,
    pub crop_train: usize,
    pub crop_test: usize,
    pub seed: u64,
    pub checkpoint_every: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_grad_norm: Option<f64>,
}

impl FlatConfig {
    pub fn from_parts(model: &ModelConfig, train: &TrainConfig) -> Self {
        Self {
            data: None,
            out: None,
            bands: Some(model.bands),
            channels: model.channels,
            rdm_count: model.rdm_count,
            dml_per_rdm: model.dml_per_rdm,
            window: model.window,
            state_size: model.ssm.state_size,
            expansion: model.ssm.expansion,
            dt_rank: model.ssm.dt_rank,
            bidirectional: model.ssm.bidirectional,
            dt_min: model.ssm.dt_min,
            dt_max: model.ssm.dt_max,
            mlp_ratio: model.mlp_ratio,
            use_ssm: model.ablation.use_ssm,
            use_dconv: model.ablation.use_dconv,
            use_gate: model.ablation.use_gate,
            use_mlp: model.ablation.use_mlp,
            tail_fusion: model.tail_fusion,
            theta1: model.theta1,
            theta2: model.theta2,
            lr0: train.lr0,
            lr_min: train.lr_min,
            beta1: train.beta1,
            beta2: train.beta2,
            eps: train.eps,
            batch: train.batch,
            iterations: train.iterations,
            crop_train: train.crop_train,
            crop_test: train.crop_test,
            seed: train.seed,
            checkpoint_every: train.checkpoint_every,
            clip_grad_norm: train.clip_grad_norm,
        }
    }

    pub fn preset(p: Preset) -> Self {
        let model = match p {
            Preset::Default => ModelConfig::default(),
            Preset::Tiny => ModelConfig::tiny(ModelConfig::default().bands),
            Preset::Paper => ModelConfig::paper(),
        };
        let mut flat = Self::from_parts(&model, &TrainConfig::default());
        if p != Preset::Paper {
            // Band count comes from the data unless set explicitly.
            flat.bands = None;
        }
        flat
    }

    /// Model configuration; `bands` falls back to `data_bands`.
    pub fn model(&self, data_bands: Option<usize>) -> anyhow::Result<ModelConfig> {
        let bands = match (self.bands, data_bands) {
            (Some(b), Some(d)) if b != d => return Err(Usage::new(format!("config sets {b} bands but the data has {d}")).into()),
            (Some(b), _) | (None, Some(b)) => b,
            (None, None) => return Err(Usage::new("band count unknown: set `bands` or point at data").into()),
        };
        let cfg = ModelConfig {
            bands,
            channels: self.channels,
            rdm_count: self.rdm_count,
            dml_per_rdm: self.dml_per_rdm,
            window: self.window,
            ssm: SsmConfig {
                state_size: self.state_size,
                expansion: self.expansion,
                dt_rank: self.dt_rank,
                bidirectional: self.bidirectional,
                dt_min: self.dt_min,
                dt_max: self.dt_max,
            },
            mlp_ratio: self.mlp_ratio,
            ablation: Ablation {
                use_ssm: self.use_ssm,
                use_dconv: self.use_dconv,
                use_gate: self.use_gate,
                use_mlp: self.use_mlp,
            },
            tail_fusion: self.tail_fusion,
            theta1: self.theta1,
            theta2: self.theta2,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> anyhow::Result<TrainConfig> {
        let cfg = TrainConfig {
            lr0: self.lr0,
            lr_min: self.lr_min,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            batch: self.batch,
            iterations: self.iterations,
            crop_train: self.crop_train,
            crop_test: self.crop_test,
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
            clip_grad_norm: self.clip_grad_norm,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `base` overlaid with `file` (if any) and then `overrides`.
    pub fn resolve(base: &FlatConfig, file: Option<&Path>, overrides: toml::Table) -> anyhow::Result<FlatConfig> {
        let mut table = toml::Table::try_from(base).context("serializing defaults")?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Usage::new(format!("{}: {e}", path.display())))?;
            let parsed: toml::Table = text.parse().map_err(|e| Usage::new(format!("{}: {e}", path.display())))?;
            table.extend(parsed);
        }
        table.extend(overrides);
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Usage::new(format!("configuration: {e}")).into())
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<PathBuf> {
        let path = dir.join(CONFIG_FILE);
        std::fs::write(&path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
