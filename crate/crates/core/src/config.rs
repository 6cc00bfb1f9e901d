//! Model, training and data configuration with the full-scale and
//! desk-scale presets. Loadable from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::GenConfig;
use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, Reduction};
use crate::regressor::{regressor_config_default, HmrConfig};
use crate::temporal_encoder::{GruConfig, TransformerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Transformer,
    Gru,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegressorKind {
    Transformer,
    Hmr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Output channels of the backbone's strided convolutions.
    pub backbone_channels: Vec<usize>,
    /// Backbone output width before the per-stream reduction.
    pub backbone_dim: usize,
    /// Width of the per-frame features and of the temporal encoder.
    pub feature_dim: usize,
    pub encoder: EncoderKind,
    pub regressor: RegressorKind,
    /// Add the flow stream's features to the encoded RGB features.
    pub flow_feature: bool,
    pub transformer: TransformerConfig,
    pub gru: GruConfig,
    pub regressor_transformer: TransformerConfig,
    pub hmr: HmrConfig,
    pub discriminator: DiscriminatorConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub steps_phase1: u64,
    pub steps_phase2: u64,
    pub lr_gen: f64,
    pub lr_disc: f64,
    pub lr_refine: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weights: LossWeights,
    pub flow_loss: bool,
    pub flow_weight: f64,
    pub reduction: Reduction,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Phase-1 steps for each ablation variant.
    pub ablation_steps_phase1: u64,
    pub ablation_steps_phase2: u64,
    /// Print a progress line every this many steps; 0 is silent.
    pub log_every: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub seed: u64,
    pub train_sequences: usize,
    pub eval_sequences: usize,
    pub pool_sequences: usize,
    pub gen: GenConfig,
}

impl DataConfig {
    pub fn train_seeds(&self) -> Vec<u64> {
        (0..self.train_sequences as u64).map(|i| self.seed.wrapping_mul(1_000_003).wrapping_add(i)).collect()
    }

    pub fn eval_seeds(&self) -> Vec<u64> {
        (0..self.eval_sequences as u64).map(|i| self.seed.wrapping_mul(1_000_003).wrapping_add(100_000 + i)).collect()
    }

    pub fn pool_seeds(&self) -> Vec<u64> {
        (0..self.pool_sequences as u64).map(|i| self.seed.wrapping_mul(1_000_003).wrapping_add(200_000 + i)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Full,
    Desk,
}

impl Config {
    /// Widths and rates as published; far too slow for a CPU.
    pub fn full() -> Self {
        Self {
            model: ModelConfig {
                backbone_channels: vec![32, 64, 128, 256],
                backbone_dim: 2048,
                feature_dim: 512,
                encoder: EncoderKind::Transformer,
                regressor: RegressorKind::Transformer,
                flow_feature: true,
                transformer: TransformerConfig::default(),
                gru: GruConfig::default(),
                regressor_transformer: regressor_config_default(),
                hmr: HmrConfig::default(),
                discriminator: DiscriminatorConfig::default(),
            },
            train: TrainConfig {
                seed: 0,
                batch_size: 8,
                steps_phase1: 2000,
                steps_phase2: 500,
                lr_gen: 5e-5,
                lr_disc: 5e-4,
                lr_refine: 1e-5,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weights: LossWeights::default(),
                flow_loss: true,
                flow_weight: 1.0,
                reduction: Reduction::Mean,
                clip_norm: 1.0,
                ablation_steps_phase1: 2000,
                ablation_steps_phase2: 500,
                log_every: 0,
            },
            data: DataConfig {
                seed: 0,
                train_sequences: 8,
                eval_sequences: 8,
                pool_sequences: 64,
                gen: GenConfig::default(),
            },
        }
    }

    /// Narrow networks and larger learning rates so training runs in
    /// minutes on one core.
    pub fn desk() -> Self {
        let mut c = Self::full();
        let tr = TransformerConfig {
            layers: 2,
            heads: 8,
            d_model: 64,
            ff_dim: 128,
            dropout: 0.0,
            max_len: 128,
        };
        c.model.backbone_channels = vec![8, 16, 32];
        c.model.backbone_dim = 128;
        c.model.feature_dim = 64;
        c.model.transformer = tr.clone();
        c.model.gru = GruConfig { layers: 2, hidden: 64 };
        c.model.regressor_transformer = TransformerConfig { layers: 3, heads: 4, ..tr };
        c.model.hmr = HmrConfig { hidden: 128, iterations: 3, dropout: 0.0 };
        c.model.discriminator = DiscriminatorConfig { layers: 2, hidden: 32, attention_dim: 32 };
        c.train.batch_size = 2;
        c.train.lr_gen = 1e-3;
        // with a handful of training clips a faster critic learns their identities
        c.train.lr_disc = 1e-5;
        c.train.lr_refine = 2e-4;
        // same units as the 2D keypoint term
        c.train.flow_weight = 200.0;
        c.train.ablation_steps_phase1 = 500;
        c.train.ablation_steps_phase2 = 125;
        c
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Full => Self::full(),
            Preset::Desk => Self::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        for (name, lr) in [("lr_gen", t.lr_gen), ("lr_disc", t.lr_disc), ("lr_refine", t.lr_refine)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.data.gen.seq_len < 2 {
            return Err(Error::Config(format!("sequence length must be at least 2, got {}", self.data.gen.seq_len)));
        }
        if t.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(t.flow_weight.is_finite() && t.flow_weight >= 0.0) {
            return Err(Error::Config(format!("flow_weight must be nonnegative, got {}", t.flow_weight)));
        }
        t.weights.validate()?;
        let m = &self.model;
        if m.transformer.d_model != m.feature_dim {
            return Err(Error::Config(format!(
                "encoder width {} differs from feature_dim {}",
                m.transformer.d_model, m.feature_dim
            )));
        }
        m.transformer.validate()?;
        m.regressor_transformer.validate()?;
        if self.data.gen.seq_len > m.transformer.max_len.min(m.regressor_transformer.max_len) {
            return Err(Error::LengthOverflow {
                got: self.data.gen.seq_len,
                max: m.transformer.max_len.min(m.regressor_transformer.max_len),
            });
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Hex SHA-256 of the model section; checkpoints are only compatible
    /// with configs that share it.
    pub fn model_hash(&self) -> String {
        hash_of(&self.model)
    }

    /// Hash of everything that must agree between ablation variants: the
    /// data, seed, batch size, step counts, rates and loss weights.
    pub fn schedule_hash(&self) -> String {
        let t = &self.train;
        let key = (
            &self.data,
            t.seed,
            t.batch_size,
            t.ablation_steps_phase1,
            t.ablation_steps_phase2,
            [t.lr_gen, t.lr_disc, t.lr_refine, t.beta1, t.beta2, t.eps, t.flow_weight, t.clip_norm],
            &t.weights,
            t.reduction,
        );
        hash_of(&key)
    }
}

fn hash_of<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serialises");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        Config::full().validate().unwrap();
        Config::desk().validate().unwrap();
        let p = Config::full();
        assert_eq!((p.train.lr_gen, p.train.lr_disc, p.train.lr_refine), (5e-5, 5e-4, 1e-5));
        assert_eq!(p.data.gen.seq_len, 16);
        assert_eq!((p.model.regressor_transformer.layers, p.model.regressor_transformer.heads), (3, 4));
    }

    #[test]
    fn toml_round_trip() {
        let c = Config::desk();
        let text = c.to_toml();
        assert_eq!(Config::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut c = Config::desk();
        c.train.lr_gen = 0.0;
        assert!(c.validate().is_err());
        let mut c = Config::desk();
        c.data.gen.seq_len = 1;
        assert!(c.validate().is_err());
        let mut c = Config::desk();
        c.model.feature_dim = 32;
        assert!(c.validate().is_err());
        assert!(Config::from_toml("model = 3").is_err());
    }

    #[test]
    fn hashes_track_the_right_fields() {
        let a = Config::desk();
        let mut b = a.clone();
        b.model.encoder = EncoderKind::Gru;
        b.train.flow_loss = false;
        b.train.steps_phase1 = 7;
        assert_ne!(a.model_hash(), b.model_hash());
        assert_eq!(a.schedule_hash(), b.schedule_hash());
        b.train.seed = 9;
        assert_ne!(a.schedule_hash(), b.schedule_hash());
        assert_eq!(a.model_hash().len(), 64);
    }

    #[test]
    fn split_seeds_are_disjoint() {
        let d = Config::desk().data;
        let (a, b, c) = (d.train_seeds(), d.eval_seeds(), d.pool_seeds());
        assert!(a.iter().all(|s| !b.contains(s) && !c.contains(s)));
        assert!(b.iter().all(|s| !c.contains(s)));
    }
}
