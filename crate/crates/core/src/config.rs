//! Pipeline configuration and the hash that ties artifacts together.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::persist;

/// Architecture and loss constants. Every artifact records the hash of this
/// section; changing any field invalidates downstream artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Dimension of the gesture VAE latent code.
    pub latent_dim: usize,
    pub vae_hidden: usize,
    /// Dimension of the shared text/gesture space.
    pub feature_dim: usize,
    pub gesture_hidden: usize,
    /// Token slots of the text encoder.
    pub max_tokens: usize,
    pub embed_dim: usize,
    pub text_hidden: usize,
    pub clusters: usize,
    pub margin: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Raw attention assigned to padding slots before normalization.
    pub padding_floor: f64,
    pub min_keyposes: usize,
    pub max_keyposes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            vae_hidden: 64,
            feature_dim: 32,
            gesture_hidden: 64,
            max_tokens: 32,
            embed_dim: 768,
            text_hidden: 64,
            clusters: 40,
            margin: 20.0,
            alpha: 10.0,
            beta: 2.0,
            padding_floor: 1e-4,
            min_keyposes: 5,
            max_keyposes: 12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub vae_epochs: usize,
    pub vae_lr: f64,
    pub attention_epochs: usize,
    pub attention_lr: f64,
    pub contrastive_epochs: usize,
    pub contrastive_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            vae_epochs: 120,
            vae_lr: 3e-3,
            attention_epochs: 30,
            attention_lr: 1e-3,
            contrastive_epochs: 60,
            contrastive_lr: 1e-3,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub k_neighbors: usize,
    pub segment_words: usize,
    pub blend_window_s: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k_neighbors: 8,
            segment_words: 8,
            blend_window_s: 0.25,
        }
    }
}

/// The separate VAE whose latent means serve as FGD features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FgdConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    /// Key-pose sequences are padded to this length by repeating the last pose.
    pub pad_keyposes: usize,
    pub epochs: usize,
}

impl Default for FgdConfig {
    fn default() -> Self {
        Self {
            latent_dim: 256,
            hidden: 64,
            pad_keyposes: 12,
            epochs: 60,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub vae: Option<PathBuf>,
    /// VAE used as the FGD feature model.
    pub fgd: Option<PathBuf>,
    pub clusters: Option<PathBuf>,
    pub attention: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub library: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub retrieval: RetrievalConfig,
    pub fgd: FgdConfig,
    pub paths: PathsConfig,
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = persist::read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        persist::write_json(path, self)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let positive = [
            ("latent_dim", m.latent_dim),
            ("vae_hidden", m.vae_hidden),
            ("feature_dim", m.feature_dim),
            ("gesture_hidden", m.gesture_hidden),
            ("max_tokens", m.max_tokens),
            ("embed_dim", m.embed_dim),
            ("text_hidden", m.text_hidden),
            ("clusters", m.clusters),
            ("batch_size", self.training.batch_size),
            ("k_neighbors", self.retrieval.k_neighbors),
            ("segment_words", self.retrieval.segment_words),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("config: {name} must be positive")));
        }
        if m.min_keyposes < 2 || m.max_keyposes < m.min_keyposes {
            return Err(Error::invalid("config: bad key-pose range"));
        }
        if !(m.margin > 0.0 && m.padding_floor > 0.0 && m.padding_floor < 1.0) {
            return Err(Error::invalid("config: margin and padding_floor out of range"));
        }
        if self.retrieval.segment_words > m.max_tokens {
            return Err(Error::invalid("config: segment_words exceeds max_tokens"));
        }
        Ok(())
    }

    pub fn config_hash(&self) -> String {
        self.model.config_hash()
    }
}

impl ModelConfig {
    /// First 16 hex digits of the SHA-256 of the canonical JSON encoding.
    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(persist::to_json(self).as_bytes());
        hex::encode(&digest[..8])
    }
}

/// Fails unless `found` equals `expected`.
pub fn ensure_hash(expected: &str, found: &str) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::ConfigMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        })
    }
}
