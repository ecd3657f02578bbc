//! Training stages wired together over a loaded dataset. Each stage takes
//! the artifacts of the previous ones and checks their config hash.

use crate::clustering::{kmeans, ClusterModel};
use crate::config::{ensure_hash, PipelineConfig};
use crate::contrastive::{
    train_act2g, Act2gCheckpoint, Act2gTrainOptions, EpochReport, GestureEncoderConfig, LossWeights, PairedSample,
};
use crate::error::{Error, Result};
use crate::gesture_vae::{train_vae, EpochLoss, GestureVae, VaeConfig, VaeTrainOptions};
use crate::ingest::Sample;
use crate::metrics::FgdFeatureModel;
use crate::motion::{extract_keyposes, KeyPoseSequence};
use crate::retrieval::{build_library, GestureLibrary, LibrarySource};
use crate::text_encoder::{AttentionTrainOptions, EmbeddingProvider, LabeledText, TextEncoder, TextEncoderConfig};

pub fn keyposes(cfg: &PipelineConfig, samples: &[&Sample]) -> Result<Vec<KeyPoseSequence>> {
    samples
        .iter()
        .map(|s| extract_keyposes(&s.clip, cfg.model.min_keyposes, cfg.model.max_keyposes))
        .collect()
}

fn non_empty(samples: &[&Sample], stage: &str) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::invalid(format!("{stage}: no training samples")));
    }
    Ok(())
}

pub fn vae_config(cfg: &PipelineConfig) -> VaeConfig {
    VaeConfig {
        latent_dim: cfg.model.latent_dim,
        hidden: cfg.model.vae_hidden,
        pad_to: None,
    }
}

pub fn train_vae_stage(cfg: &PipelineConfig, samples: &[&Sample]) -> Result<(GestureVae, Vec<EpochLoss>)> {
    non_empty(samples, "train-vae")?;
    let kp = keyposes(cfg, samples)?;
    let opts = VaeTrainOptions {
        epochs: cfg.training.vae_epochs,
        batch_size: cfg.training.batch_size,
        lr: cfg.training.vae_lr,
        seed: cfg.training.seed,
    };
    train_vae(&kp, vae_config(cfg), &opts)
}

/// Separate VAE whose latent means are the FGD features.
pub fn train_fgd_stage(cfg: &PipelineConfig, samples: &[&Sample]) -> Result<(FgdFeatureModel, Vec<EpochLoss>)> {
    non_empty(samples, "train-fgd")?;
    let kp = keyposes(cfg, samples)?;
    let vc = VaeConfig {
        latent_dim: cfg.fgd.latent_dim,
        hidden: cfg.fgd.hidden,
        pad_to: Some(cfg.fgd.pad_keyposes),
    };
    let opts = VaeTrainOptions {
        epochs: cfg.fgd.epochs,
        batch_size: cfg.training.batch_size,
        lr: cfg.training.vae_lr,
        seed: cfg.training.seed,
    };
    let (vae, trace) = train_vae(&kp, vc, &opts)?;
    Ok((
        FgdFeatureModel {
            vae,
            min_keyposes: cfg.model.min_keyposes,
            max_keyposes: cfg.model.max_keyposes,
        },
        trace,
    ))
}

/// `(clip id, μ)` for every sample.
pub fn latent_means(cfg: &PipelineConfig, vae: &GestureVae, samples: &[&Sample]) -> Result<Vec<(String, Vec<f64>)>> {
    let kp = keyposes(cfg, samples)?;
    samples
        .iter()
        .zip(&kp)
        .map(|(s, k)| Ok((s.id().to_string(), vae.encode(k)?.mu)))
        .collect()
}

pub fn cluster_stage(
    cfg: &PipelineConfig,
    vae: &GestureVae,
    vae_hash: &str,
    samples: &[&Sample],
) -> Result<ClusterModel> {
    let hash = cfg.config_hash();
    ensure_hash(&hash, vae_hash)?;
    non_empty(samples, "cluster")?;
    let latents = latent_means(cfg, vae, samples)?;
    kmeans(&latents, cfg.model.clusters, cfg.training.seed, &hash)
}

fn words_and_labels(cfg: &PipelineConfig, s: &Sample) -> (Vec<String>, Vec<f64>) {
    let t = cfg.model.max_tokens;
    let mut words = s.annotation.words();
    let mut labels = s.annotation.labels_f64();
    words.truncate(t);
    labels.truncate(t);
    (words, labels)
}

pub fn labeled_texts(cfg: &PipelineConfig, samples: &[&Sample], provider: &dyn EmbeddingProvider) -> Result<Vec<LabeledText>> {
    check_dim(cfg, provider)?;
    Ok(samples
        .iter()
        .map(|s| {
            let (words, labels) = words_and_labels(cfg, s);
            LabeledText {
                words: provider.embed_words(&words),
                labels,
            }
        })
        .collect())
}

fn check_dim(cfg: &PipelineConfig, provider: &dyn EmbeddingProvider) -> Result<()> {
    if provider.dim() != cfg.model.embed_dim {
        return Err(Error::invalid(format!(
            "embeddings have dimension {}, config expects {}",
            provider.dim(),
            cfg.model.embed_dim
        )));
    }
    Ok(())
}

pub fn pretrain_stage(
    cfg: &PipelineConfig,
    samples: &[&Sample],
    provider: &dyn EmbeddingProvider,
) -> Result<(TextEncoder, Vec<f64>)> {
    non_empty(samples, "pretrain-attention")?;
    let data = labeled_texts(cfg, samples, provider)?;
    let mut enc = TextEncoder::new(TextEncoderConfig::from(&cfg.model), cfg.training.seed)?;
    let opts = AttentionTrainOptions {
        epochs: cfg.training.attention_epochs,
        batch_size: cfg.training.batch_size,
        lr: cfg.training.attention_lr,
        seed: cfg.training.seed,
    };
    let trace = enc.pretrain_attention(&data, &opts)?;
    Ok((enc, trace))
}

pub fn paired_samples(
    cfg: &PipelineConfig,
    samples: &[&Sample],
    provider: &dyn EmbeddingProvider,
    clusters: &ClusterModel,
) -> Result<Vec<PairedSample>> {
    check_dim(cfg, provider)?;
    let kp = keyposes(cfg, samples)?;
    samples
        .iter()
        .zip(kp)
        .map(|(s, k)| {
            let (words, labels) = words_and_labels(cfg, s);
            Ok(PairedSample {
                id: s.id().to_string(),
                words: provider.embed_words(&words),
                labels,
                keyposes: k.poses,
                cluster: clusters.cluster_of(s.id())?,
            })
        })
        .collect()
}

pub fn train_stage(
    cfg: &PipelineConfig,
    text: TextEncoder,
    text_hash: &str,
    clusters: &ClusterModel,
    samples: &[&Sample],
    provider: &dyn EmbeddingProvider,
) -> Result<(Act2gCheckpoint, Vec<EpochReport>)> {
    let hash = cfg.config_hash();
    ensure_hash(&hash, text_hash)?;
    ensure_hash(&hash, &clusters.config_hash)?;
    non_empty(samples, "train")?;
    let data = paired_samples(cfg, samples, provider, clusters)?;
    let opts = Act2gTrainOptions {
        epochs: cfg.training.contrastive_epochs,
        batch_size: cfg.training.batch_size.min(data.len()),
        lr: cfg.training.contrastive_lr,
        seed: cfg.training.seed,
        weights: LossWeights::from(&cfg.model),
    };
    let (text, gesture, trace) = train_act2g(&data, text, GestureEncoderConfig::from(&cfg.model), &opts)?;
    Ok((Act2gCheckpoint::new(&cfg.model, &text, &gesture), trace))
}

pub fn library_stage(
    cfg: &PipelineConfig,
    checkpoint: &Act2gCheckpoint,
    clusters: Option<&ClusterModel>,
    samples: &[&Sample],
) -> Result<GestureLibrary> {
    ensure_hash(&cfg.config_hash(), &checkpoint.config_hash)?;
    let (_, gesture) = checkpoint.encoders()?;
    let sources: Vec<LibrarySource> = samples
        .iter()
        .map(|s| LibrarySource {
            clip: &s.clip,
            cluster: clusters.and_then(|c| c.assignments.get(s.id()).copied()),
        })
        .collect();
    build_library(&sources, &gesture, &cfg.model, &checkpoint.config_hash)
}
