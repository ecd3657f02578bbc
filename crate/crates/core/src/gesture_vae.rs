//! Variational autoencoder over key-pose sequences.
//!
//! A bidirectional LSTM reads the key poses; linear heads give the mean and
//! log standard deviation of a diagonal Gaussian posterior; an LSTM decoder
//! conditioned on the latent code at every step reconstructs the poses.
//! Training minimizes the negative evidence lower bound with a unit-variance
//! Gaussian observation model, measured on poses standardized by the training
//! set's mean pose and pooled spread.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{BiLstm, Linear, SequenceDecoder};
use crate::motion::{KeyPoseSequence, Pose, MAX_KEYPOSES, MIN_KEYPOSES, POSE_DIM};
use crate::ndcore::{AdamConfig, Var};
use crate::persist::{self, ParamsDoc};
use crate::{Adam, ParamSet, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    /// When set, sequences are padded to this many poses before encoding and
    /// the decoder always emits this many.
    pub pad_to: Option<usize>,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            hidden: 64,
            pad_to: None,
        }
    }
}

/// Diagonal Gaussian posterior and one latent sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub z: Vec<f64>,
}

/// Negative ELBO split into its two terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    /// `½ Σ (p′ − p)²`, the unit-variance Gaussian negative log-likelihood
    /// without its constant.
    pub reconstruction: f64,
    /// `KL(q(z|p) ‖ N(0, I))`.
    pub kl: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub reconstruction: f64,
    pub kl: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeTrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for VaeTrainOptions {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// Affine pose standardization: `(p − mean) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseNorm {
    pub mean: Vec<f64>,
    pub scale: f64,
}

impl Default for PoseNorm {
    fn default() -> Self {
        Self {
            mean: vec![0.0; POSE_DIM],
            scale: 1.0,
        }
    }
}

impl PoseNorm {
    /// Per-coordinate mean and the root mean square deviation over all
    /// coordinates of all poses.
    pub fn fit(sequences: &[Vec<Pose>]) -> Result<Self> {
        let poses: Vec<[f64; POSE_DIM]> = sequences.iter().flatten().map(|p| p.flat()).collect();
        if poses.is_empty() {
            return Err(Error::invalid("cannot fit a pose normalization to no poses"));
        }
        let n = poses.len() as f64;
        let mut mean = vec![0.0; POSE_DIM];
        for p in &poses {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v / n;
            }
        }
        let ss: f64 = poses
            .iter()
            .flat_map(|p| p.iter().zip(&mean).map(|(v, m)| (v - m).powi(2)))
            .sum();
        let rms = (ss / (n * POSE_DIM as f64)).sqrt();
        Ok(Self {
            mean,
            scale: if rms > 1e-9 { rms } else { 1.0 },
        })
    }

    pub fn apply(&self, pose: &Pose) -> Vec<f64> {
        pose.flat().iter().zip(&self.mean).map(|(v, m)| (v - m) / self.scale).collect()
    }

    pub fn invert(&self, values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.scale + self.mean[i % POSE_DIM])
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != POSE_DIM || !(self.scale.is_finite() && self.scale > 0.0) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("bad pose normalization"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GestureVae {
    config: VaeConfig,
    norm: PoseNorm,
    params: ParamSet,
    encoder: BiLstm,
    mu_head: Linear,
    log_sigma_head: Linear,
    decoder: SequenceDecoder,
}

/// Vars of one encoded sequence on a tape.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    pub mu: Var,
    pub log_sigma: Var,
}

impl GestureVae {
    pub fn new(config: VaeConfig, seed: u64) -> Result<Self> {
        if config.latent_dim == 0 || config.hidden == 0 {
            return Err(Error::invalid("VAE dimensions must be positive"));
        }
        if let Some(p) = config.pad_to {
            if !(MIN_KEYPOSES..=MAX_KEYPOSES).contains(&p) {
                return Err(Error::invalid(format!("VAE pad length {p} out of range")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let h = config.hidden;
        let z = config.latent_dim;
        let encoder = BiLstm::new(&mut params, "vae.encoder", POSE_DIM, h, &mut rng);
        let mu_head = Linear::new(&mut params, "vae.mu", 2 * h, z, true, &mut rng);
        let log_sigma_head = Linear::new(&mut params, "vae.log_sigma", 2 * h, z, true, &mut rng);
        let decoder = SequenceDecoder::new(&mut params, "vae.decoder", z, h, POSE_DIM, &mut rng);
        Ok(Self {
            config,
            norm: PoseNorm::default(),
            params,
            encoder,
            mu_head,
            log_sigma_head,
            decoder,
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn norm(&self) -> &PoseNorm {
        &self.norm
    }

    pub fn set_norm(&mut self, norm: PoseNorm) -> Result<()> {
        norm.validate()?;
        self.norm = norm;
        Ok(())
    }

    /// Standardized `poses` as an `n × 24` tensor, the decoder's target.
    pub fn target(&self, poses: &[Pose]) -> Result<Tensor> {
        let flat: Vec<f64> = poses.iter().flat_map(|p| self.norm.apply(p)).collect();
        Tensor::matrix(poses.len(), POSE_DIM, flat)
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// Poses the encoder actually sees: validated and padded if configured.
    pub fn prepare(&self, kp: &KeyPoseSequence) -> Result<Vec<Pose>> {
        let n = kp.poses.len();
        if !(MIN_KEYPOSES..=MAX_KEYPOSES).contains(&n) {
            return Err(Error::invalid(format!(
                "key-pose sequence {} has {n} poses, expected {MIN_KEYPOSES}..={MAX_KEYPOSES}",
                kp.clip_id
            )));
        }
        Ok(match self.config.pad_to {
            Some(len) => kp.padded(len),
            None => kp.poses.clone(),
        })
    }

    /// Records the encoder for `poses` on `tape`.
    pub fn encode_on(&self, tape: &mut Tape, bound: &[Var], poses: &[Pose]) -> Result<EncodedVars> {
        let steps: Vec<Var> = poses
            .iter()
            .map(|p| Tensor::vector(self.norm.apply(p)).map(|t| tape.constant(t)))
            .collect::<Result<_>>()?;
        let state = self.encoder.encode(tape, bound, &steps)?;
        let mu = self.mu_head.forward(tape, bound, state)?;
        let log_sigma = self.log_sigma_head.forward(tape, bound, state)?;
        Ok(EncodedVars { mu, log_sigma })
    }

    /// `z = μ + σ ⊙ ε` on the tape; gradients reach μ and log σ.
    pub fn reparameterize_on(&self, tape: &mut Tape, enc: EncodedVars, eps: Vec<f64>) -> Result<Var> {
        let eps = tape.constant(Tensor::vector(eps)?);
        let sigma = tape.exp(enc.log_sigma)?;
        let noise = tape.mul(sigma, eps)?;
        tape.add(enc.mu, noise)
    }

    /// Decoder output in standardized coordinates.
    pub fn decode_on(&self, tape: &mut Tape, bound: &[Var], z: Var, n: usize) -> Result<Var> {
        self.decoder.decode(tape, bound, z, n)
    }

    /// Deterministic posterior parameters; `z` is set to the mean.
    pub fn encode(&self, kp: &KeyPoseSequence) -> Result<LatentCode> {
        let poses = self.prepare(kp)?;
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let enc = self.encode_on(&mut tape, &bound, &poses)?;
        let mu = tape.value(enc.mu).data().to_vec();
        let sigma: Vec<f64> = tape.value(enc.log_sigma).data().iter().map(|v| v.exp()).collect();
        Ok(LatentCode {
            z: mu.clone(),
            mu,
            sigma,
        })
    }

    /// Decodes `n` poses from `z`, returned as `n × 24`.
    pub fn decode(&self, z: &[f64], n: usize) -> Result<Tensor> {
        if z.len() != self.config.latent_dim {
            return Err(Error::Shape {
                op: "decode",
                lhs: vec![z.len()],
                rhs: vec![self.config.latent_dim],
            });
        }
        if !(MIN_KEYPOSES..=MAX_KEYPOSES).contains(&n) {
            return Err(Error::invalid(format!(
                "cannot decode {n} key poses, expected {MIN_KEYPOSES}..={MAX_KEYPOSES}"
            )));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let z = tape.constant(Tensor::vector(z.to_vec())?);
        let out = self.decode_on(&mut tape, &bound, z, n)?;
        Tensor::matrix(n, POSE_DIM, self.norm.invert(tape.value(out).data()))
    }

    /// Number of poses the decoder should emit for an input of `n` poses.
    pub fn output_len(&self, n: usize) -> usize {
        self.config.pad_to.unwrap_or(n)
    }

    pub fn save(&self, path: impl AsRef<Path>, config_hash: &str) -> Result<()> {
        persist::write_json(path, &self.to_doc(config_hash))
    }

    pub fn to_doc(&self, config_hash: &str) -> VaeDoc {
        VaeDoc {
            format: VAE_FORMAT.to_string(),
            version: VAE_VERSION,
            config_hash: config_hash.to_string(),
            config: self.config.clone(),
            norm: self.norm.clone(),
            params: ParamsDoc::from_params(&self.params),
        }
    }

    pub fn from_doc(doc: &VaeDoc) -> Result<Self> {
        persist::check_header(&doc.format, doc.version, VAE_FORMAT, VAE_VERSION)?;
        let mut vae = Self::new(doc.config.clone(), 0)?;
        vae.set_norm(doc.norm.clone())?;
        doc.params.restore_into(&mut vae.params)?;
        Ok(vae)
    }

    /// Loads a saved model and returns it with its recorded config hash.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, String)> {
        let doc: VaeDoc = persist::read_json(path)?;
        Ok((Self::from_doc(&doc)?, doc.config_hash))
    }
}

pub const VAE_FORMAT: &str = "act2g.gesture_vae";
pub const VAE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeDoc {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub config: VaeConfig,
    pub norm: PoseNorm,
    pub params: ParamsDoc,
}

/// Samples `z = μ + σ ⊙ ε` with `ε ~ N(0, I)` from a seeded generator.
pub fn reparameterize(code: &LatentCode, seed: u64) -> LatentCode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = code
        .mu
        .iter()
        .zip(&code.sigma)
        .map(|(&m, &s)| {
            let e: f64 = StandardNormal.sample(&mut rng);
            m + s * e
        })
        .collect();
    LatentCode {
        mu: code.mu.clone(),
        sigma: code.sigma.clone(),
        z,
    }
}

/// Closed-form `KL(N(μ, σ²) ‖ N(0, I)) = Σ ½(μ² + σ² − 1 − 2 log σ)`.
pub fn kl_divergence(mu: &[f64], sigma: &[f64]) -> f64 {
    mu.iter()
        .zip(sigma)
        .map(|(&m, &s)| 0.5 * (m * m + s * s - 1.0 - 2.0 * s.ln()))
        .sum()
}

/// Negative ELBO for already-computed values.
pub fn elbo_loss(target: &[f64], reconstructed: &[f64], code: &LatentCode) -> Result<ElboTerms> {
    if target.len() != reconstructed.len() {
        return Err(Error::Shape {
            op: "elbo_loss",
            lhs: vec![target.len()],
            rhs: vec![reconstructed.len()],
        });
    }
    if code.mu.len() != code.sigma.len() {
        return Err(Error::Shape {
            op: "elbo_loss",
            lhs: vec![code.mu.len()],
            rhs: vec![code.sigma.len()],
        });
    }
    let reconstruction = 0.5
        * target
            .iter()
            .zip(reconstructed)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>();
    let kl = kl_divergence(&code.mu, &code.sigma);
    Ok(ElboTerms {
        reconstruction,
        kl,
        total: reconstruction + kl,
    })
}

/// Tape version of [`elbo_loss`]; returns `(reconstruction, kl, total)`.
pub fn elbo_on(
    tape: &mut Tape,
    target: Var,
    reconstructed: Var,
    mu: Var,
    log_sigma: Var,
) -> Result<(Var, Var, Var)> {
    let diff = tape.sub(reconstructed, target)?;
    let sq = tape.square(diff)?;
    let sse = tape.sum(sq)?;
    let recon = tape.scale(sse, 0.5)?;

    let mu2 = tape.square(mu)?;
    let two_ls = tape.scale(log_sigma, 2.0)?;
    let var = tape.exp(two_ls)?;
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, two_ls)?;
    let c = tape.offset(b, -1.0)?;
    let s = tape.sum(c)?;
    let kl = tape.scale(s, 0.5)?;
    let total = tape.add(recon, kl)?;
    Ok((recon, kl, total))
}

fn standard_normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Trains a VAE on key-pose sequences with minibatch Adam.
pub fn train_vae(
    data: &[KeyPoseSequence],
    config: VaeConfig,
    opts: &VaeTrainOptions,
) -> Result<(GestureVae, Vec<EpochLoss>)> {
    if data.is_empty() {
        return Err(Error::invalid("cannot train a VAE on an empty dataset"));
    }
    if opts.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut vae = GestureVae::new(config, opts.seed)?;
    let raw: Vec<Vec<Pose>> = data.iter().map(|kp| kp.poses.clone()).collect();
    vae.set_norm(PoseNorm::fit(&raw)?)?;
    let prepared: Vec<Vec<Pose>> = data.iter().map(|kp| vae.prepare(kp)).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_0001);
    let mut adam = Adam::new(AdamConfig::with_lr(opts.lr), vae.params.tensors());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(opts.epochs);

    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let (mut rsum, mut ksum) = (0.0, 0.0);
        for batch in order.chunks(opts.batch_size) {
            let mut tape = Tape::new();
            let bound = vae.params.bind(&mut tape);
            let mut totals = Vec::with_capacity(batch.len());
            for &i in batch {
                let poses = &prepared[i];
                let enc = vae.encode_on(&mut tape, &bound, poses)?;
                let eps = standard_normal(&mut rng, vae.config.latent_dim);
                let z = vae.reparameterize_on(&mut tape, enc, eps)?;
                let out = vae.decode_on(&mut tape, &bound, z, poses.len())?;
                let target = tape.constant(vae.target(poses)?);
                let (r, k, t) = elbo_on(&mut tape, target, out, enc.mu, enc.log_sigma)?;
                rsum += tape.item(r)?;
                ksum += tape.item(k)?;
                totals.push(t);
            }
            let rows = totals
                .iter()
                .map(|&t| tape.reshape(t, &[1]))
                .collect::<Result<Vec<_>>>()?;
            let stacked = tape.concat(&rows)?;
            let loss = tape.mean(stacked)?;
            let grads = tape.backward(loss)?;
            let g = vae.params.collect_grads(&bound, &grads);
            adam.step(vae.params.tensors_mut(), &g)?;
        }
        let n = data.len() as f64;
        trace.push(EpochLoss {
            epoch,
            reconstruction: rsum / n,
            kl: ksum / n,
            total: (rsum + ksum) / n,
        });
    }
    Ok((vae, trace))
}
