//! Joint text/gesture embedding with a margin contrastive loss.
//!
//! Text features come from [`TextEncoder`]; gesture features from a
//! bidirectional LSTM over key poses with a linear head. A decoder rebuilds
//! the key poses from the gesture feature. The batch objective is
//! `L_attn + α·L_reconst + β·L_contrastive`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::{BiLstm, Linear, SequenceDecoder};
use crate::motion::{Pose, MAX_KEYPOSES, MIN_KEYPOSES, POSE_DIM};
use crate::ndcore::{AdamConfig, Var};
use crate::gesture_vae::PoseNorm;
use crate::persist::{self, ParamsDoc};
use crate::text_encoder::{attention_bce_on, TextEncoder, TextEncoderConfig, TextEncoderDoc};
use crate::{Adam, ParamSet, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GestureEncoderConfig {
    pub hidden: usize,
    pub feature_dim: usize,
}

impl Default for GestureEncoderConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            feature_dim: 32,
        }
    }
}

impl From<&ModelConfig> for GestureEncoderConfig {
    fn from(m: &ModelConfig) -> Self {
        Self {
            hidden: m.gesture_hidden,
            feature_dim: m.feature_dim,
        }
    }
}

impl From<&ModelConfig> for TextEncoderConfig {
    fn from(m: &ModelConfig) -> Self {
        Self {
            max_tokens: m.max_tokens,
            embed_dim: m.embed_dim,
            hidden: m.text_hidden,
            feature_dim: m.feature_dim,
            padding_floor: m.padding_floor,
        }
    }
}

/// `E_g` plus the key-pose decoder that consumes its output.
#[derive(Clone, Debug)]
pub struct GestureEncoder {
    config: GestureEncoderConfig,
    /// Applied to encoder inputs only; the decoder works in pose units.
    norm: PoseNorm,
    params: ParamSet,
    rnn: BiLstm,
    head: Linear,
    decoder: SequenceDecoder,
}

impl GestureEncoder {
    pub fn new(config: GestureEncoderConfig, seed: u64) -> Result<Self> {
        if config.hidden == 0 || config.feature_dim == 0 {
            return Err(Error::invalid("gesture encoder dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let h = config.hidden;
        let f = config.feature_dim;
        let rnn = BiLstm::new(&mut params, "gesture.rnn", POSE_DIM, h, &mut rng);
        let head = Linear::new(&mut params, "gesture.head", 2 * h, f, true, &mut rng);
        let decoder = SequenceDecoder::new(&mut params, "gesture.decoder", f, h, POSE_DIM, &mut rng);
        Ok(Self {
            config,
            norm: PoseNorm::default(),
            params,
            rnn,
            head,
            decoder,
        })
    }

    pub fn config(&self) -> &GestureEncoderConfig {
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

    pub fn encode_on(&self, tape: &mut Tape, bound: &[Var], poses: &[Pose]) -> Result<Var> {
        check_len(poses.len())?;
        let steps: Vec<Var> = poses
            .iter()
            .map(|p| Tensor::vector(self.norm.apply(p)).map(|t| tape.constant(t)))
            .collect::<Result<_>>()?;
        let state = self.rnn.encode(tape, bound, &steps)?;
        self.head.forward(tape, bound, state)
    }

    pub fn decode_on(&self, tape: &mut Tape, bound: &[Var], feature: Var, n: usize) -> Result<Var> {
        self.decoder.decode(tape, bound, feature, n)
    }

    /// Deterministic gesture feature `f_g`.
    pub fn encode(&self, poses: &[Pose]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let f = self.encode_on(&mut tape, &bound, poses)?;
        Ok(tape.value(f).data().to_vec())
    }

    pub fn to_doc(&self) -> GestureEncoderDoc {
        GestureEncoderDoc {
            config: self.config.clone(),
            norm: self.norm.clone(),
            params: ParamsDoc::from_params(&self.params),
        }
    }

    pub fn from_doc(doc: &GestureEncoderDoc) -> Result<Self> {
        let mut enc = Self::new(doc.config.clone(), 0)?;
        enc.set_norm(doc.norm.clone())?;
        doc.params.restore_into(&mut enc.params)?;
        Ok(enc)
    }
}

fn check_len(n: usize) -> Result<()> {
    if !(MIN_KEYPOSES..=MAX_KEYPOSES).contains(&n) {
        return Err(Error::invalid(format!(
            "{n} key poses, expected {MIN_KEYPOSES}..={MAX_KEYPOSES}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GestureEncoderDoc {
    pub config: GestureEncoderConfig,
    pub norm: PoseNorm,
    pub params: ParamsDoc,
}

/// `D[i][j] = ‖f_t(i) − f_g(j)‖₂`.
pub fn distance_matrix(ft: &[Vec<f64>], fg: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if ft.len() != fg.len() {
        return Err(Error::Shape {
            op: "distance_matrix",
            lhs: vec![ft.len()],
            rhs: vec![fg.len()],
        });
    }
    let dim = ft.first().map_or(0, Vec::len);
    if ft.iter().chain(fg).any(|r| r.len() != dim) {
        return Err(Error::invalid("feature rows differ in dimension"));
    }
    Ok(ft
        .iter()
        .map(|a| {
            fg.iter()
                .map(|b| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
                .collect()
        })
        .collect())
}

/// Row-major `B²` vector of pair distances on the tape.
pub fn distance_matrix_on(tape: &mut Tape, ft: &[Var], fg: &[Var]) -> Result<Var> {
    if ft.len() != fg.len() || ft.is_empty() {
        return Err(Error::Shape {
            op: "distance_matrix",
            lhs: vec![ft.len()],
            rhs: vec![fg.len()],
        });
    }
    let mut cells = Vec::with_capacity(ft.len() * fg.len());
    for &a in ft {
        for &b in fg {
            let d = tape.sub(a, b)?;
            let d = tape.square(d)?;
            let d = tape.sum(d)?;
            let d = tape.sqrt(d)?;
            cells.push(tape.reshape(d, &[1])?);
        }
    }
    tape.concat(&cells)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveTerms {
    /// `(1/B) Σ ½ (P⊙D)²`.
    pub positive: f64,
    /// `(1/B) Σ_{P=0} ½ max(0, m − D)²`.
    pub negative: f64,
    pub total: f64,
}

fn square_dims(p: &[Vec<f64>], d: &[Vec<f64>]) -> Result<usize> {
    let b = p.len();
    if d.len() != b || p.iter().chain(d).any(|r| r.len() != b) {
        return Err(Error::invalid("positive and distance matrices must be equal and square"));
    }
    Ok(b)
}

pub fn contrastive_loss(p: &[Vec<f64>], d: &[Vec<f64>], margin: f64) -> Result<ContrastiveTerms> {
    let b = square_dims(p, d)?;
    if b == 0 || margin.is_nan() || margin < 0.0 {
        return Err(Error::invalid("contrastive loss needs a batch and a margin ≥ 0"));
    }
    let (mut pos, mut neg) = (0.0, 0.0);
    for i in 0..b {
        for j in 0..b {
            let (pij, dij) = (p[i][j], d[i][j]);
            pos += 0.5 * (pij * dij).powi(2);
            if pij == 0.0 {
                neg += 0.5 * (margin - dij).max(0.0).powi(2);
            }
        }
    }
    let bf = b as f64;
    Ok(ContrastiveTerms {
        positive: pos / bf,
        negative: neg / bf,
        total: (pos + neg) / bf,
    })
}

/// Tape version over a row-major `B²` distance vector and 0/1 `p`.
pub fn contrastive_on(tape: &mut Tape, p: &[f64], d: Var, margin: f64) -> Result<(Var, Var, Var)> {
    let cells = p.len();
    let b = (cells as f64).sqrt().round() as usize;
    if b * b != cells || tape.shape(d) != [cells] {
        return Err(Error::invalid("contrastive inputs are not a square batch"));
    }
    let pm = tape.constant(Tensor::vector(p.to_vec())?);
    let nm = tape.constant(Tensor::vector(p.iter().map(|v| 1.0 - v).collect())?);
    let pd = tape.mul(pm, d)?;
    let pd = tape.square(pd)?;
    let pos = tape.sum(pd)?;
    let pos = tape.scale(pos, 0.5 / b as f64)?;

    let gap = tape.neg(d)?;
    let gap = tape.offset(gap, margin)?;
    let gap = tape.max0(gap)?;
    let gap = tape.square(gap)?;
    let gap = tape.mul(nm, gap)?;
    let neg = tape.sum(gap)?;
    let neg = tape.scale(neg, 0.5 / b as f64)?;
    let total = tape.add(pos, neg)?;
    Ok((pos, neg, total))
}

/// `(1/B) Σ_i mean_c (p′_ic − p_ic)²`: squared error averaged over the
/// coordinates of each sample, then over the batch.
pub fn reconstruction_loss(reconstructed: &[Vec<f64>], target: &[Vec<f64>]) -> Result<f64> {
    if reconstructed.len() != target.len() || target.is_empty() {
        return Err(Error::invalid("reconstruction batch sizes differ or are empty"));
    }
    let mut total = 0.0;
    for (a, b) in reconstructed.iter().zip(target) {
        if a.len() != b.len() || a.is_empty() {
            return Err(Error::Shape {
                op: "reconstruction_loss",
                lhs: vec![a.len()],
                rhs: vec![b.len()],
            });
        }
        total += a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    }
    Ok(total / target.len() as f64)
}

/// Per-sample term of [`reconstruction_loss`] on the tape.
pub fn sample_reconstruction_on(tape: &mut Tape, reconstructed: Var, target: Var) -> Result<Var> {
    let d = tape.sub(reconstructed, target)?;
    let d = tape.square(d)?;
    tape.mean(d)
}

pub fn total_loss(attn: f64, reconst: f64, contrastive: f64, alpha: f64, beta: f64) -> f64 {
    attn + alpha * reconst + beta * contrastive
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            beta: 2.0,
            margin: 20.0,
        }
    }
}

impl From<&ModelConfig> for LossWeights {
    fn from(m: &ModelConfig) -> Self {
        Self {
            alpha: m.alpha,
            beta: m.beta,
            margin: m.margin,
        }
    }
}

/// One training pair; `words` holds the real-token vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub id: String,
    pub words: Tensor,
    pub labels: Vec<f64>,
    pub keyposes: Vec<Pose>,
    pub cluster: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchLossReport {
    pub attention: f64,
    pub reconstruction: f64,
    pub contrastive: f64,
    pub contrastive_positive: f64,
    pub contrastive_negative: f64,
    pub total: f64,
    pub distances: Vec<f64>,
    pub positives: Vec<f64>,
}

/// Records the full objective for one batch. Returns the loss var and the
/// report of its parts.
pub fn batch_loss_on(
    tape: &mut Tape,
    text: &TextEncoder,
    text_bound: &[Var],
    gesture: &GestureEncoder,
    gesture_bound: &[Var],
    batch: &[&PairedSample],
    weights: LossWeights,
) -> Result<(Var, BatchLossReport)> {
    let b = batch.len();
    let mut ft = Vec::with_capacity(b);
    let mut fg = Vec::with_capacity(b);
    let mut attn = Vec::with_capacity(b);
    let mut recon = Vec::with_capacity(b);
    for s in batch {
        let w = tape.constant(s.words.clone());
        let tv = text.encode_on(tape, text_bound, w, None)?;
        attn.push(attention_bce_on(tape, tv.raw, &s.labels)?);
        ft.push(tv.feature);
        let g = gesture.encode_on(tape, gesture_bound, &s.keyposes)?;
        let out = gesture.decode_on(tape, gesture_bound, g, s.keyposes.len())?;
        let flat: Vec<f64> = s.keyposes.iter().flat_map(|p| p.flat()).collect();
        let target = tape.constant(Tensor::matrix(s.keyposes.len(), POSE_DIM, flat)?);
        recon.push(sample_reconstruction_on(tape, out, target)?);
        fg.push(g);
    }
    let stack_mean = |tape: &mut Tape, vs: &[Var]| -> Result<Var> {
        let rows = vs.iter().map(|&v| tape.reshape(v, &[1])).collect::<Result<Vec<_>>>()?;
        let c = tape.concat(&rows)?;
        tape.mean(c)
    };
    let l_attn = stack_mean(tape, &attn)?;
    let l_recon = stack_mean(tape, &recon)?;
    let d = distance_matrix_on(tape, &ft, &fg)?;
    let p: Vec<f64> = batch
        .iter()
        .flat_map(|a| batch.iter().map(move |b| if a.cluster == b.cluster { 1.0 } else { 0.0 }))
        .collect();
    let (pos, neg, l_con) = contrastive_on(tape, &p, d, weights.margin)?;
    let wr = tape.scale(l_recon, weights.alpha)?;
    let wc = tape.scale(l_con, weights.beta)?;
    let total = tape.add(l_attn, wr)?;
    let total = tape.add(total, wc)?;
    let report = BatchLossReport {
        attention: tape.item(l_attn)?,
        reconstruction: tape.item(l_recon)?,
        contrastive: tape.item(l_con)?,
        contrastive_positive: tape.item(pos)?,
        contrastive_negative: tape.item(neg)?,
        total: tape.item(total)?,
        distances: tape.value(d).data().to_vec(),
        positives: p,
    };
    Ok((total, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Act2gTrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub weights: LossWeights,
}

impl Default for Act2gTrainOptions {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
            weights: LossWeights::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub attention: f64,
    pub reconstruction: f64,
    pub contrastive: f64,
    pub total: f64,
}

/// Trains the text encoder (starting from `text`) and a fresh gesture
/// encoder jointly.
pub fn train_act2g(
    data: &[PairedSample],
    mut text: TextEncoder,
    gesture_config: GestureEncoderConfig,
    opts: &Act2gTrainOptions,
) -> Result<(TextEncoder, GestureEncoder, Vec<EpochReport>)> {
    if data.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    if opts.batch_size == 0 || opts.batch_size > data.len() {
        return Err(Error::invalid(format!(
            "batch size {} must be in 1..={}",
            opts.batch_size,
            data.len()
        )));
    }
    if gesture_config.feature_dim != text.config().feature_dim {
        return Err(Error::invalid("text and gesture feature sizes differ"));
    }
    let mut gesture = GestureEncoder::new(gesture_config, opts.seed)?;
    let poses: Vec<Vec<Pose>> = data.iter().map(|s| s.keyposes.clone()).collect();
    gesture.set_norm(PoseNorm::fit(&poses)?)?;
    let adam_cfg = AdamConfig::with_lr(opts.lr);
    let mut text_adam = Adam::new(adam_cfg, text.params().tensors());
    let mut gesture_adam = Adam::new(adam_cfg, gesture.params().tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xc0_17a5);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(opts.epochs);

    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut acc = EpochReport {
            epoch,
            attention: 0.0,
            reconstruction: 0.0,
            contrastive: 0.0,
            total: 0.0,
        };
        let mut batches = 0.0;
        for idx in order.chunks(opts.batch_size) {
            let batch: Vec<&PairedSample> = idx.iter().map(|&i| &data[i]).collect();
            let mut tape = Tape::new();
            let tb = text.params().bind(&mut tape);
            let gb = gesture.params().bind(&mut tape);
            let (loss, report) = batch_loss_on(&mut tape, &text, &tb, &gesture, &gb, &batch, opts.weights)?;
            let grads = tape.backward(loss)?;
            let tg = text.params().collect_grads(&tb, &grads);
            let gg = gesture.params().collect_grads(&gb, &grads);
            text_adam.step(text.params_mut().tensors_mut(), &tg)?;
            gesture_adam.step(gesture.params_mut().tensors_mut(), &gg)?;
            acc.attention += report.attention;
            acc.reconstruction += report.reconstruction;
            acc.contrastive += report.contrastive;
            acc.total += report.total;
            batches += 1.0;
        }
        acc.attention /= batches;
        acc.reconstruction /= batches;
        acc.contrastive /= batches;
        acc.total /= batches;
        trace.push(acc);
    }
    Ok((text, gesture, trace))
}

/// Mean distance over positive and over negative pairs of a labeled set,
/// excluding nothing: a text is also compared with its own gesture.
pub fn pair_distance_means(ft: &[Vec<f64>], fg: &[Vec<f64>], clusters: &[usize]) -> Result<(f64, f64)> {
    let d = distance_matrix(ft, fg)?;
    if clusters.len() != d.len() {
        return Err(Error::invalid("cluster labels differ from batch size"));
    }
    let (mut ps, mut pn, mut ns, mut nn) = (0.0, 0usize, 0.0, 0usize);
    for (i, row) in d.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if clusters[i] == clusters[j] {
                ps += v;
                pn += 1;
            } else {
                ns += v;
                nn += 1;
            }
        }
    }
    if pn == 0 || nn == 0 {
        return Err(Error::invalid("need both positive and negative pairs"));
    }
    Ok((ps / pn as f64, ns / nn as f64))
}

pub const CHECKPOINT_FORMAT: &str = "act2g.checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Trained text and gesture encoders with the model configuration that
/// produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Act2gCheckpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub model: ModelConfig,
    pub text: TextEncoderDoc,
    pub gesture: GestureEncoderDoc,
}

impl Act2gCheckpoint {
    pub fn new(model: &ModelConfig, text: &TextEncoder, gesture: &GestureEncoder) -> Self {
        let hash = model.config_hash();
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config_hash: hash.clone(),
            model: model.clone(),
            text: text.to_doc(&hash),
            gesture: gesture.to_doc(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        persist::write_json(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let c: Self = persist::read_json(path)?;
        persist::check_header(&c.format, c.version, CHECKPOINT_FORMAT, CHECKPOINT_VERSION)?;
        if c.model.config_hash() != c.config_hash {
            return Err(Error::ConfigMismatch {
                expected: c.model.config_hash(),
                found: c.config_hash,
            });
        }
        Ok(c)
    }

    pub fn encoders(&self) -> Result<(TextEncoder, GestureEncoder)> {
        Ok((TextEncoder::from_doc(&self.text)?, GestureEncoder::from_doc(&self.gesture)?))
    }
}
