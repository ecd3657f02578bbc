//! Word-attention text encoder.
//!
//! Frozen word vectors `w` feed three learned maps: `E_t1` scores each token
//! (a sigmoid keeps the raw score in (0, 1)), the raw scores are divided by
//! their sum over all token slots, `E_t2` transforms each vector, and `E_t3`
//! turns the attention-weighted, concatenated vectors into the text feature.
//! Padding slots carry a fixed raw score and zero vectors, so they enter the
//! normalizer but never the feature.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::ndcore::{AdamConfig, Scalar, Var};
use crate::persist::{self, ParamsDoc};
use crate::{Adam, ParamSet, Tape, Tensor};

pub const BCE_CLIP: f64 = 1e-7;
/// Raw score given to words the creator did not emphasize.
pub const OVERRIDE_BACKGROUND: f64 = 0.1;
/// Raw score given to emphasized words.
pub const OVERRIDE_EMPHASIS: f64 = 0.5;

/// Lowercased words of `text`, split on anything that is not alphanumeric
/// or an inner apostrophe. No truncation.
pub fn tokenize_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .map(|w| w.trim_matches('\''))
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizedText {
    pub text_id: String,
    pub tokens: Vec<String>,
    /// `max_tokens` flags, true for real tokens, left-aligned.
    pub mask: Vec<bool>,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn tokenize(text_id: &str, text: &str, max_tokens: usize) -> Result<TokenizedText> {
    let mut tokens = tokenize_words(text);
    if tokens.is_empty() {
        return Err(Error::invalid("text has no words"));
    }
    tokens.truncate(max_tokens);
    let mask = (0..max_tokens).map(|i| i < tokens.len()).collect();
    Ok(TokenizedText {
        text_id: text_id.to_string(),
        tokens,
        mask,
    })
}

/// Source of frozen word vectors.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_word(&self, word: &str) -> Vec<f64>;

    /// `n × dim` matrix for real tokens only.
    fn embed_words(&self, words: &[String]) -> Tensor {
        let data: Vec<f64> = words.iter().flat_map(|w| self.embed_word(w)).collect();
        Tensor::matrix(words.len(), self.dim(), data).expect("finite embeddings")
    }

    /// `T × dim` matrix with zero rows on padding slots.
    fn embed(&self, text: &TokenizedText) -> Tensor {
        let t = text.mask.len();
        let mut data = vec![0.0; t * self.dim()];
        for (i, w) in text.tokens.iter().enumerate() {
            data[i * self.dim()..(i + 1) * self.dim()].copy_from_slice(&self.embed_word(w));
        }
        Tensor::matrix(t, self.dim(), data).expect("finite embeddings")
    }
}

/// Deterministic unit-norm pseudo-embeddings keyed by a hash of the word.
#[derive(Clone, Debug, PartialEq)]
pub struct HashEmbeddings {
    pub dim: usize,
    pub seed: u64,
}

impl HashEmbeddings {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }
}

impl EmbeddingProvider for HashEmbeddings {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_word(&self, word: &str) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(word.as_bytes());
        let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
        let mut v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }
}

/// Precomputed vectors read from a text file; unknown words fall back to
/// [`HashEmbeddings`].
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    dim: usize,
    words: Vec<String>,
    vectors: HashMap<String, Vec<f64>>,
    fallback: HashEmbeddings,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            words: Vec::new(),
            vectors: HashMap::new(),
            fallback: HashEmbeddings::new(dim, 0),
        }
    }

    pub fn insert(&mut self, word: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        let word = word.into();
        if vector.len() != self.dim {
            return Err(Error::invalid(format!(
                "embedding for {word:?} has {} values, expected {}",
                vector.len(),
                self.dim
            )));
        }
        if word.is_empty() || word.chars().any(char::is_whitespace) {
            return Err(Error::invalid(format!("bad vocabulary word {word:?}")));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "embedding" });
        }
        if self.vectors.insert(word.clone(), vector).is_none() {
            self.words.push(word);
        }
        Ok(())
    }

    pub fn contains(&self, word: &str) -> bool {
        self.vectors.contains_key(word)
    }

    pub fn vocab(&self) -> &[String] {
        &self.words
    }

    /// Format: a `dim vocab` header line, then `word v1 … v_dim` per line.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.dim, self.words.len());
        for w in &self.words {
            out.push_str(w);
            for v in &self.vectors[w] {
                out.push(' ');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_text().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::parse(BufReader::new(f), &path.display().to_string())
    }

    pub fn parse(reader: impl BufRead, what: &str) -> Result<Self> {
        let bad = |message: String| Error::Format {
            what: "embedding table",
            message: format!("{what}: {message}"),
        };
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| bad("missing header".into()))?
            .map_err(|e| Error::io(what, e))?;
        let nums: Vec<usize> = header
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| bad(format!("bad header {header:?}"))))
            .collect::<Result<_>>()?;
        let [dim, count] = nums[..] else {
            return Err(bad(format!("bad header {header:?}")));
        };
        let mut table = Self::new(dim);
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(what, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            let word = parts.next().unwrap_or_default().to_string();
            let vector: Vec<f64> = parts
                .map(|s| s.parse().map_err(|_| bad(format!("line {}: bad number {s:?}", i + 2))))
                .collect::<Result<_>>()?;
            table
                .insert(word, vector)
                .map_err(|e| bad(format!("line {}: {e}", i + 2)))?;
        }
        if table.words.len() != count {
            return Err(bad(format!("header says {count} words, found {}", table.words.len())));
        }
        Ok(table)
    }
}

impl EmbeddingProvider for EmbeddingTable {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_word(&self, word: &str) -> Vec<f64> {
        match self.vectors.get(word) {
            Some(v) => v.clone(),
            None => self.fallback.embed_word(word),
        }
    }
}

/// `x_i / Σ_j x_j` for positive inputs.
pub fn normalize_attention<S: Scalar>(raw: &[S]) -> Vec<S> {
    let total: S = raw.iter().copied().sum();
    raw.iter().map(|&v| v / total).collect()
}

/// Raw scores for the creator override: `weight` on listed words,
/// [`OVERRIDE_BACKGROUND`] on the other real tokens.
pub fn override_raw(n: usize, overrides: &[(usize, f64)]) -> Result<Vec<f64>> {
    let mut raw = vec![OVERRIDE_BACKGROUND; n];
    for &(i, w) in overrides {
        if i >= n {
            return Err(Error::invalid(format!("override index {i} outside {n} tokens")));
        }
        if !(w > 0.0 && w < 1.0) {
            return Err(Error::invalid(format!("override weight {w} outside (0, 1)")));
        }
        raw[i] = w;
    }
    Ok(raw)
}

/// Mean binary cross entropy over real tokens, raw scores clipped to
/// `[1e-7, 1 − 1e-7]`.
pub fn attention_bce(raw: &[f64], labels: &[f64], mask: &[bool]) -> Result<f64> {
    if raw.len() != labels.len() || raw.len() != mask.len() {
        return Err(Error::invalid("attention, labels and mask differ in length"));
    }
    let mut total = 0.0;
    let mut n = 0;
    for ((&r, &y), &m) in raw.iter().zip(labels).zip(mask) {
        if !m {
            if y != 0.0 {
                return Err(Error::invalid("attention label on a padding slot"));
            }
            continue;
        }
        let r = r.clamp(BCE_CLIP, 1.0 - BCE_CLIP);
        total -= y * r.ln() + (1.0 - y) * (1.0 - r).ln();
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid("no real tokens"));
    }
    Ok(total / n as f64)
}

/// Tape version of [`attention_bce`] over `n` real-token raw scores.
pub fn attention_bce_on(tape: &mut Tape, raw: Var, labels: &[f64]) -> Result<Var> {
    let n = labels.len();
    let r = tape.clamp(raw, BCE_CLIP, 1.0 - BCE_CLIP)?;
    let log_r = tape.log(r)?;
    let neg = tape.neg(r)?;
    let one_minus = tape.offset(neg, 1.0)?;
    let log_1m = tape.log(one_minus)?;
    let y = tape.constant(Tensor::vector(labels.to_vec())?);
    let ny = tape.constant(Tensor::vector(labels.iter().map(|y| 1.0 - y).collect())?);
    let a = tape.mul(y, log_r)?;
    let b = tape.mul(ny, log_1m)?;
    let s = tape.add(a, b)?;
    let s = tape.sum(s)?;
    tape.scale(s, -1.0 / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub max_tokens: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub feature_dim: usize,
    pub padding_floor: f64,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            max_tokens: 32,
            embed_dim: 768,
            hidden: 64,
            feature_dim: 32,
            padding_floor: 1e-4,
        }
    }
}

/// Vars of one encoded text; `raw` and `attention` cover real tokens only.
#[derive(Clone, Copy, Debug)]
pub struct TextVars {
    pub raw: Var,
    pub attention: Var,
    pub feature: Var,
}

/// Attention over all token slots and the resulting feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttendedText {
    pub raw_attention: Vec<f64>,
    pub attention: Vec<f64>,
    pub feature: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    config: TextEncoderConfig,
    params: ParamSet,
    e_t1: Linear,
    e_t2: Linear,
    e_t3_in: Linear,
    e_t3_out: Linear,
}

pub const E_T1_PREFIX: &str = "text.e_t1";

impl TextEncoder {
    pub fn new(config: TextEncoderConfig, seed: u64) -> Result<Self> {
        let c = &config;
        if c.max_tokens == 0 || c.embed_dim == 0 || c.hidden == 0 || c.feature_dim == 0 {
            return Err(Error::invalid("text encoder dimensions must be positive"));
        }
        if !(c.padding_floor > 0.0 && c.padding_floor < 1.0) {
            return Err(Error::invalid("padding floor must lie in (0, 1)"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let e = c.embed_dim;
        let e_t1 = Linear::new(&mut params, E_T1_PREFIX, e, 1, true, &mut rng);
        // no bias: a zero padding vector must stay zero
        let e_t2 = Linear::new(&mut params, "text.e_t2", e, e, false, &mut rng);
        let e_t3_in = Linear::new(&mut params, "text.e_t3.in", c.max_tokens * e, c.hidden, true, &mut rng);
        let e_t3_out = Linear::new(&mut params, "text.e_t3.out", c.hidden, c.feature_dim, true, &mut rng);
        Ok(Self {
            config,
            params,
            e_t1,
            e_t2,
            e_t3_in,
            e_t3_out,
        })
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn check_words(&self, w: &Tensor) -> Result<usize> {
        match w.shape() {
            [n, e] if *e == self.config.embed_dim && *n >= 1 && *n <= self.config.max_tokens => Ok(*n),
            s => Err(Error::Shape {
                op: "text_encoder",
                lhs: s.to_vec(),
                rhs: vec![self.config.max_tokens, self.config.embed_dim],
            }),
        }
    }

    /// Raw scores `sigmoid(E_t1(w_i))` of the `n` real tokens.
    pub fn raw_attention_on(&self, tape: &mut Tape, bound: &[Var], w: Var) -> Result<Var> {
        let n = tape.shape(w)[0];
        let s = self.e_t1.forward(tape, bound, w)?;
        let s = tape.sigmoid(s)?;
        tape.reshape(s, &[n])
    }

    /// Divides real-token raw scores by their sum plus the padding floors.
    pub fn normalize_on(&self, tape: &mut Tape, raw: Var) -> Result<Var> {
        let n = tape.shape(raw)[0];
        let pad = (self.config.max_tokens - n) as f64 * self.config.padding_floor;
        let total = tape.sum(raw)?;
        let total = tape.offset(total, pad)?;
        tape.div_scalar(raw, total)
    }

    /// Concatenation of `A_i · E_t2(w_i)` over real tokens, length `n·E`.
    pub fn weighted_concat_on(&self, tape: &mut Tape, bound: &[Var], w: Var, attention: Var) -> Result<Var> {
        let n = tape.shape(w)[0];
        let wp = self.e_t2.forward(tape, bound, w)?;
        let weighted = tape.scale_rows(wp, attention)?;
        tape.reshape(weighted, &[n * self.config.embed_dim])
    }

    /// `E_t3` on the concatenation; the padding part of the input is exactly
    /// zero, so only the first `n·E` weight rows are used.
    pub fn feature_on(&self, tape: &mut Tape, bound: &[Var], concat: Var) -> Result<Var> {
        let len = tape.shape(concat)[0];
        let wt = tape.slice(bound[self.e_t3_in.weight.0], 0, len)?;
        let h = tape.matmul(concat, wt)?;
        let b = bound[self.e_t3_in.bias.expect("e_t3 has bias").0];
        let h = tape.add(h, b)?;
        let h = tape.tanh(h)?;
        self.e_t3_out.forward(tape, bound, h)
    }

    /// Full forward pass; `raw_override` replaces the `E_t1` scores.
    pub fn encode_on(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        w: Var,
        raw_override: Option<&[f64]>,
    ) -> Result<TextVars> {
        let raw = match raw_override {
            Some(r) => {
                if r.len() != tape.shape(w)[0] {
                    return Err(Error::invalid("override length differs from token count"));
                }
                tape.constant(Tensor::vector(r.to_vec())?)
            }
            None => self.raw_attention_on(tape, bound, w)?,
        };
        let attention = self.normalize_on(tape, raw)?;
        let concat = self.weighted_concat_on(tape, bound, w, attention)?;
        let feature = self.feature_on(tape, bound, concat)?;
        Ok(TextVars {
            raw,
            attention,
            feature,
        })
    }

    /// Inference on an `n × E` word matrix. Returned attention vectors span
    /// all `max_tokens` slots.
    pub fn infer(&self, w: &Tensor, raw_override: Option<&[f64]>) -> Result<AttendedText> {
        let n = self.check_words(w)?;
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let wv = tape.constant(w.clone());
        let vars = self.encode_on(&mut tape, &bound, wv, raw_override)?;
        let t = self.config.max_tokens;
        let floor = self.config.padding_floor;
        let mut raw = tape.value(vars.raw).data().to_vec();
        raw.resize(t, floor);
        let mut attention = tape.value(vars.attention).data().to_vec();
        let total: f64 = tape.value(vars.raw).data().iter().sum::<f64>() + (t - n) as f64 * floor;
        attention.resize(t, floor / total);
        Ok(AttendedText {
            raw_attention: raw,
            attention,
            feature: tape.value(vars.feature).data().to_vec(),
        })
    }

    /// Trains `E_t1` alone on the attention BCE.
    pub fn pretrain_attention(&mut self, data: &[LabeledText], opts: &AttentionTrainOptions) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::invalid("cannot pretrain attention on an empty dataset"));
        }
        for d in data {
            let n = self.check_words(&d.words)?;
            if d.labels.len() != n {
                return Err(Error::invalid("label count differs from token count"));
            }
        }
        let ids: Vec<usize> = (0..self.params.len())
            .filter(|&i| self.params.names()[i].starts_with(E_T1_PREFIX))
            .collect();
        let mut sub: Vec<Tensor> = ids.iter().map(|&i| self.params.tensors()[i].clone()).collect();
        let mut adam = Adam::new(AdamConfig::with_lr(opts.lr), &sub);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut trace = Vec::with_capacity(opts.epochs);
        for _ in 0..opts.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(opts.batch_size.max(1)) {
                let mut tape = Tape::new();
                let bound = self.params.bind_where(&mut tape, |n| n.starts_with(E_T1_PREFIX));
                let mut losses = Vec::with_capacity(batch.len());
                for &i in batch {
                    let w = tape.constant(data[i].words.clone());
                    let raw = self.raw_attention_on(&mut tape, &bound, w)?;
                    let l = attention_bce_on(&mut tape, raw, &data[i].labels)?;
                    epoch_loss += tape.item(l)?;
                    losses.push(tape.reshape(l, &[1])?);
                }
                let all = tape.concat(&losses)?;
                let loss = tape.mean(all)?;
                let grads = tape.backward(loss)?;
                let g: Vec<Tensor> = ids
                    .iter()
                    .map(|&i| grads.get_or_zeros(bound[i], &self.params.tensors()[i]))
                    .collect();
                adam.step(&mut sub, &g)?;
                for (&i, t) in ids.iter().zip(&sub) {
                    self.params.tensors_mut()[i] = t.clone();
                }
            }
            trace.push(epoch_loss / data.len() as f64);
        }
        Ok(trace)
    }

    pub fn to_doc(&self, config_hash: &str) -> TextEncoderDoc {
        TextEncoderDoc {
            format: TEXT_FORMAT.to_string(),
            version: TEXT_VERSION,
            config_hash: config_hash.to_string(),
            config: self.config.clone(),
            params: ParamsDoc::from_params(&self.params),
        }
    }

    pub fn from_doc(doc: &TextEncoderDoc) -> Result<Self> {
        persist::check_header(&doc.format, doc.version, TEXT_FORMAT, TEXT_VERSION)?;
        let mut enc = Self::new(doc.config.clone(), 0)?;
        doc.params.restore_into(&mut enc.params)?;
        Ok(enc)
    }

    pub fn save(&self, path: impl AsRef<Path>, config_hash: &str) -> Result<()> {
        persist::write_json(path, &self.to_doc(config_hash))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, String)> {
        let doc: TextEncoderDoc = persist::read_json(path)?;
        Ok((Self::from_doc(&doc)?, doc.config_hash))
    }
}

pub const TEXT_FORMAT: &str = "act2g.text_encoder";
pub const TEXT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderDoc {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub config: TextEncoderConfig,
    pub params: ParamsDoc,
}

/// Word vectors of one text (`n × E`, real tokens only) with 0/1 labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledText {
    pub words: Tensor,
    pub labels: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AttentionTrainOptions {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TextEncoderConfig {
        TextEncoderConfig {
            max_tokens: 6,
            embed_dim: 5,
            hidden: 4,
            feature_dim: 3,
            padding_floor: 1e-4,
        }
    }

    #[test]
    fn tokenize_examples() {
        let t = tokenize("a", "Hello, world", 32).unwrap();
        assert_eq!(t.tokens, ["hello", "world"]);
        assert_eq!(t.mask.len(), 32);
        assert!(t.mask[0] && t.mask[1] && !t.mask[2]);
        let long = vec!["w"; 40].join(" ");
        assert_eq!(tokenize("b", &long, 32).unwrap().tokens.len(), 32);
        assert!(tokenize("c", "  ,; ", 32).is_err());
        assert_eq!(tokenize_words("Don't 'quote' me"), ["don't", "quote", "me"]);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_attention(&[2.0, 2.0]), [0.5, 0.5]);
        let a = normalize_attention(&[0.3f64; 32]);
        assert!(a.iter().all(|&v| (v - 1.0 / 32.0).abs() < 1e-15));
    }

    #[test]
    fn bce_closed_forms() {
        let mask = [true, true, false];
        assert!((attention_bce(&[0.5, 0.5, 0.0], &[1.0, 0.0, 0.0], &mask).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(attention_bce(&[1.0, 0.0, 0.3], &[1.0, 0.0, 0.0], &mask).unwrap() <= 1e-6);
        assert!(attention_bce(&[0.5, 0.5, 0.5], &[1.0, 0.0, 1.0], &mask).is_err());
    }

    #[test]
    fn hash_embeddings_are_stable_unit_vectors() {
        let h = HashEmbeddings::new(768, 3);
        let a = h.embed_word("banana");
        assert_eq!(a, HashEmbeddings::new(768, 3).embed_word("banana"));
        assert_ne!(a, h.embed_word("apple"));
        let n: f64 = a.iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn table_round_trip_and_padding() {
        let mut t = EmbeddingTable::new(3);
        t.insert("a", vec![0.1, 0.2, 1.0 / 3.0]).unwrap();
        t.insert("b", vec![-1.0, 0.0, 2.5e-9]).unwrap();
        let text = t.to_text();
        let back = EmbeddingTable::parse(text.as_bytes(), "mem").unwrap();
        assert_eq!(back.to_text(), text);
        assert_eq!(back.embed_word("a"), vec![0.1, 0.2, 1.0 / 3.0]);
        let tok = tokenize("x", "a b a", 5).unwrap();
        let w = back.embed(&tok);
        assert_eq!(w.row(0), w.row(2));
        assert!(w.row(4).iter().all(|&v| v == 0.0));
        assert!(EmbeddingTable::parse("3 2\na 1 2 3\n".as_bytes(), "mem").is_err());
        assert!(EmbeddingTable::parse("3 1\na 1 2\n".as_bytes(), "mem").is_err());
    }

    #[test]
    fn infer_sums_to_one_and_padding_is_inert() {
        let enc = TextEncoder::new(small(), 2).unwrap();
        let h = HashEmbeddings::new(5, 1);
        let w = h.embed_words(&["x".into(), "y".into(), "z".into()]);
        let out = enc.infer(&w, None).unwrap();
        assert_eq!(out.attention.len(), 6);
        assert!((out.attention.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(out.raw_attention[..3].iter().all(|&r| r > 0.0 && r < 1.0));
        assert_eq!(out.raw_attention[3], 1e-4);

        // explicit evaluation of E_t3 over all slots with zero padding
        let mut tape = Tape::new();
        let bound = enc.params().bind_frozen(&mut tape);
        let wv = tape.constant(w.clone());
        let a = tape.constant(Tensor::vector(out.attention[..3].to_vec()).unwrap());
        let c = enc.weighted_concat_on(&mut tape, &bound, wv, a).unwrap();
        let mut full = tape.value(c).data().to_vec();
        full.resize(6 * 5, 0.0);
        let x = Tensor::matrix(1, 30, full).unwrap();
        let w3 = enc.params().get(enc.e_t3_in.weight);
        let b3 = enc.params().get(enc.e_t3_in.bias.unwrap());
        let hdn: Vec<f64> = (0..4)
            .map(|j| ((0..30).map(|i| x.data()[i] * w3.data()[i * 4 + j]).sum::<f64>() + b3.data()[j]).tanh())
            .collect();
        let w4 = enc.params().get(enc.e_t3_out.weight);
        let b4 = enc.params().get(enc.e_t3_out.bias.unwrap());
        for k in 0..3 {
            let f = (0..4).map(|j| hdn[j] * w4.data()[j * 3 + k]).sum::<f64>() + b4.data()[k];
            assert!((f - out.feature[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn override_path() {
        let enc = TextEncoder::new(small(), 2).unwrap();
        let w = HashEmbeddings::new(5, 1).embed_words(&["a".into(), "b".into(), "c".into()]);
        let raw = override_raw(3, &[(1, OVERRIDE_EMPHASIS)]).unwrap();
        let out = enc.infer(&w, Some(&raw)).unwrap();
        let argmax = (0..6).max_by(|&i, &j| out.attention[i].total_cmp(&out.attention[j])).unwrap();
        assert_eq!(argmax, 1);
        assert!(override_raw(3, &[(3, 0.5)]).is_err());
        assert!(override_raw(3, &[(0, 1.0)]).is_err());
        // override equal to the model's own scores reproduces the feature
        let own = enc.infer(&w, None).unwrap();
        let same = enc.infer(&w, Some(&own.raw_attention[..3])).unwrap();
        assert_eq!(own, same);
    }

    #[test]
    fn concat_is_linear_in_words() {
        let enc = TextEncoder::new(small(), 4).unwrap();
        let w = HashEmbeddings::new(5, 1).embed_words(&["a".into(), "b".into()]);
        let w2 = w.map(|v| 3.0 * v).unwrap();
        let run = |w: &Tensor| {
            let mut tape = Tape::new();
            let bound = enc.params().bind_frozen(&mut tape);
            let wv = tape.constant(w.clone());
            let a = tape.constant(Tensor::vector(vec![0.4, 0.6]).unwrap());
            let c = enc.weighted_concat_on(&mut tape, &bound, wv, a).unwrap();
            tape.value(c).data().to_vec()
        };
        for (a, b) in run(&w).iter().zip(run(&w2)) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pretraining_memorizes_one_example() {
        let mut enc = TextEncoder::new(small(), 4).unwrap();
        let w = HashEmbeddings::new(5, 1).embed_words(&["a".into(), "b".into(), "c".into()]);
        let data = vec![LabeledText {
            words: w,
            labels: vec![0.0, 1.0, 0.0],
        }];
        let opts = AttentionTrainOptions {
            epochs: 3000,
            batch_size: 1,
            lr: 5e-2,
            seed: 0,
        };
        let trace = enc.pretrain_attention(&data, &opts).unwrap();
        assert!(*trace.last().unwrap() < 1e-2, "{:?}", trace.last());
        assert!(enc.pretrain_attention(&[], &opts).is_err());
    }

    #[test]
    fn pretraining_leaves_other_maps_alone() {
        let mut enc = TextEncoder::new(small(), 4).unwrap();
        let before = enc.params().clone();
        let w = HashEmbeddings::new(5, 1).embed_words(&["a".into(), "b".into()]);
        let data = vec![LabeledText {
            words: w,
            labels: vec![1.0, 0.0],
        }];
        let opts = AttentionTrainOptions {
            epochs: 5,
            ..Default::default()
        };
        enc.pretrain_attention(&data, &opts).unwrap();
        for ((name, a), (_, b)) in before.iter().zip(enc.params().iter()) {
            assert_eq!(a == b, !name.starts_with(E_T1_PREFIX), "{name}");
        }
    }
}
