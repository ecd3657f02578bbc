//! Gesture library and text-driven generation by nearest-neighbour sampling.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::{ensure_hash, ModelConfig, RetrievalConfig};
use crate::contrastive::{Act2gCheckpoint, GestureEncoder};
use crate::error::{Error, Result};
use crate::motion::{extract_keyposes, speed_adjust, spline_stitch_with_spans, MotionClip, StitchSpan};
use crate::persist;
use crate::text_encoder::{override_raw, tokenize_words, EmbeddingProvider, TextEncoder};

pub const LIBRARY_FORMAT: &str = "act2g.library";
pub const LIBRARY_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LibraryEntry {
    pub clip_id: String,
    pub feature: Vec<f64>,
    /// Motion file relative to the library directory.
    pub motion: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LibraryIndex {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub entries: Vec<LibraryEntry>,
}

/// Library entries with their motions held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct GestureLibrary {
    pub index: LibraryIndex,
    pub clips: Vec<MotionClip>,
}

/// One clip offered to [`build_library`].
#[derive(Clone, Debug)]
pub struct LibrarySource<'a> {
    pub clip: &'a MotionClip,
    pub cluster: Option<usize>,
}

pub fn build_library(
    sources: &[LibrarySource<'_>],
    gesture: &GestureEncoder,
    model: &ModelConfig,
    config_hash: &str,
) -> Result<GestureLibrary> {
    ensure_hash(&model.config_hash(), config_hash)?;
    if sources.is_empty() {
        return Err(Error::invalid("cannot build a library from no clips"));
    }
    let mut entries = Vec::with_capacity(sources.len());
    let mut clips = Vec::with_capacity(sources.len());
    let mut seen = std::collections::BTreeSet::new();
    for s in sources {
        let id = &s.clip.clip_id;
        if !seen.insert(id.clone()) {
            return Err(Error::invalid(format!("duplicate clip id {id}")));
        }
        let kp = extract_keyposes(s.clip, model.min_keyposes, model.max_keyposes)?;
        entries.push(LibraryEntry {
            clip_id: id.clone(),
            feature: gesture.encode(&kp.poses)?,
            motion: format!("motions/{id}.json"),
            cluster: s.cluster,
        });
        clips.push(s.clip.clone());
    }
    Ok(GestureLibrary {
        index: LibraryIndex {
            format: LIBRARY_FORMAT.to_string(),
            version: LIBRARY_VERSION,
            config_hash: config_hash.to_string(),
            entries,
        },
        clips,
    })
}

impl GestureLibrary {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn config_hash(&self) -> &str {
        &self.index.config_hash
    }

    pub fn position(&self, clip_id: &str) -> Option<usize> {
        self.index.entries.iter().position(|e| e.clip_id == clip_id)
    }

    pub fn clip(&self, clip_id: &str) -> Option<&MotionClip> {
        self.position(clip_id).map(|i| &self.clips[i])
    }

    /// Writes `library.json` and the motion files under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for (e, c) in self.index.entries.iter().zip(&self.clips) {
            c.save(dir.join(&e.motion))?;
        }
        persist::write_json(dir.join("library.json"), &self.index)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let index: LibraryIndex = persist::read_json(dir.join("library.json"))?;
        persist::check_header(&index.format, index.version, LIBRARY_FORMAT, LIBRARY_VERSION)?;
        let clips = index
            .entries
            .iter()
            .map(|e| MotionClip::load(dir.join(&e.motion)))
            .collect::<Result<Vec<_>>>()?;
        if index.entries.is_empty() {
            return Err(Error::invalid("library has no entries"));
        }
        Ok(Self { index, clips })
    }
}

/// Consecutive groups of `size` tokens; the last group holds the remainder.
pub fn segment_text<T: Clone>(tokens: &[T], size: usize) -> Vec<Vec<T>> {
    tokens.chunks(size.max(1)).map(<[T]>::to_vec).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub index: usize,
    pub clip_id: String,
    pub distance: f64,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Retrieved {
    pub index: usize,
    pub clip_id: String,
    pub distance: f64,
    pub candidates: Vec<Candidate>,
}

/// The `k` nearest entries to `feature` in ascending distance (ties by
/// library order), as `(index, distance)`.
pub fn nearest(feature: &[f64], library: &GestureLibrary, k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = library
        .index
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let d = e.feature.iter().zip(feature).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            (i, d)
        })
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Sampling weights `softmax(−d/τ)` with `τ` the mean of `d`; uniform when
/// all distances are zero.
pub fn neighbour_weights(distances: &[f64]) -> Vec<f64> {
    let n = distances.len();
    let tau = distances.iter().sum::<f64>() / n as f64;
    if tau <= 0.0 {
        return vec![1.0 / n as f64; n];
    }
    let lo = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = distances.iter().map(|d| (-(d - lo) / tau).exp()).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|v| v / total).collect()
}

pub fn retrieve(feature: &[f64], library: &GestureLibrary, k: usize, rng: &mut ChaCha8Rng) -> Result<Retrieved> {
    if library.is_empty() {
        return Err(Error::invalid("gesture library is empty"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if let Some(e) = library.index.entries.first() {
        if e.feature.len() != feature.len() {
            return Err(Error::Shape {
                op: "retrieve",
                lhs: vec![feature.len()],
                rhs: vec![e.feature.len()],
            });
        }
    }
    let near = nearest(feature, library, k);
    let dists: Vec<f64> = near.iter().map(|&(_, d)| d).collect();
    let probs = neighbour_weights(&dists);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut pick = near.len() - 1;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            pick = i;
            break;
        }
    }
    let candidates = near
        .iter()
        .zip(&probs)
        .map(|(&(index, distance), &probability)| Candidate {
            index,
            clip_id: library.index.entries[index].clip_id.clone(),
            distance,
            probability,
        })
        .collect();
    let (index, distance) = near[pick];
    Ok(Retrieved {
        index,
        clip_id: library.index.entries[index].clip_id.clone(),
        distance,
        candidates,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordWeight {
    /// Token position in the whole text.
    pub index: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationRequest {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention_override: Option<Vec<WordWeight>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_duration_s: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl GenerationRequest {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            attention_override: None,
            target_duration_s: None,
            seed: 0,
            k: None,
            config_hash: None,
        }
    }

    /// The creator override: `0.5` on `words`, `0.1` on the rest.
    pub fn emphasize(mut self, words: &[usize]) -> Self {
        self.attention_override = Some(
            words
                .iter()
                .map(|&index| WordWeight {
                    index,
                    weight: crate::text_encoder::OVERRIDE_EMPHASIS,
                })
                .collect(),
        );
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentDiagnostics {
    pub tokens: Vec<String>,
    /// Index of the first token of the segment in the whole text.
    pub token_offset: usize,
    pub raw_attention: Vec<f64>,
    pub attention: Vec<f64>,
    pub feature: Vec<f64>,
    pub clip_id: String,
    pub distance: f64,
    pub candidates: Vec<Candidate>,
    /// Frame count of the clip after speed adjustment.
    pub adjusted_frames: usize,
    pub span: StitchSpan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub config_hash: String,
    pub seed: u64,
    pub k: usize,
    pub overridden: bool,
    pub segments: Vec<SegmentDiagnostics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub motion: MotionClip,
    pub diagnostics: Diagnostics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentAttention {
    pub token_offset: usize,
    pub tokens: Vec<String>,
    pub attended: crate::text_encoder::AttendedText,
}

/// Everything generation needs, immutable once built.
#[derive(Clone)]
pub struct Generator {
    pub model: ModelConfig,
    pub retrieval: RetrievalConfig,
    pub text: TextEncoder,
    pub library: GestureLibrary,
    pub embeddings: Arc<dyn EmbeddingProvider>,
    config_hash: String,
}

impl std::fmt::Debug for Generator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Generator")
            .field("config_hash", &self.config_hash)
            .field("library", &self.library.len())
            .finish()
    }
}

impl Generator {
    pub fn new(
        checkpoint: &Act2gCheckpoint,
        library: GestureLibrary,
        embeddings: Arc<dyn EmbeddingProvider>,
        retrieval: RetrievalConfig,
    ) -> Result<Self> {
        ensure_hash(&checkpoint.config_hash, library.config_hash())?;
        if embeddings.dim() != checkpoint.model.embed_dim {
            return Err(Error::invalid(format!(
                "embedding dimension {} differs from model's {}",
                embeddings.dim(),
                checkpoint.model.embed_dim
            )));
        }
        let (text, _) = checkpoint.encoders()?;
        Ok(Self {
            model: checkpoint.model.clone(),
            retrieval,
            text,
            library,
            embeddings,
            config_hash: checkpoint.config_hash.clone(),
        })
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    /// Text feature and attention for a list of words; the words are
    /// truncated to the encoder's token slots.
    pub fn encode_words(&self, words: &[String], raw_override: Option<&[f64]>) -> Result<crate::text_encoder::AttendedText> {
        if words.is_empty() {
            return Err(Error::invalid("text has no words"));
        }
        let words = &words[..words.len().min(self.model.max_tokens)];
        let w = self.embeddings.embed_words(words);
        self.text.infer(&w, raw_override.map(|r| &r[..words.len()]))
    }

    /// Attention and text feature of each segment of `words`. Override
    /// indices refer to the whole text.
    pub fn attend(&self, words: &[String], overrides: Option<&[(usize, f64)]>) -> Result<Vec<SegmentAttention>> {
        if words.is_empty() {
            return Err(Error::invalid("text has no words"));
        }
        if let Some(o) = overrides {
            override_raw(words.len(), o)?;
        }
        let size = self.retrieval.segment_words;
        segment_text(words, size)
            .into_iter()
            .enumerate()
            .map(|(si, seg)| {
                let offset = si * size;
                let raw = match overrides {
                    Some(o) => {
                        let local: Vec<(usize, f64)> = o
                            .iter()
                            .filter(|(i, _)| (offset..offset + seg.len()).contains(i))
                            .map(|&(i, w)| (i - offset, w))
                            .collect();
                        Some(override_raw(seg.len(), &local)?)
                    }
                    None => None,
                };
                let attended = self.encode_words(&seg, raw.as_deref())?;
                Ok(SegmentAttention {
                    token_offset: offset,
                    tokens: seg,
                    attended,
                })
            })
            .collect()
    }

    pub fn generate(&self, req: &GenerationRequest) -> Result<Generation> {
        if let Some(h) = &req.config_hash {
            ensure_hash(&self.config_hash, h)?;
        }
        let words = tokenize_words(&req.text);
        if words.is_empty() {
            return Err(Error::invalid("text has no words"));
        }
        if let Some(d) = req.target_duration_s {
            if !(d.is_finite() && d > 0.0) {
                return Err(Error::invalid("target_duration_s must be positive"));
            }
        }
        let k = req.k.unwrap_or(self.retrieval.k_neighbors);
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        let overrides: Option<Vec<(usize, f64)>> = req
            .attention_override
            .as_ref()
            .map(|o| o.iter().map(|w| (w.index, w.weight)).collect());

        let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
        let mut segments = Vec::new();
        let mut pieces = Vec::new();
        for (si, seg) in self.attend(&words, overrides.as_deref())?.into_iter().enumerate() {
            let SegmentAttention { token_offset: offset, tokens: seg, attended: att } = seg;
            let hit = retrieve(&att.feature, &self.library, k, &mut rng)?;
            let clip = &self.library.clips[hit.index];
            let clip = match req.target_duration_s {
                Some(total) => speed_adjust(clip, total * seg.len() as f64 / words.len() as f64)?,
                None => clip.clone(),
            };
            segments.push(SegmentDiagnostics {
                tokens: seg,
                token_offset: offset,
                raw_attention: att.raw_attention,
                attention: att.attention,
                feature: att.feature,
                clip_id: hit.clip_id,
                distance: hit.distance,
                candidates: hit.candidates,
                adjusted_frames: clip.len(),
                span: StitchSpan {
                    segment: si,
                    source_start: 0,
                    source_end: 0,
                    output_start: 0,
                },
            });
            pieces.push(clip);
        }
        let (motion, spans) = spline_stitch_with_spans(&pieces, self.retrieval.blend_window_s)?;
        for (s, span) in segments.iter_mut().zip(spans) {
            s.span = span;
        }
        Ok(Generation {
            motion,
            diagnostics: Diagnostics {
                config_hash: self.config_hash.clone(),
                seed: req.seed,
                k,
                overridden: overrides.is_some(),
                segments,
            },
        })
    }
}

/// Seeded Gaussian random projection of `points` to `dims` coordinates,
/// scaled by `1/√dims`.
pub fn random_projection(points: &[Vec<f64>], dims: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if dims == 0 {
        return Err(Error::invalid("projection needs at least one dimension"));
    }
    let Some(first) = points.first() else {
        return Ok(Vec::new());
    };
    let d = first.len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::invalid("points differ in dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (dims as f64).sqrt();
    let basis: Vec<Vec<f64>> = (0..dims)
        .map(|_| (0..d).map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        }).collect())
        .collect();
    Ok(points
        .iter()
        .map(|p| basis.iter().map(|b| b.iter().zip(p).map(|(x, y)| x * y).sum()).collect())
        .collect())
}

/// Clip ids grouped by cluster, for reporting.
pub fn clusters_of(library: &GestureLibrary) -> BTreeMap<usize, Vec<String>> {
    let mut out: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for e in &library.index.entries {
        if let Some(c) = e.cluster {
            out.entry(c).or_default().push(e.clip_id.clone());
        }
    }
    out
}
