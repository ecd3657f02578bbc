//! Dataset files: manifest, annotation lines, motion clips and the embedding
//! table, plus a seeded generator of toy datasets with known structure.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.json
//! annotations.jsonl   {"text_id", "text", "labels", "clip", ...} per line
//! embeddings.txt      see EmbeddingTable
//! motions/<id>.json   MotionClip
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violation};
use crate::motion::{MotionClip, Pose, JOINTS};
use crate::persist;
use crate::text_encoder::{tokenize_words, EmbeddingTable};

pub const DATASET_FORMAT: &str = "act2g.dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GestureType {
    Beat,
    Representational,
    NonGesture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub text_id: String,
    pub text: String,
    pub labels: Vec<u8>,
    /// Motion file path relative to the dataset root.
    pub clip: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gesture_type: Option<GestureType>,
    /// Ground-truth family of synthetic samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<usize>,
}

impl Annotation {
    pub fn words(&self) -> Vec<String> {
        tokenize_words(&self.text)
    }

    pub fn labels_f64(&self) -> Vec<f64> {
        self.labels.iter().map(|&l| l as f64).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub annotations: String,
    pub embeddings: String,
    pub splits: Splits,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub annotation: Annotation,
    pub clip: MotionClip,
}

impl Sample {
    pub fn id(&self) -> &str {
        &self.annotation.text_id
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
    pub embeddings: EmbeddingTable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Dataset {
    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id() == id)
    }

    pub fn split(&self, which: Split) -> Vec<&Sample> {
        let ids = match which {
            Split::Train => &self.manifest.splits.train,
            Split::Val => &self.manifest.splits.val,
            Split::Test => &self.manifest.splits.test,
        };
        let index: BTreeMap<&str, &Sample> = self.samples.iter().map(|s| (s.id(), s)).collect();
        ids.iter().filter_map(|id| index.get(id.as_str()).copied()).collect()
    }

    /// Writes every file of the dataset under `root`.
    pub fn save(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        let mut lines = String::new();
        for s in &self.samples {
            lines.push_str(&persist::to_json(&s.annotation));
            lines.push('\n');
            s.clip.save(root.join(&s.annotation.clip))?;
        }
        write_file(&root.join(&self.manifest.annotations), &lines)?;
        self.embeddings.save(root.join(&self.manifest.embeddings))?;
        persist::write_json(root.join("manifest.json"), &self.manifest)
    }

    /// Checks every invariant that does not involve the file system.
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut push = |sample: &str, field: &str, message: String| {
            out.push(Violation {
                sample: sample.to_string(),
                field: field.to_string(),
                message,
            })
        };
        let mut ids = BTreeSet::new();
        for s in &self.samples {
            let a = &s.annotation;
            if !ids.insert(a.text_id.as_str()) {
                push(&a.text_id, "text_id", "duplicate id".into());
            }
            let words = a.words();
            if words.is_empty() {
                push(&a.text_id, "text", "no words".into());
            }
            if a.labels.len() != words.len() {
                push(
                    &a.text_id,
                    "labels",
                    format!("{} labels for {} words", a.labels.len(), words.len()),
                );
            }
            if a.labels.iter().any(|&l| l > 1) {
                push(&a.text_id, "labels", "labels must be 0 or 1".into());
            }
            if a.gesture_type == Some(GestureType::Representational) && !a.labels.contains(&1) {
                push(&a.text_id, "labels", "representational sample without a labeled word".into());
            }
            if let Err(e) = s.clip.validate() {
                push(&a.text_id, "clip", e.to_string());
            }
        }
        let sp = &self.manifest.splits;
        let mut seen = BTreeSet::new();
        for (name, list) in [("train", &sp.train), ("val", &sp.val), ("test", &sp.test)] {
            for id in list {
                if !ids.contains(id.as_str()) {
                    push(id, "splits", format!("{name} lists an unknown sample"));
                }
                if !seen.insert(id.as_str()) {
                    push(id, "splits", "listed in more than one split".into());
                }
            }
        }
        for id in &ids {
            if !seen.contains(id) {
                push(id, "splits", "not assigned to any split".into());
            }
        }
        out
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads and validates a dataset. Any violation fails the whole load; the
/// error lists all of them.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest: Manifest = persist::read_json(manifest_path)?;
    persist::check_header(&manifest.format, manifest.version, DATASET_FORMAT, DATASET_VERSION)?;
    let ann_path = root.join(&manifest.annotations);
    let text = std::fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let embeddings = EmbeddingTable::load(root.join(&manifest.embeddings))?;

    let mut violations = Vec::new();
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let a: Annotation = match serde_json::from_str(line) {
            Ok(a) => a,
            Err(e) => {
                violations.push(Violation {
                    sample: format!("line {}", i + 1),
                    field: "annotation".into(),
                    message: e.to_string(),
                });
                continue;
            }
        };
        let clip_path: PathBuf = root.join(&a.clip);
        match MotionClip::load(&clip_path) {
            Ok(clip) => samples.push(Sample { annotation: a, clip }),
            Err(e) => violations.push(Violation {
                sample: a.text_id.clone(),
                field: "clip".into(),
                message: format!("{}: {e}", clip_path.display()),
            }),
        }
    }
    let ds = Dataset {
        manifest,
        samples,
        embeddings,
    };
    violations.extend(ds.violations());
    if violations.is_empty() {
        Ok(ds)
    } else {
        Err(Error::Validation(violations))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub families: usize,
    pub per_family: usize,
    pub embed_dim: usize,
    pub fps: f64,
    /// Standard deviation of per-frame joint jitter.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            families: 4,
            per_family: 50,
            embed_dim: 768,
            fps: 15.0,
            jitter: 0.005,
            seed: 0,
        }
    }
}

const KEYWORDS: [&str; 12] = [
    "ball", "wave", "huge", "push", "circle", "up", "throw", "small", "open", "stop", "turn", "fall",
];

const FILLERS: [&str; 40] = [
    "the", "a", "and", "so", "then", "we", "you", "it", "is", "was", "this", "that", "really", "just", "like",
    "very", "about", "with", "for", "of", "to", "in", "on", "at", "my", "our", "they", "there", "here", "now",
    "well", "maybe", "some", "all", "what", "when", "how", "because", "also", "i",
];

pub fn family_keyword(family: usize) -> String {
    match KEYWORDS.get(family) {
        Some(w) => w.to_string(),
        None => format!("keyword{family}"),
    }
}

pub fn filler_words() -> &'static [&'static str] {
    &FILLERS
}

/// Neck-relative rest pose.
pub fn rest_pose() -> Pose {
    Pose {
        joints: [
            [0.0, -0.5, 0.0],
            [0.0, 0.25, 0.0],
            [-0.2, 0.0, 0.0],
            [-0.25, -0.3, 0.0],
            [-0.25, -0.55, 0.05],
            [0.2, 0.0, 0.0],
            [0.25, -0.3, 0.0],
            [0.25, -0.55, 0.05],
        ],
    }
}

/// Wrist displacement at the peak of a stroke of `family`, and the arm
/// (0 right, 1 left) that performs it.
pub fn family_stroke(family: usize, families: usize) -> ([f64; 3], usize) {
    let theta = 2.0 * PI * family as f64 / families as f64 + PI / 4.0;
    let arm = family % 2;
    let side = if arm == 0 { -1.0 } else { 1.0 };
    let dir = [side * 0.45 * theta.cos().abs() + 0.1 * theta.cos(), 0.45 * theta.sin(), 0.3 * (2.0 * theta).cos()];
    (dir, arm)
}

fn smooth(t: f64) -> f64 {
    0.5 - 0.5 * (PI * t.clamp(0.0, 1.0)).cos()
}

/// One clip of `family`: two strokes out to the family target and back,
/// with random timing, amplitude and per-frame jitter.
pub fn synth_motion(clip_id: &str, family: usize, opts: &SynthOptions, rng: &mut ChaCha8Rng) -> Result<MotionClip> {
    let frames = rng.random_range(45..=75usize);
    let (dir, arm) = family_stroke(family, opts.families);
    let amp = 1.0 + 0.1 * rng.random_range(-1.0..1.0);
    let jitter = Normal::new(0.0, opts.jitter.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    // phases: rest, out, hold, back, rest, out, hold, back, rest
    let mut weights = [1.0, 2.0, 1.0, 2.0, 0.6, 2.0, 1.0, 2.0, 1.0];
    for w in weights.iter_mut() {
        *w *= 1.0 + 0.2 * rng.random_range(-1.0..1.0);
    }
    let total: f64 = weights.iter().sum();
    let mut bounds = vec![0.0];
    for w in weights {
        bounds.push(bounds.last().unwrap() + w / total);
    }
    let level = |u: f64| -> f64 {
        let phase = bounds.windows(2).position(|b| u < b[1]).unwrap_or(8);
        let local = (u - bounds[phase]) / (bounds[phase + 1] - bounds[phase]);
        match phase {
            1 | 5 => smooth(local),
            2 | 6 => 1.0,
            3 | 7 => 1.0 - smooth(local),
            _ => 0.0,
        }
    };
    let rest = rest_pose();
    let (elbow, wrist) = if arm == 0 { (3, 4) } else { (6, 7) };
    let mut poses = Vec::with_capacity(frames);
    for f in 0..frames {
        let s = amp * level(f as f64 / (frames - 1) as f64);
        let mut p = rest;
        for d in 0..3 {
            p.joints[wrist][d] += s * dir[d];
            p.joints[elbow][d] += 0.5 * s * dir[d];
        }
        for j in 0..JOINTS {
            for d in 0..3 {
                p.joints[j][d] += jitter.sample(rng);
            }
        }
        poses.push(p);
    }
    MotionClip::new(clip_id, opts.fps, poses)
}

fn unit_with_salience(rng: &mut ChaCha8Rng, dim: usize, salience: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v[1..].iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let scale = (1.0 - salience * salience).max(0.0).sqrt() / norm;
    v.iter_mut().for_each(|x| *x *= scale);
    v[0] = salience;
    v
}

/// Seeded toy dataset. Each family pairs one keyword, placed among filler
/// words and labeled 1, with a motion template. Word vectors put keywords at
/// `+0.5` and fillers at `−0.5` on the first coordinate, so keywords are
/// linearly separable from fillers.
pub fn synth_dataset(opts: &SynthOptions) -> Result<Dataset> {
    if opts.families < 2 {
        return Err(Error::invalid("synthetic data needs at least two families"));
    }
    if opts.per_family == 0 || opts.embed_dim < 2 || !(opts.fps > 0.0) {
        return Err(Error::invalid("bad synthetic dataset options"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut embeddings = EmbeddingTable::new(opts.embed_dim);
    for f in 0..opts.families {
        embeddings.insert(family_keyword(f), unit_with_salience(&mut rng, opts.embed_dim, 0.5))?;
    }
    for w in FILLERS {
        embeddings.insert(w, unit_with_salience(&mut rng, opts.embed_dim, -0.5))?;
    }

    let mut samples = Vec::new();
    let mut splits = Splits::default();
    for f in 0..opts.families {
        let mut ids = Vec::with_capacity(opts.per_family);
        for i in 0..opts.per_family {
            let id = format!("f{f:02}_{i:03}");
            let len = rng.random_range(2..=7usize);
            let key_at = rng.random_range(0..len);
            let mut words = Vec::with_capacity(len);
            let mut labels = Vec::with_capacity(len);
            for k in 0..len {
                if k == key_at {
                    words.push(family_keyword(f));
                    labels.push(1);
                } else {
                    words.push(FILLERS[rng.random_range(0..FILLERS.len())].to_string());
                    labels.push(0);
                }
            }
            let clip = synth_motion(&id, f, opts, &mut rng)?;
            samples.push(Sample {
                annotation: Annotation {
                    text_id: id.clone(),
                    text: words.join(" "),
                    labels,
                    clip: format!("motions/{id}.json"),
                    gesture_type: Some(GestureType::Representational),
                    family: Some(f),
                },
                clip,
            });
            ids.push(id);
        }
        ids.shuffle(&mut rng);
        let n = ids.len();
        let n_train = (0.8 * n as f64).round() as usize;
        let n_val = (0.1 * n as f64).round() as usize;
        splits.train.extend_from_slice(&ids[..n_train]);
        splits.val.extend_from_slice(&ids[n_train..(n_train + n_val).min(n)]);
        splits.test.extend_from_slice(&ids[(n_train + n_val).min(n)..]);
    }
    Ok(Dataset {
        manifest: Manifest {
            format: DATASET_FORMAT.to_string(),
            version: DATASET_VERSION,
            seed: opts.seed,
            annotations: "annotations.jsonl".into(),
            embeddings: "embeddings.txt".into(),
            splits,
        },
        samples,
        embeddings,
    })
}
