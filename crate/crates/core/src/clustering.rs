//! K-Means over latent means and the positive matrix derived from it.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::Scalar;
use crate::persist;

pub const MAX_LLOYD_ITERS: usize = 300;
/// Independent k-means++ starts; the fit with the lowest final SSE wins.
pub const RESTARTS: usize = 10;

/// Result of K-Means on bare points.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit<S> {
    pub centroids: Vec<Vec<S>>,
    pub labels: Vec<usize>,
    /// Within-cluster SSE after initialization and after every Lloyd step.
    pub sse_trace: Vec<S>,
    pub iterations: usize,
}

fn sq_dist<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

fn nearest<S: Scalar>(p: &[S], centroids: &[Vec<S>]) -> (usize, S) {
    let mut best = (0, S::infinity());
    for (c, mu) in centroids.iter().enumerate() {
        let d = sq_dist(p, mu);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn sse<S: Scalar>(points: &[Vec<S>], centroids: &[Vec<S>], labels: &[usize]) -> S {
    points
        .iter()
        .zip(labels)
        .map(|(p, &l)| sq_dist(p, &centroids[l]))
        .sum()
}

fn plus_plus_init<S: Scalar>(points: &[Vec<S>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<S>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<S> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: S = d2.iter().copied().sum();
        let pick = if total > S::zero() {
            let mut r = S::lit(rng.random::<f64>()) * total;
            let mut idx = d2.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > S::zero() && r < w {
                    idx = i;
                    break;
                }
                r = r - w;
            }
            idx
        } else {
            // every point coincides with a centroid already
            rng.random_range(0..points.len())
        };
        centroids.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            let nd = sq_dist(p, &centroids[centroids.len() - 1]);
            if nd < *d {
                *d = nd;
            }
        }
    }
    centroids
}

/// Best of [`RESTARTS`] runs of [`kmeans_once`], each seeded from `seed`.
/// Ties go to the earliest run.
pub fn kmeans_points<S: Scalar>(points: &[Vec<S>], k: usize, seed: u64) -> Result<KMeansFit<S>> {
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansFit<S>> = None;
    for _ in 0..RESTARTS {
        let fit = kmeans_once(points, k, seeds.random())?;
        let better = match &best {
            Some(b) => fit.final_sse() < b.final_sse(),
            None => true,
        };
        if better {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

impl<S: Scalar> KMeansFit<S> {
    pub fn final_sse(&self) -> S {
        *self.sse_trace.last().expect("trace starts at initialization")
    }
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or [`MAX_LLOYD_ITERS`] is reached.
pub fn kmeans_once<S: Scalar>(points: &[Vec<S>], k: usize, seed: u64) -> Result<KMeansFit<S>> {
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    if points.len() < k {
        return Err(Error::invalid(format!(
            "k-means needs at least k={k} points, got {}",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::invalid("k-means points have mixed dimensions"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
    let mut trace = vec![sse(points, &centroids, &labels)];
    let mut iterations = 0;

    while iterations < MAX_LLOYD_ITERS {
        iterations += 1;
        let mut sums = vec![vec![S::zero(); dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, &v) in sums[l].iter_mut().zip(p) {
                *s = *s + v;
            }
        }
        for c in 0..k {
            // an empty cluster keeps its old centroid
            if counts[c] > 0 {
                let n = S::lit(counts[c] as f64);
                centroids[c] = sums[c].iter().map(|&s| s / n).collect();
            }
        }
        let next: Vec<usize> = points
            .iter()
            .zip(&labels)
            .map(|(p, &l)| {
                let (c, d) = nearest(p, &centroids);
                // ties keep the current label so the sweep terminates
                if d < sq_dist(p, &centroids[l]) {
                    c
                } else {
                    l
                }
            })
            .collect();
        let changed = next != labels;
        labels = next;
        trace.push(sse(points, &centroids, &labels));
        if !changed {
            break;
        }
    }
    Ok(KMeansFit {
        centroids,
        labels,
        sse_trace: trace,
        iterations,
    })
}

/// Fitted clustering of clip latents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub k: usize,
    pub seed: u64,
    pub centroids: Vec<Vec<f64>>,
    pub assignments: BTreeMap<String, usize>,
    pub sse_trace: Vec<f64>,
}

pub const CLUSTER_FORMAT: &str = "act2g.clusters";
pub const CLUSTER_VERSION: u32 = 1;

pub fn kmeans(latents: &[(String, Vec<f64>)], k: usize, seed: u64, config_hash: &str) -> Result<ClusterModel> {
    let points: Vec<Vec<f64>> = latents.iter().map(|(_, mu)| mu.clone()).collect();
    let fit = kmeans_points(&points, k, seed)?;
    let mut assignments = BTreeMap::new();
    for ((id, _), &l) in latents.iter().zip(&fit.labels) {
        if assignments.insert(id.clone(), l).is_some() {
            return Err(Error::invalid(format!("duplicate clip id {id}")));
        }
    }
    Ok(ClusterModel {
        format: CLUSTER_FORMAT.to_string(),
        version: CLUSTER_VERSION,
        config_hash: config_hash.to_string(),
        k,
        seed,
        centroids: fit.centroids,
        assignments,
        sse_trace: fit.sse_trace,
    })
}

impl ClusterModel {
    pub fn cluster_of(&self, id: &str) -> Result<usize> {
        self.assignments
            .get(id)
            .copied()
            .ok_or_else(|| Error::invalid(format!("clip {id} has no cluster assignment")))
    }

    /// Index of the nearest centroid.
    pub fn predict(&self, point: &[f64]) -> usize {
        nearest(point, &self.centroids).0
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        persist::write_json(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m: Self = persist::read_json(path)?;
        persist::check_header(&m.format, m.version, CLUSTER_FORMAT, CLUSTER_VERSION)?;
        if m.assignments.values().any(|&c| c >= m.k) || m.centroids.len() != m.k {
            return Err(Error::Format {
                what: "cluster model",
                message: "assignment or centroid count out of range".into(),
            });
        }
        Ok(m)
    }
}

/// Square 0/1 matrix over a batch: `P[i][j] = 1` iff items `i` and `j` share
/// a cluster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositiveMatrix {
    pub ids: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub negatives: usize,
}

impl PositiveMatrix {
    pub fn from_labels(ids: Vec<String>, labels: &[usize]) -> Self {
        let b = labels.len();
        let mut negatives = 0;
        let values = (0..b)
            .map(|i| {
                (0..b)
                    .map(|j| {
                        if labels[i] == labels[j] {
                            1.0
                        } else {
                            negatives += 1;
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        Self { ids, values, negatives }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }
}

pub fn positive_matrix(model: &ClusterModel, ids: &[String]) -> Result<PositiveMatrix> {
    let labels: Vec<usize> = ids.iter().map(|id| model.cluster_of(id)).collect::<Result<_>>()?;
    Ok(PositiveMatrix::from_labels(ids.to_vec(), &labels))
}

/// Fraction of points whose cluster's majority class matches their own.
pub fn purity(labels: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(labels.len(), truth.len(), "purity inputs differ in length");
    if labels.is_empty() {
        return 1.0;
    }
    let mut table: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for (&l, &t) in labels.iter().zip(truth) {
        *table.entry(l).or_default().entry(t).or_default() += 1;
    }
    let hits: usize = table.values().map(|row| row.values().max().copied().unwrap_or(0)).sum();
    hits as f64 / labels.len() as f64
}
