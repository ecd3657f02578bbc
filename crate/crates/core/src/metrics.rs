//! Evaluation metrics over gesture sets.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gesture_vae::GestureVae;
use crate::motion::{extract_keyposes, jerk, resample_frames, MotionClip, JOINTS};
use crate::ndcore::Scalar;

/// `1/(N·⌈N/2⌉) Σ_{a<b} ‖μ_a − μ_b‖₁`.
pub fn diversity<S: Scalar>(latents: &[Vec<S>]) -> Result<S> {
    let n = latents.len();
    if n < 2 {
        return Err(Error::invalid("diversity needs at least two latents"));
    }
    let dim = latents[0].len();
    if latents.iter().any(|l| l.len() != dim) {
        return Err(Error::invalid("latents differ in dimension"));
    }
    let mut total = S::zero();
    for a in 0..n {
        for b in a + 1..n {
            total = total + latents[a].iter().zip(&latents[b]).map(|(&x, &y)| (x - y).abs()).sum();
        }
    }
    Ok(total / S::lit((n * n.div_ceil(2)) as f64))
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and the matching eigenvectors as columns of a
/// row-major `n × n` matrix.
pub fn symmetric_eigen<S: Scalar>(matrix: &[S], n: usize) -> Result<(Vec<S>, Vec<S>)> {
    if matrix.len() != n * n {
        return Err(Error::Shape {
            op: "symmetric_eigen",
            lhs: vec![matrix.len()],
            rhs: vec![n, n],
        });
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "symmetric_eigen" });
    }
    let mut a = matrix.to_vec();
    let mut v = vec![S::zero(); n * n];
    for i in 0..n {
        v[i * n + i] = S::one();
    }
    let scale: S = a.iter().map(|x| *x * *x).sum::<S>().sqrt();
    let tol = S::epsilon() * S::epsilon() * scale * scale;
    for _sweep in 0..100 {
        let off: S = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == S::zero() {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (S::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + S::one()).sqrt());
                let c = S::one() / (t * t + S::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    Ok(((0..n).map(|i| a[i * n + i]).collect(), v))
}

fn matmul<S: Scalar>(a: &[S], b: &[S], n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                c[i * n + j] = c[i * n + j] + aik * b[k * n + j];
            }
        }
    }
    c
}

/// Singular values by one-sided Jacobi, accurate relative to each value
/// rather than to the largest.
fn singular_values<S: Scalar>(matrix: &[S], n: usize) -> Vec<S> {
    // columns of the transpose, so each column is contiguous
    let mut cols: Vec<Vec<S>> = (0..n).map(|j| (0..n).map(|i| matrix[i * n + j]).collect()).collect();
    let dot = |a: &[S], b: &[S]| a.iter().zip(b).map(|(&x, &y)| x * y).sum::<S>();
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == S::zero() || gamma.abs() <= S::epsilon() * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (S::lit(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (zeta * zeta + S::one()).sqrt());
                let c = S::one() / (t * t + S::one()).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(q);
                for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (a, b) = (*x, *y);
                    *x = c * a - s * b;
                    *y = s * a + c * b;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    cols.iter().map(|c| dot(c, c).sqrt()).collect()
}

/// Eigenvalues of a PSD matrix below `n · 64 ε · λ_max` are round-off and
/// count as zero.
fn clamp_eigs<S: Scalar>(vals: &[S]) -> Vec<S> {
    let top = vals.iter().copied().fold(S::zero(), S::max);
    let floor = top * S::lit(64.0 * vals.len() as f64) * S::epsilon();
    vals.iter().map(|&l| if l <= floor { S::zero() } else { l }).collect()
}

fn psd_sqrt<S: Scalar>(m: &[S], n: usize) -> Result<Vec<S>> {
    let (vals, vecs) = symmetric_eigen(m, n)?;
    let mut out = vec![S::zero(); n * n];
    for (k, &lam) in clamp_eigs(&vals).iter().enumerate() {
        let r = lam.sqrt();
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = out[i * n + j] + r * vecs[i * n + k] * vecs[j * n + k];
            }
        }
    }
    Ok(out)
}

/// Sample mean and unbiased covariance (row-major) of `features`.
pub fn gaussian_fit<S: Scalar>(features: &[Vec<S>]) -> Result<(Vec<S>, Vec<S>)> {
    let n = features.len();
    if n < 2 {
        return Err(Error::invalid("a Gaussian fit needs at least two samples"));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::invalid("features differ in dimension"));
    }
    let nf = S::lit(n as f64);
    let mean: Vec<S> = (0..d).map(|j| features.iter().map(|f| f[j]).sum::<S>() / nf).collect();
    let mut cov = vec![S::zero(); d * d];
    for f in features {
        for i in 0..d {
            let di = f[i] - mean[i];
            for j in 0..d {
                cov[i * d + j] = cov[i * d + j] + di * (f[j] - mean[j]);
            }
        }
    }
    let denom = S::lit((n - 1) as f64);
    cov.iter_mut().for_each(|c| *c = *c / denom);
    Ok((mean, cov))
}

/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2 (Σ_a^{1/2} Σ_b Σ_a^{1/2})^{1/2})`.
pub fn frechet_distance<S: Scalar>(mu_a: &[S], cov_a: &[S], mu_b: &[S], cov_b: &[S]) -> Result<S> {
    let n = mu_a.len();
    if mu_b.len() != n || cov_a.len() != n * n || cov_b.len() != n * n {
        return Err(Error::invalid("Fréchet inputs have inconsistent dimensions"));
    }
    if cov_a.iter().chain(cov_b).chain(mu_a).chain(mu_b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "frechet_distance" });
    }
    let mean_term: S = mu_a.iter().zip(mu_b).map(|(&a, &b)| (a - b) * (a - b)).sum();
    // Tr √(Σa Σb) is the nuclear norm of Σb^½ Σa^½
    let m = matmul(&psd_sqrt(cov_b, n)?, &psd_sqrt(cov_a, n)?, n);
    let tr_sqrt: S = singular_values(&m, n).into_iter().sum();
    let tr_a: S = (0..n).map(|i| cov_a[i * n + i]).sum();
    let tr_b: S = (0..n).map(|i| cov_b[i * n + i]).sum();
    Ok(mean_term + tr_a + tr_b - S::lit(2.0) * tr_sqrt)
}

/// Maps a clip to a fixed-length feature vector.
pub trait FeatureExtractor {
    fn features(&self, clip: &MotionClip) -> Result<Vec<f64>>;
}

/// Latent means of a VAE trained on padded key-pose sequences.
#[derive(Clone, Debug)]
pub struct FgdFeatureModel {
    pub vae: GestureVae,
    pub min_keyposes: usize,
    pub max_keyposes: usize,
}

impl FeatureExtractor for FgdFeatureModel {
    fn features(&self, clip: &MotionClip) -> Result<Vec<f64>> {
        let kp = extract_keyposes(clip, self.min_keyposes, self.max_keyposes)?;
        Ok(self.vae.encode(&kp)?.mu)
    }
}

pub fn fgd(set_a: &[MotionClip], set_b: &[MotionClip], model: &dyn FeatureExtractor) -> Result<f64> {
    let fa = set_a.iter().map(|c| model.features(c)).collect::<Result<Vec<_>>>()?;
    let fb = set_b.iter().map(|c| model.features(c)).collect::<Result<Vec<_>>>()?;
    let (ma, ca) = gaussian_fit(&fa)?;
    let (mb, cb) = gaussian_fit(&fb)?;
    frechet_distance(&ma, &ca, &mb, &cb)
}

/// Resamples `generated` to the frame count (hence duration) of
/// `reference`, then averages the per-joint L1 distance `Σ_xyz |Δ|` over
/// frames and joints.
pub fn l1_metric(generated: &MotionClip, reference: &MotionClip) -> Result<f64> {
    generated.validate()?;
    reference.validate()?;
    let g = resample_frames(generated, reference.len())?;
    let mut total = 0.0;
    for (a, b) in g.iter().zip(&reference.frames) {
        for j in 0..JOINTS {
            total += (0..3).map(|d| (a.joints[j][d] - b.joints[j][d]).abs()).sum::<f64>();
        }
    }
    Ok(total / (reference.len() * JOINTS) as f64)
}

/// Pearson correlation coefficient.
pub fn correlate(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len();
    if n != y.len() || n < 3 {
        return Err(Error::invalid("correlation needs two equal-length series of at least 3"));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("correlation of a constant series"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Area under the ROC curve: probability that a random positive scores
/// above a random negative, ties counting half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::invalid("ROC-AUC needs positives and negatives"));
    }
    let mut wins = 0.0;
    for p in &pos {
        for q in &neg {
            wins += if p > q {
                1.0
            } else if p == q {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    pub name: String,
    pub clips: usize,
    pub diversity: f64,
    pub jerk: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config_hash: String,
    pub sets: Vec<SetMetrics>,
    /// FGD of every later set against the first.
    pub fgd: BTreeMap<String, f64>,
    /// Mean L1 of every later set against the first, over clips with the
    /// same id.
    pub l1: BTreeMap<String, f64>,
    /// Pearson r of per-clip metrics against supplied scores.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub correlations: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        crate::persist::to_json(self)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<24} {:>6} {:>12} {:>12} {:>12} {:>12}", "set", "clips", "diversity", "jerk", "fgd", "l1");
        for (i, s) in self.sets.iter().enumerate() {
            let fmt = |m: Option<&f64>| m.map_or("-".to_string(), |v| format!("{v:.4}"));
            let (f, l) = if i == 0 {
                ("-".to_string(), "-".to_string())
            } else {
                (fmt(self.fgd.get(&s.name)), fmt(self.l1.get(&s.name)))
            };
            let _ = writeln!(
                out,
                "{:<24} {:>6} {:>12.4} {:>12.4} {:>12} {:>12}",
                s.name, s.clips, s.diversity, s.jerk, f, l
            );
        }
        for (k, v) in &self.correlations {
            let _ = writeln!(out, "r({k}) = {v:.4}");
        }
        out
    }
}

/// Mean jerk over a set of clips.
pub fn mean_jerk(clips: &[MotionClip]) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::invalid("no clips"));
    }
    let total: f64 = clips.iter().map(jerk).collect::<Result<Vec<_>>>()?.iter().sum();
    Ok(total / clips.len() as f64)
}

/// Named set of clips to evaluate.
#[derive(Clone, Debug)]
pub struct ClipSet {
    pub name: String,
    pub clips: Vec<MotionClip>,
}

/// Models behind the latent-space metrics.
pub struct ReportModels<'a> {
    /// Gesture VAE whose latent means give diversity.
    pub vae: &'a GestureVae,
    pub fgd: &'a dyn FeatureExtractor,
    pub min_keyposes: usize,
    pub max_keyposes: usize,
}

/// Metrics of every set, FGD and L1 of later sets against the first. With
/// `scores` (clip id to rating), per-clip jerk and L1 of the last set are
/// correlated against the ratings of the clips that have one. A correlation
/// with a constant series is left out.
pub fn metric_report(
    sets: &[ClipSet],
    models: &ReportModels<'_>,
    config_hash: &str,
    scores: Option<&BTreeMap<String, f64>>,
) -> Result<MetricReport> {
    let Some(reference) = sets.first() else {
        return Err(Error::invalid("no clip sets to evaluate"));
    };
    let mut out = MetricReport {
        config_hash: config_hash.to_string(),
        sets: Vec::with_capacity(sets.len()),
        fgd: BTreeMap::new(),
        l1: BTreeMap::new(),
        correlations: BTreeMap::new(),
    };
    let by_id: BTreeMap<&str, &MotionClip> = reference.clips.iter().map(|c| (c.clip_id.as_str(), c)).collect();
    for (i, set) in sets.iter().enumerate() {
        let latents = set
            .clips
            .iter()
            .map(|c| Ok(models.vae.encode(&extract_keyposes(c, models.min_keyposes, models.max_keyposes)?)?.mu))
            .collect::<Result<Vec<_>>>()?;
        out.sets.push(SetMetrics {
            name: set.name.clone(),
            clips: set.clips.len(),
            diversity: diversity(&latents)?,
            jerk: mean_jerk(&set.clips)?,
        });
        if i == 0 {
            continue;
        }
        out.fgd.insert(set.name.clone(), fgd(&reference.clips, &set.clips, models.fgd)?);
        let l1: Vec<f64> = set
            .clips
            .iter()
            .filter_map(|c| by_id.get(c.clip_id.as_str()).map(|r| l1_metric(c, r)))
            .collect::<Result<_>>()?;
        if !l1.is_empty() {
            out.l1.insert(set.name.clone(), l1.iter().sum::<f64>() / l1.len() as f64);
        }
    }
    if let Some(scores) = scores {
        let last = sets.last().expect("non-empty");
        let rated: Vec<(&MotionClip, f64)> = last
            .clips
            .iter()
            .filter_map(|c| scores.get(&c.clip_id).map(|&s| (c, s)))
            .collect();
        let y: Vec<f64> = rated.iter().map(|r| r.1).collect();
        let jerks = rated.iter().map(|r| jerk(r.0)).collect::<Result<Vec<_>>>()?;
        if let Ok(r) = correlate(&jerks, &y) {
            out.correlations.insert("jerk".into(), r);
        }
        if rated.iter().all(|r| by_id.contains_key(r.0.clip_id.as_str())) && sets.len() > 1 {
            let l1 = rated
                .iter()
                .map(|r| l1_metric(r.0, by_id[r.0.clip_id.as_str()]))
                .collect::<Result<Vec<_>>>()?;
            if let Ok(r) = correlate(&l1, &y) {
                out.correlations.insert("l1".into(), r);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::Pose;

    #[test]
    fn diversity_arithmetic() {
        assert_eq!(diversity(&vec![vec![1.0, 2.0]; 3]).unwrap(), 0.0);
        let mut b = vec![0.0; 32];
        b[0] = 1.0;
        assert_eq!(diversity(&[vec![0.0; 32], b]).unwrap(), 0.5);
        assert!(diversity(&[vec![0.0]]).is_err());
    }

    #[test]
    fn eigen_reconstructs() {
        let m = [4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 1.0];
        let (vals, vecs) = symmetric_eigen(&m, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let r: f64 = (0..3).map(|k| vecs[i * 3 + k] * vals[k] * vecs[j * 3 + k]).sum();
                assert!((r - m[i * 3 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frechet_one_dimensional() {
        let d: f64 = frechet_distance(&[0.0], &[1.0], &[1.0], &[1.0]).unwrap();
        assert!((d - 1.0).abs() < 1e-15);
        // N(0, 1) vs N(0, 4): (1 − 2)² = 1
        let d: f64 = frechet_distance(&[0.0], &[1.0], &[0.0], &[4.0]).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn l1_offset_on_one_joint() {
        let a = MotionClip::new("a", 10.0, vec![Pose::zero(); 5]).unwrap();
        let mut b = a.clone();
        for f in &mut b.frames {
            f.joints[2][1] = 0.4;
        }
        assert_eq!(l1_metric(&a, &a).unwrap(), 0.0);
        assert!((l1_metric(&b, &a).unwrap() - 0.4 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn pearson_signs() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((correlate(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        let y: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((correlate(&x, &y).unwrap() + 1.0).abs() < 1e-15);
        assert!(correlate(&x, &[1.0; 4]).is_err());
    }

    #[test]
    fn auc_extremes() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
    }

    #[test]
    fn report_of_a_set_against_itself() {
        use crate::gesture_vae::VaeConfig;
        use crate::ingest::{synth_motion, SynthOptions};
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let opts = SynthOptions::default();
        let clips: Vec<MotionClip> = (0..6).map(|i| synth_motion(&format!("c{i}"), i % 2, &opts, &mut rng).unwrap()).collect();
        let vae = GestureVae::new(VaeConfig { latent_dim: 4, hidden: 6, pad_to: None }, 1).unwrap();
        let fvae = GestureVae::new(VaeConfig { latent_dim: 5, hidden: 6, pad_to: Some(12) }, 2).unwrap();
        let fm = FgdFeatureModel { vae: fvae, min_keyposes: 5, max_keyposes: 12 };
        let models = ReportModels { vae: &vae, fgd: &fm, min_keyposes: 5, max_keyposes: 12 };
        let set = |name: &str| ClipSet { name: name.into(), clips: clips.clone() };
        let scores: BTreeMap<String, f64> = (0..6).map(|i| (format!("c{i}"), i as f64)).collect();
        let r = metric_report(&[set("a"), set("b")], &models, "h", Some(&scores)).unwrap();
        assert!(r.fgd["b"].abs() < 1e-8);
        assert_eq!(r.l1["b"], 0.0);
        assert_eq!((r.sets[0].diversity, r.sets[0].jerk), (r.sets[1].diversity, r.sets[1].jerk));
        assert!(r.correlations.contains_key("jerk"));
        assert!(r.to_table().contains("diversity"));
    }
}
