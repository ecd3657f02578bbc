//! Upper-body motion clips, key-pose extraction, time resampling, spline
//! stitching and jerk.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const JOINTS: usize = 8;
pub const POSE_DIM: usize = JOINTS * 3;
/// Joint order of every pose. Positions are relative to the neck.
pub const JOINT_NAMES: [&str; JOINTS] = [
    "spine",
    "head",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
];
/// Sanity bound on the distance of any joint from the neck, in meters.
pub const MAX_JOINT_DISTANCE: f64 = 3.0;
pub const MIN_KEYPOSES: usize = 5;
pub const MAX_KEYPOSES: usize = 12;
/// Half-width of the speed-minimum search window (window of 5 frames).
const MINIMUM_HALF_WINDOW: usize = 2;
pub const DEFAULT_BLEND_WINDOW_S: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pose {
    pub joints: [[f64; 3]; JOINTS],
}

impl Pose {
    pub fn zero() -> Self {
        Self {
            joints: [[0.0; 3]; JOINTS],
        }
    }

    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() != POSE_DIM {
            return Err(Error::invalid(format!(
                "pose needs {POSE_DIM} values, got {}",
                values.len()
            )));
        }
        let mut joints = [[0.0; 3]; JOINTS];
        for (j, joint) in joints.iter_mut().enumerate() {
            joint.copy_from_slice(&values[j * 3..j * 3 + 3]);
        }
        let pose = Self { joints };
        pose.validate()?;
        Ok(pose)
    }

    pub fn flat(&self) -> [f64; POSE_DIM] {
        let mut out = [0.0; POSE_DIM];
        for (j, joint) in self.joints.iter().enumerate() {
            out[j * 3..j * 3 + 3].copy_from_slice(joint);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        for (j, p) in self.joints.iter().enumerate() {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("joint {} is not finite", JOINT_NAMES[j])));
            }
            let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > MAX_JOINT_DISTANCE {
                return Err(Error::invalid(format!(
                    "joint {} is {norm:.3} m from the neck (limit {MAX_JOINT_DISTANCE} m)",
                    JOINT_NAMES[j]
                )));
            }
        }
        Ok(())
    }

    pub fn lerp(&self, other: &Pose, t: f64) -> Pose {
        let mut out = *self;
        for (o, (a, b)) in out.joints.iter_mut().zip(self.joints.iter().zip(&other.joints)) {
            for k in 0..3 {
                o[k] = a[k] + (b[k] - a[k]) * t;
            }
        }
        out
    }

    fn combine(&self, other: &Pose, f: impl Fn(f64, f64) -> f64) -> Pose {
        let mut out = *self;
        for (o, b) in out.joints.iter_mut().zip(&other.joints) {
            for k in 0..3 {
                o[k] = f(o[k], b[k]);
            }
        }
        out
    }

    /// Mean over joints of the Euclidean distance to `other`.
    pub fn mean_joint_distance(&self, other: &Pose) -> f64 {
        self.joints
            .iter()
            .zip(&other.joints)
            .map(|(a, b)| {
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
            })
            .sum::<f64>()
            / JOINTS as f64
    }
}

/// A clip of upper-body poses sampled at a fixed frame rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionClip {
    pub fps: f64,
    pub clip_id: String,
    pub frames: Vec<Pose>,
}

impl MotionClip {
    pub fn new(clip_id: impl Into<String>, fps: f64, frames: Vec<Pose>) -> Result<Self> {
        let clip = Self {
            fps,
            clip_id: clip_id.into(),
            frames,
        };
        clip.validate()?;
        Ok(clip)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::invalid(format!("clip {}: fps must be positive", self.clip_id)));
        }
        if self.frames.len() < 2 {
            return Err(Error::invalid(format!(
                "clip {}: needs at least 2 frames, has {}",
                self.clip_id,
                self.frames.len()
            )));
        }
        for (i, p) in self.frames.iter().enumerate() {
            p.validate()
                .map_err(|e| Error::invalid(format!("clip {} frame {i}: {e}", self.clip_id)))?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Seconds between the first and last frame.
    pub fn duration(&self) -> f64 {
        (self.frames.len() - 1) as f64 / self.fps
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("motion clip serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let clip: MotionClip =
            serde_json::from_str(text).map_err(|e| Error::json("motion clip", e))?;
        clip.validate()?;
        Ok(clip)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::InvalidInput(m) => Error::invalid(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Salient poses of a clip, in temporal order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyPoseSequence {
    pub clip_id: String,
    pub poses: Vec<Pose>,
    pub source_indices: Vec<usize>,
}

impl KeyPoseSequence {
    pub fn new(clip_id: impl Into<String>, poses: Vec<Pose>, source_indices: Vec<usize>) -> Result<Self> {
        let kp = Self {
            clip_id: clip_id.into(),
            poses,
            source_indices,
        };
        kp.validate()?;
        Ok(kp)
    }

    /// Builds a sequence without source indices, e.g. for decoder outputs.
    pub fn from_poses(clip_id: impl Into<String>, poses: Vec<Pose>) -> Result<Self> {
        let n = poses.len();
        Self::new(clip_id, poses, (0..n).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.poses.len();
        if !(MIN_KEYPOSES..=MAX_KEYPOSES).contains(&n) {
            return Err(Error::invalid(format!(
                "key-pose sequence {} has {n} poses, expected {MIN_KEYPOSES}..={MAX_KEYPOSES}",
                self.clip_id
            )));
        }
        if self.source_indices.len() != n {
            return Err(Error::invalid(format!(
                "key-pose sequence {}: {} source indices for {n} poses",
                self.clip_id,
                self.source_indices.len()
            )));
        }
        if self.source_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!(
                "key-pose sequence {}: source indices not strictly increasing",
                self.clip_id
            )));
        }
        for p in &self.poses {
            p.validate()?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Row-major `n × 24` values.
    pub fn flat(&self) -> Vec<f64> {
        self.poses.iter().flat_map(|p| p.flat()).collect()
    }

    /// Repeats the last pose until the sequence has `len` poses. Sequences
    /// already that long are returned unchanged.
    pub fn padded(&self, len: usize) -> Vec<Pose> {
        let mut poses = self.poses.clone();
        if let Some(&last) = poses.last() {
            while poses.len() < len {
                poses.push(last);
            }
        }
        poses
    }
}

/// Per-frame mean joint speed in meters per frame. Every frame uses a
/// two-frame span (central inside, one-sided at the ends) so that jitter
/// inflates all frames alike.
pub fn speed_profile(clip: &MotionClip) -> Vec<f64> {
    let f = &clip.frames;
    let n = f.len();
    if n == 2 {
        let d = f[1].mean_joint_distance(&f[0]);
        return vec![d, d];
    }
    (0..n)
        .map(|t| {
            let (a, b) = if t == 0 {
                (0, 2)
            } else if t == n - 1 {
                (n - 3, n - 1)
            } else {
                (t - 1, t + 1)
            };
            f[b].mean_joint_distance(&f[a]) / 2.0
        })
        .collect()
}

/// Depth of the speed valley at `t`: how far speed must climb, on the lower
/// of the two sides, before reaching a point slower than `t`.
fn valley_depth(speed: &[f64], t: usize) -> f64 {
    let s = speed[t];
    let mut left = s;
    for &v in speed[..t].iter().rev() {
        if v < s {
            break;
        }
        left = left.max(v);
    }
    let mut right = s;
    for &v in &speed[t + 1..] {
        if v < s {
            break;
        }
        right = right.max(v);
    }
    left.min(right) - s
}

/// Interior frames that are minima of the speed profile within a 5-frame
/// window, paired with their valley depth. Plateaus count once, at their
/// first frame.
pub fn speed_minima(speed: &[f64]) -> Vec<(usize, f64)> {
    let n = speed.len();
    let mut out = Vec::new();
    for t in 1..n.saturating_sub(1) {
        let lo = t.saturating_sub(MINIMUM_HALF_WINDOW);
        let hi = (t + MINIMUM_HALF_WINDOW).min(n - 1);
        let s = speed[t];
        if speed[t - 1] <= s || speed[lo..=hi].iter().any(|&v| v < s) {
            continue;
        }
        let depth = valley_depth(speed, t);
        if depth > 1e-12 {
            out.push((t, depth));
        }
    }
    out
}

/// Speed minima shallower than this fraction of the clip's deepest valley
/// are noise, not rests.
pub const MIN_RELATIVE_SALIENCE: f64 = 0.3;

/// Selects between `min_n` and `max_n` key poses: both endpoints, the
/// deepest salient speed minima, then midpoints of the widest gaps if still
/// short.
pub fn extract_keyposes(clip: &MotionClip, min_n: usize, max_n: usize) -> Result<KeyPoseSequence> {
    if min_n < 2 || max_n < min_n {
        return Err(Error::invalid(format!("bad key-pose range {min_n}..={max_n}")));
    }
    let n = clip.frames.len();
    if n < min_n {
        return Err(Error::invalid(format!(
            "clip {} has {n} frames, fewer than {min_n} key poses",
            clip.clip_id
        )));
    }
    let mut minima = speed_minima(&speed_profile(clip));
    minima.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    if let Some(&(_, deepest)) = minima.first() {
        minima.retain(|m| m.1 >= MIN_RELATIVE_SALIENCE * deepest);
    }
    let mut picked: Vec<usize> = vec![0, n - 1];
    picked.extend(minima.iter().take(max_n - 2).map(|m| m.0));
    picked.sort_unstable();
    while picked.len() < min_n {
        let (gap_at, _) = picked
            .windows(2)
            .enumerate()
            .map(|(i, w)| (i, w[1] - w[0]))
            .fold((0, 0), |best, cur| if cur.1 > best.1 { cur } else { best });
        let mid = (picked[gap_at] + picked[gap_at + 1]) / 2;
        picked.insert(gap_at + 1, mid);
    }
    let poses = picked.iter().map(|&i| clip.frames[i]).collect();
    KeyPoseSequence::new(clip.clip_id.clone(), poses, picked)
}

/// Linearly resamples `clip` to exactly `frames` frames spanning the same
/// source interval. Endpoints are copied exactly.
pub fn resample_frames(clip: &MotionClip, frames: usize) -> Result<Vec<Pose>> {
    if frames < 2 {
        return Err(Error::invalid("resampling needs at least 2 output frames"));
    }
    let src = &clip.frames;
    let last = src.len() - 1;
    Ok((0..frames)
        .map(|k| {
            let u = (k * last) as f64 / (frames - 1) as f64;
            let i = u.floor() as usize;
            let frac = u - i as f64;
            if i >= last {
                src[last]
            } else if frac == 0.0 {
                src[i]
            } else {
                src[i].lerp(&src[i + 1], frac)
            }
        })
        .collect())
}

/// Time-stretches `clip` to last `target_duration_s` seconds at its own
/// frame rate.
pub fn speed_adjust(clip: &MotionClip, target_duration_s: f64) -> Result<MotionClip> {
    if !(target_duration_s.is_finite() && target_duration_s > 0.0) {
        return Err(Error::invalid(format!(
            "target duration must be positive, got {target_duration_s}"
        )));
    }
    let frames = ((target_duration_s * clip.fps).round() as usize + 1).max(2);
    Ok(MotionClip {
        fps: clip.fps,
        clip_id: clip.clip_id.clone(),
        frames: resample_frames(clip, frames)?,
    })
}

/// Where the untouched frames of one input segment landed in a stitched clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StitchSpan {
    pub segment: usize,
    /// First copied frame of the segment.
    pub source_start: usize,
    /// One past the last copied frame of the segment.
    pub source_end: usize,
    pub output_start: usize,
}

impl StitchSpan {
    pub fn len(&self) -> usize {
        self.source_end - self.source_start
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Cubic Hermite point on `[0, 1]`, written relative to `p0` so equal
/// endpoints with zero tangents reproduce `p0` exactly.
fn hermite(p0: &Pose, m0: &Pose, p1: &Pose, m1: &Pose, t: f64) -> Pose {
    let t2 = t * t;
    let t3 = t2 * t;
    let h10 = t3 - 2.0 * t2 + t;
    let h01 = -2.0 * t3 + 3.0 * t2;
    let h11 = t3 - t2;
    let mut out = *p0;
    for j in 0..JOINTS {
        for k in 0..3 {
            out.joints[j][k] += h01 * (p1.joints[j][k] - p0.joints[j][k])
                + h10 * m0.joints[j][k]
                + h11 * m1.joints[j][k];
        }
    }
    out
}

/// Bridge frames strictly between `p0` and `p1`, `intervals` frame steps
/// apart. The first and last steps equal the incoming and outgoing
/// per-frame velocities, so the discrete velocity is continuous at both
/// joins.
fn bridge(p0: &Pose, v_in: &Pose, p1: &Pose, v_out: &Pose, intervals: usize) -> Vec<Pose> {
    match intervals {
        0 | 1 => vec![],
        2 => vec![p0.lerp(p1, 0.5)],
        _ => {
            let q0 = p0.combine(v_in, |a, b| a + b);
            let q1 = p1.combine(v_out, |a, b| a - b);
            let span = (intervals - 2) as f64;
            let m0 = v_in.combine(v_in, |a, _| a * span);
            let m1 = v_out.combine(v_out, |a, _| a * span);
            let curve: Vec<Pose> = (1..intervals)
                .map(|s| hermite(&q0, &m0, &q1, &m1, (s - 1) as f64 / span))
                .collect();
            if curve.iter().all(|p| p.validate().is_ok()) {
                curve
            } else {
                // overshoot past the joint limits; a straight blend stays inside
                (1..intervals)
                    .map(|s| p0.lerp(p1, s as f64 / intervals as f64))
                    .collect()
            }
        }
    }
}

/// Concatenates segments, replacing a blend window around each join with a
/// cubic bridge whose end tangents are the neighbouring finite-difference
/// velocities. A bridge that would leave the valid pose range is replaced
/// by a linear one.
pub fn spline_stitch(segments: &[MotionClip]) -> Result<MotionClip> {
    spline_stitch_with_spans(segments, DEFAULT_BLEND_WINDOW_S).map(|(clip, _)| clip)
}

pub fn spline_stitch_with_spans(
    segments: &[MotionClip],
    blend_window_s: f64,
) -> Result<(MotionClip, Vec<StitchSpan>)> {
    let Some(first) = segments.first() else {
        return Err(Error::invalid("spline_stitch needs at least one segment"));
    };
    for s in segments {
        if s.fps != first.fps {
            return Err(Error::invalid(format!(
                "mixed frame rates: {} has {} fps, {} has {} fps",
                first.clip_id, first.fps, s.clip_id, s.fps
            )));
        }
        s.validate()?;
    }
    let window = ((blend_window_s * first.fps).round() as usize).max(1);
    let mut out: Vec<Pose> = first.frames.clone();
    let mut spans = vec![StitchSpan {
        segment: 0,
        source_start: 0,
        source_end: first.frames.len(),
        output_start: 0,
    }];

    for (si, seg) in segments.iter().enumerate().skip(1) {
        let prev = spans.last_mut().expect("at least one span");
        let trim_a = (window / 2).min(prev.len() - 1).min(out.len() - 2);
        let trim_b = (window - window / 2).min(seg.frames.len() - 2);
        out.truncate(out.len() - trim_a);
        prev.source_end -= trim_a;

        let a_end = out.len() - 1;
        let p0 = out[a_end];
        let v_in = p0.combine(&out[a_end - 1], |a, b| a - b);
        let p1 = seg.frames[trim_b];
        let v_out = seg.frames[trim_b + 1].combine(&p1, |a, b| a - b);
        out.extend(bridge(&p0, &v_in, &p1, &v_out, trim_a + trim_b + 1));

        spans.push(StitchSpan {
            segment: si,
            source_start: trim_b,
            source_end: seg.frames.len(),
            output_start: out.len(),
        });
        out.extend_from_slice(&seg.frames[trim_b..]);
    }

    let clip_id = segments
        .iter()
        .map(|s| s.clip_id.as_str())
        .collect::<Vec<_>>()
        .join("+");
    Ok((MotionClip::new(clip_id, first.fps, out)?, spans))
}

/// Mean magnitude of the third time derivative of joint positions, in m/s³.
pub fn jerk(clip: &MotionClip) -> Result<f64> {
    let f = &clip.frames;
    if f.len() < 4 {
        return Err(Error::invalid(format!(
            "jerk needs at least 4 frames, clip {} has {}",
            clip.clip_id,
            f.len()
        )));
    }
    let scale = clip.fps.powi(3);
    let mut total = 0.0;
    let mut count = 0usize;
    for t in 0..f.len() - 3 {
        for j in 0..JOINTS {
            let d: f64 = (0..3)
                .map(|k| {
                    let x = |i: usize| f[t + i].joints[j][k];
                    ((x(3) - x(0)) - 3.0 * (x(2) - x(1))).powi(2)
                })
                .sum::<f64>()
                .sqrt();
            total += d * scale;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip_from(fps: f64, f: impl Fn(usize) -> Pose, n: usize) -> MotionClip {
        MotionClip::new("t", fps, (0..n).map(f).collect()).unwrap()
    }

    fn pose_with(x: f64) -> Pose {
        let mut p = Pose::zero();
        for j in 0..JOINTS {
            p.joints[j] = [x, 0.1 * j as f64, -0.05];
        }
        p
    }

    #[test]
    fn constant_clip_gets_evenly_spaced_keyposes() {
        let clip = clip_from(30.0, |_| pose_with(0.2), 100);
        let kp = extract_keyposes(&clip, 5, 12).unwrap();
        assert_eq!(kp.source_indices, vec![0, 24, 49, 74, 99]);
    }

    #[test]
    fn short_clip_rejected() {
        let clip = clip_from(30.0, |i| pose_with(i as f64 * 0.01), 4);
        assert!(extract_keyposes(&clip, 5, 12).is_err());
    }

    #[test]
    fn pose_bound_enforced() {
        let mut p = Pose::zero();
        p.joints[4] = [3.5, 0.0, 0.0];
        assert!(p.validate().is_err());
        p.joints[4] = [f64::NAN, 0.0, 0.0];
        assert!(p.validate().is_err());
    }

    #[test]
    fn speed_adjust_identity() {
        let clip = clip_from(20.0, |i| pose_with((i as f64 * 0.3).sin() * 0.5), 37);
        let out = speed_adjust(&clip, clip.duration()).unwrap();
        assert_eq!(out, clip);
    }

    #[test]
    fn two_frame_stretch_hits_midpoint() {
        let clip = MotionClip::new("t", 10.0, vec![pose_with(0.0), pose_with(1.0)]).unwrap();
        let out = speed_adjust(&clip, 0.2).unwrap();
        assert_eq!(out.frames.len(), 3);
        assert_eq!(out.frames[1], pose_with(0.0).lerp(&pose_with(1.0), 0.5));
        assert_eq!(out.frames[0], clip.frames[0]);
        assert_eq!(out.frames[2], clip.frames[1]);
    }

    #[test]
    fn speed_adjust_rejects_bad_target() {
        let clip = clip_from(20.0, |_| pose_with(0.0), 5);
        assert!(speed_adjust(&clip, 0.0).is_err());
        assert!(speed_adjust(&clip, -1.0).is_err());
    }

    #[test]
    fn single_segment_is_unchanged() {
        let clip = clip_from(15.0, |i| pose_with(i as f64 * 0.01), 20);
        assert_eq!(spline_stitch(std::slice::from_ref(&clip)).unwrap().frames, clip.frames);
    }

    #[test]
    fn constant_segments_stay_constant() {
        let a = clip_from(15.0, |_| pose_with(0.3), 20);
        let b = clip_from(15.0, |_| pose_with(0.3), 25);
        let out = spline_stitch(&[a, b]).unwrap();
        assert!(out.frames.iter().all(|p| *p == pose_with(0.3)));
        assert_eq!(out.frames.len(), 45);
    }

    #[test]
    fn mixed_fps_rejected() {
        let a = clip_from(15.0, |_| pose_with(0.3), 20);
        let b = clip_from(30.0, |_| pose_with(0.3), 20);
        assert!(spline_stitch(&[a, b]).is_err());
        assert!(spline_stitch(&[]).is_err());
    }

    #[test]
    fn jerk_vanishes_for_constant_velocity() {
        let c = clip_from(30.0, |_| pose_with(0.1), 10);
        assert_eq!(jerk(&c).unwrap(), 0.0);
        let v = clip_from(30.0, |i| pose_with(i as f64 / 64.0), 10);
        assert!(jerk(&v).unwrap().abs() < 1e-9);
        let short = clip_from(30.0, |_| pose_with(0.1), 3);
        assert!(jerk(&short).is_err());
    }

    #[test]
    fn padding_repeats_last_pose() {
        let poses: Vec<Pose> = (0..5).map(|i| pose_with(i as f64 * 0.1)).collect();
        let kp = KeyPoseSequence::from_poses("k", poses.clone()).unwrap();
        let padded = kp.padded(12);
        assert_eq!(padded.len(), 12);
        assert!(padded[5..].iter().all(|p| *p == poses[4]));
        assert_eq!(kp.padded(5), poses);
    }
}
