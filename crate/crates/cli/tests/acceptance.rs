//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use act2g::commands::load_generator;
use act2g::service::router;
use act2g_core::clustering::{kmeans_once, kmeans_points, purity, ClusterModel};
use act2g_core::config::PipelineConfig;
use act2g_core::contrastive::{
    batch_loss_on, contrastive_loss, contrastive_on, distance_matrix_on, pair_distance_means,
    sample_reconstruction_on, Act2gCheckpoint, GestureEncoder, GestureEncoderConfig, LossWeights, PairedSample,
};
use act2g_core::gesture_vae::{elbo_on, kl_divergence, GestureVae, VaeConfig};
use act2g_core::ingest::{family_keyword, filler_words, load_dataset, Split};
use act2g_core::metrics::{diversity, frechet_distance, gaussian_fit, roc_auc};
use act2g_core::motion::{extract_keyposes, jerk, speed_adjust, spline_stitch_with_spans, MotionClip, Pose, JOINTS, POSE_DIM};
use act2g_core::ndcore::gradcheck::{check, GradCheckOptions};
use act2g_core::ndcore::Var;
use act2g_core::retrieval::{GenerationRequest, GestureLibrary};
use act2g_core::text_encoder::{attention_bce_on, normalize_attention, EmbeddingProvider, TextEncoder, TextEncoderConfig};
use act2g_core::{Tape, Tensor};
use axum::body::Body;
use axum::http::Request;
use http_body_util::BodyExt;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tower::ServiceExt;

type Outcome = Result<String, String>;

struct Suite {
    failed: usize,
}

impl Suite {
    fn run(&mut self, name: &str, f: impl FnOnce() -> Outcome) {
        let t = Instant::now();
        let out = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(r) => r,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        let secs = t.elapsed().as_secs_f64();
        match out {
            Ok(detail) => println!("PASS  {name}  ({detail}; {secs:.1} s)"),
            Err(detail) => {
                self.failed += 1;
                println!("FAIL  {name}  ({detail}; {secs:.1} s)");
            }
        }
    }
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

// ---------------------------------------------------------------- gradients

fn poses(rng: &mut ChaCha8Rng, n: usize) -> Vec<Pose> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..POSE_DIM).map(|_| rng.random_range(-0.5..0.5)).collect();
            Pose::from_flat(&v).unwrap()
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn small_text() -> TextEncoderConfig {
    TextEncoderConfig {
        max_tokens: 5,
        embed_dim: 6,
        hidden: 5,
        feature_dim: 3,
        padding_floor: 1e-4,
    }
}

fn grad_opts(seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        seed,
        max_coords: 12,
        ..GradCheckOptions::default()
    }
}

fn gradient_integrity() -> Outcome {
    let t0 = Instant::now();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |name: &'static str, e: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(e);
    };
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let vae = GestureVae::new(VaeConfig { latent_dim: 3, hidden: 4, pad_to: None }, seed).unwrap();
        let n = rng.random_range(5..=7);
        let p = poses(&mut rng, n);
        let eps: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let target = vae.target(&p).unwrap();
        let r = check(
            vae.params().tensors(),
            |tape: &mut Tape, vars: &[Var]| {
                let enc = vae.encode_on(tape, vars, &p)?;
                let z = vae.reparameterize_on(tape, enc, eps.clone())?;
                let out = vae.decode_on(tape, vars, z, n)?;
                let t = tape.constant(target.clone());
                Ok(elbo_on(tape, t, out, enc.mu, enc.log_sigma)?.2)
            },
            grad_opts(seed),
        )
        .unwrap();
        note("elbo", r.max_relative_error());

        let enc = TextEncoder::new(small_text(), seed).unwrap();
        let nw = rng.random_range(1..=5);
        let w = uniform(&mut rng, &[nw, 6], 1.0);
        let labels: Vec<f64> = (0..nw).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
        let r = check(
            enc.params().tensors(),
            |tape: &mut Tape, vars: &[Var]| {
                let wv = tape.constant(w.clone());
                let tv = enc.encode_on(tape, vars, wv, None)?;
                attention_bce_on(tape, tv.raw, &labels)
            },
            grad_opts(seed),
        )
        .unwrap();
        note("attention bce", r.max_relative_error());

        let b = rng.random_range(2..=5);
        let feats: Vec<Tensor> = (0..2 * b).map(|_| uniform(&mut rng, &[4], 2.0)).collect();
        let cl: Vec<usize> = (0..b).map(|_| rng.random_range(0..2)).collect();
        let pm: Vec<f64> = cl.iter().flat_map(|a| cl.iter().map(move |c| f64::from(u8::from(a == c)))).collect();
        let r = check(
            &feats,
            |tape: &mut Tape, vars: &[Var]| {
                let d = distance_matrix_on(tape, &vars[..b], &vars[b..])?;
                Ok(contrastive_on(tape, &pm, d, 3.0)?.2)
            },
            grad_opts(seed),
        )
        .unwrap();
        note("contrastive", r.max_relative_error());

        let g = GestureEncoder::new(GestureEncoderConfig { hidden: 4, feature_dim: 3 }, seed).unwrap();
        let n = rng.random_range(5..=7);
        let p = poses(&mut rng, n);
        let flat: Vec<f64> = p.iter().flat_map(|q| q.flat()).collect();
        let target = Tensor::matrix(n, POSE_DIM, flat).unwrap();
        let r = check(
            g.params().tensors(),
            |tape: &mut Tape, vars: &[Var]| {
                let f = g.encode_on(tape, vars, &p)?;
                let out = g.decode_on(tape, vars, f, n)?;
                let t = tape.constant(target.clone());
                sample_reconstruction_on(tape, out, t)
            },
            grad_opts(seed),
        )
        .unwrap();
        note("reconstruction", r.max_relative_error());

        let text = TextEncoder::new(small_text(), seed).unwrap();
        let gesture = GestureEncoder::new(GestureEncoderConfig { hidden: 4, feature_dim: 3 }, seed + 100).unwrap();
        let samples: Vec<PairedSample> = (0..3)
            .map(|i| {
                let n = rng.random_range(1..=5);
                PairedSample {
                    id: format!("s{i}"),
                    words: uniform(&mut rng, &[n, 6], 1.0),
                    labels: (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect(),
                    keyposes: poses(&mut rng, 5),
                    cluster: i % 2,
                }
            })
            .collect();
        let batch: Vec<&PairedSample> = samples.iter().collect();
        let weights = LossWeights { alpha: 10.0, beta: 2.0, margin: 2.0 };
        let mut inputs: Vec<Tensor> = text.params().tensors().to_vec();
        let nt = inputs.len();
        inputs.extend_from_slice(gesture.params().tensors());
        let r = check(
            &inputs,
            |tape: &mut Tape, vars: &[Var]| Ok(batch_loss_on(tape, &text, &vars[..nt], &gesture, &vars[nt..], &batch, weights)?.0),
            grad_opts(seed),
        )
        .unwrap();
        note("total objective", r.max_relative_error());
    }
    let secs = t0.elapsed().as_secs_f64();
    let max = worst.values().cloned().fold(0.0, f64::max);
    let detail = format!("20 seeds x 5 losses, max relative error {max:.2e}, {secs:.1} s");
    ensure(max < 1e-4, format!("{detail}: {worst:?}"))?;
    ensure(secs < 60.0, format!("{detail}: over 60 s"))?;
    Ok(detail)
}

// ----------------------------------------------------------------- oracles

fn random_features(rng: &mut ChaCha8Rng, n: usize, d: usize, shift: f64) -> Vec<Vec<f64>> {
    let mix: Vec<f64> = (0..d * d).map(|_| normal(rng) * 0.5).collect();
    (0..n)
        .map(|_| {
            let e: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
            (0..d).map(|i| shift + e[i] + (0..d).map(|k| mix[i * d + k] * e[k]).sum::<f64>()).collect()
        })
        .collect()
}

fn nalgebra_frechet(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let d = a[0].len();
    let fit = |x: &[Vec<f64>]| {
        let m = DMatrix::from_fn(x.len(), d, |i, j| x[i][j]);
        let mean = m.row_mean();
        let c = DMatrix::from_fn(x.len(), d, |i, j| m[(i, j)] - mean[j]);
        (mean, c.transpose() * &c / (x.len() as f64 - 1.0))
    };
    let (ma, ca) = fit(a);
    let (mb, cb) = fit(b);
    let tr: f64 = (&ca * &cb).complex_eigenvalues().iter().map(|c| c.re.max(0.0).sqrt()).sum();
    (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * tr
}

fn closed_form_oracles() -> Outcome {
    ensure(kl_divergence(&[0.0; 32], &[1.0; 32]) == 0.0, "KL(0, 1) is not 0")?;
    let mu = [0.7, -1.2, 0.1, 0.4];
    let sigma = [0.5, 1.6, 0.9, 0.3];
    let exact = kl_divergence(&mu, &sigma);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let draws = 1_000_000;
    let mut acc = 0.0;
    for _ in 0..draws {
        for d in 0..4 {
            let e = normal(&mut rng);
            let z = mu[d] + sigma[d] * e;
            acc += -0.5 * e * e - sigma[d].ln() + 0.5 * z * z;
        }
    }
    let kl_err = (acc / draws as f64 - exact).abs() / exact;
    ensure(kl_err < 0.01, format!("KL Monte-Carlo relative error {kl_err}"))?;

    let mut worst_sum = 0.0f64;
    for _ in 0..10_000 {
        let n = rng.random_range(1..=32);
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(1e-4..1.0)).collect();
        worst_sum = worst_sum.max((normalize_attention(&raw).iter().sum::<f64>() - 1.0).abs());
    }
    ensure(worst_sum < 1e-12, format!("attention sum off by {worst_sum}"))?;

    let mut worst_c = 0.0f64;
    for _ in 0..1000 {
        let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..3)).collect();
        let p: Vec<Vec<f64>> = labels.iter().map(|a| labels.iter().map(|b| f64::from(u8::from(a == b))).collect()).collect();
        let d: Vec<Vec<f64>> = (0..3).map(|_| (0..3).map(|_| rng.random_range(0.0..30.0)).collect()).collect();
        let m = rng.random_range(0.0..25.0);
        let mut want = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                want += if p[i][j] == 1.0 {
                    0.5 * d[i][j] * d[i][j]
                } else {
                    0.5 * (m - d[i][j]).max(0.0).powi(2)
                };
            }
        }
        want /= 3.0;
        let got = contrastive_loss(&p, &d, m).unwrap().total;
        worst_c = worst_c.max((got - want).abs() / want.max(1.0));
    }
    ensure(worst_c <= 1e-12, format!("contrastive vs loop {worst_c:e}"))?;

    let mut self_fgd = 0.0f64;
    for (n, d) in [(100, 8), (20, 32), (300, 256)] {
        let a = random_features(&mut rng, n, d, 1.0);
        let (m, c) = gaussian_fit(&a).unwrap();
        self_fgd = self_fgd.max(frechet_distance(&m, &c, &m, &c).unwrap().abs());
    }
    ensure(self_fgd < 1e-8, format!("fgd(X, X) = {self_fgd:e}"))?;
    let mut worst_f = 0.0f64;
    for (d, shift) in [(3, 0.0), (3, 1.0), (8, 0.5), (16, 2.0)] {
        let a = random_features(&mut rng, 200, d, 0.0);
        let b = random_features(&mut rng, 150, d, shift);
        let (ma, ca) = gaussian_fit(&a).unwrap();
        let (mb, cb) = gaussian_fit(&b).unwrap();
        worst_f = worst_f.max((frechet_distance(&ma, &ca, &mb, &cb).unwrap() - nalgebra_frechet(&a, &b)).abs());
    }
    ensure(worst_f < 1e-6, format!("fgd vs independent oracle {worst_f:e}"))?;

    let mut worst_d = 0.0f64;
    for n in [2usize, 5, 10] {
        let z: Vec<Vec<f64>> = (0..n).map(|_| (0..32).map(|_| normal(&mut rng)).collect()).collect();
        let mut total = 0.0;
        for a in 0..n {
            for b in a + 1..n {
                for k in 0..32 {
                    total += (z[a][k] - z[b][k]).abs();
                }
            }
        }
        let want = total / (n * n.div_ceil(2)) as f64;
        worst_d = worst_d.max((diversity(&z).unwrap() - want).abs() / want);
    }
    ensure(worst_d <= 1e-12, format!("diversity vs triple loop {worst_d:e}"))?;
    Ok(format!(
        "KL MC err {kl_err:.1e}, sum err {worst_sum:.0e}, contrastive {worst_c:.0e}, fgd(X,X) {self_fgd:.0e}, fgd oracle {worst_f:.0e}, diversity {worst_d:.0e}"
    ))
}

// --------------------------------------------------------------- clustering

fn clustering() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for trial in 0..200u64 {
        let n = rng.random_range(8..60);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(-10.0..10.0)).collect()).collect();
        let fit = kmeans_once(&pts, rng.random_range(1..6), trial).unwrap();
        for w in fit.sse_trace.windows(2) {
            ensure(w[1] <= w[0] * (1.0 + 1e-12), format!("SSE rose in trial {trial}: {:?}", fit.sse_trace))?;
        }
    }
    // 10σ-separated blobs
    let centers = [[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [0.0, 10.0, 0.0], [0.0, 0.0, 10.0], [10.0, 10.0, 10.0]];
    let mut pts = Vec::new();
    let mut truth = Vec::new();
    for (c, ctr) in centers.iter().enumerate() {
        for _ in 0..40 {
            pts.push(ctr.iter().map(|&x| x + normal(&mut rng)).collect::<Vec<f64>>());
            truth.push(c);
        }
    }
    let fit = kmeans_points(&pts, 5, 3).unwrap();
    let pu = purity(&fit.labels, &truth);
    ensure(pu == 1.0, format!("blob purity {pu}"))?;
    ensure(fit == kmeans_points(&pts, 5, 3).unwrap(), "same seed gave a different fit")?;
    Ok("200 monotone traces, blob purity 1.0, deterministic".into())
}

// ------------------------------------------------------------------- motion

fn analytic(fps: f64, n: usize, f: impl Fn(f64) -> [f64; 3]) -> MotionClip {
    let frames = (0..n)
        .map(|i| {
            let v = f(i as f64 / fps);
            let mut p = Pose::zero();
            for j in 0..JOINTS {
                p.joints[j] = [v[0] + 0.05 * j as f64, v[1], v[2]];
            }
            p
        })
        .collect();
    MotionClip::new("a", fps, frames).unwrap()
}

fn velocity_jump(c: &MotionClip, i: usize) -> f64 {
    let f = &c.frames;
    let mut worst = 0.0f64;
    for j in 0..JOINTS {
        for k in 0..3 {
            let a = f[i].joints[j][k] - f[i - 1].joints[j][k];
            let b = f[i + 1].joints[j][k] - f[i].joints[j][k];
            worst = worst.max((b - a).abs());
        }
    }
    worst
}

fn motion_guarantees() -> Outcome {
    let a = analytic(15.0, 30, |t| [0.1 * t, -0.2 * t, 0.0]);
    let b = analytic(15.0, 25, |t| [0.5 - 0.3 * t, 0.1, 0.05 * t]);
    let c = analytic(15.0, 20, |t| [-0.4, 0.2 * t, -0.1]);
    let (out, spans) = spline_stitch_with_spans(&[a, b, c], 0.25).unwrap();
    let mut jump = 0.0f64;
    for w in spans.windows(2) {
        jump = jump.max(velocity_jump(&out, w[0].output_start + w[0].len() - 1));
        jump = jump.max(velocity_jump(&out, w[1].output_start));
    }
    ensure(jump < 1e-6, format!("velocity jump {jump:e}"))?;

    let still = analytic(30.0, 10, |_| [0.2, 0.1, 0.0]);
    ensure(jerk(&still).unwrap() == 0.0, "jerk of a constant pose")?;
    let cubic = analytic(30.0, 42, |t| [t * t * t, 0.0, 0.0]);
    let j = jerk(&cubic).unwrap();
    ensure((j - 6.0).abs() < 1e-6, format!("cubic jerk {j}"))?;

    let lin = analytic(15.0, 31, |t| [0.2 * t - 0.1, 0.05 * t, -0.3 * t]);
    ensure(speed_adjust(&lin, lin.duration()).unwrap() == lin, "speed_adjust at the same duration changed the clip")?;
    let back = speed_adjust(&speed_adjust(&lin, 2.0 * lin.duration()).unwrap(), lin.duration()).unwrap();
    let mut err = 0.0f64;
    for (p, q) in back.frames.iter().zip(&lin.frames) {
        for jn in 0..JOINTS {
            for k in 0..3 {
                err = err.max((p.joints[jn][k] - q.joints[jn][k]).abs());
            }
        }
    }
    ensure(back.len() == lin.len() && err < 1e-9, format!("round trip error {err:e}"))?;
    Ok(format!("C1 jump {jump:.0e}, cubic jerk {j:.9}, round trip {err:.0e}"))
}

// --------------------------------------------------------------- toy model

struct Toy {
    dir: tempfile::TempDir,
    cfg: PipelineConfig,
    cli_time: Duration,
}

impl Toy {
    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }
}

fn toy_config(root: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.model.clusters = 4;
    let p = &mut cfg.paths;
    p.dataset = Some(root.join("data/manifest.json"));
    p.vae = Some(root.join("artifacts/vae.json"));
    p.clusters = Some(root.join("artifacts/clusters.json"));
    p.attention = Some(root.join("artifacts/attention.json"));
    p.checkpoint = Some(root.join("artifacts/checkpoint.json"));
    p.library = Some(root.join("artifacts/library"));
    cfg
}

fn run_cli_pipeline() -> Result<Toy, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = toy_config(dir.path());
    cfg.save(dir.path().join("config.json")).map_err(|e| e.to_string())?;
    let steps: [&[&str]; 7] = [
        &["synth-data"],
        &["train-vae"],
        &["cluster"],
        &["pretrain-attention"],
        &["train"],
        &["build-library"],
        &["generate", "--text", "she drew a big circle here", "--out", "out/g.json"],
    ];
    let t = Instant::now();
    for step in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_act2g"))
            .current_dir(dir.path())
            .args(["--config", "config.json", "--seed", "0"])
            .args(step)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!(
                "{} exited with {:?}: {}",
                step[0],
                out.status.code(),
                String::from_utf8_lossy(&out.stderr)
            ));
        }
    }
    Ok(Toy {
        dir,
        cfg,
        cli_time: t.elapsed(),
    })
}

fn family_of(clip_id: &str) -> usize {
    clip_id[1..3].parse().expect("synthetic clip id")
}

fn toy_purity(toy: &Toy) -> Outcome {
    let ds = load_dataset(toy.path("data/manifest.json")).map_err(|e| e.to_string())?;
    let cl = ClusterModel::load(toy.path("artifacts/clusters.json")).map_err(|e| e.to_string())?;
    let train = ds.split(Split::Train);
    let labels: Vec<usize> = train.iter().map(|s| cl.cluster_of(s.id()).unwrap()).collect();
    let truth: Vec<usize> = train.iter().map(|s| s.annotation.family.unwrap()).collect();
    let p = purity(&labels, &truth);
    ensure(p >= 0.9, format!("purity {p:.3}"))?;
    Ok(format!("purity {p:.3} over {} training clips", train.len()))
}

fn toy_auc(toy: &Toy) -> Outcome {
    let ds = load_dataset(toy.path("data/manifest.json")).map_err(|e| e.to_string())?;
    let (text, _) = TextEncoder::load(toy.path("artifacts/attention.json")).map_err(|e| e.to_string())?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for s in ds.split(Split::Test) {
        let w = ds.embeddings.embed_words(&s.annotation.words());
        let a = text.infer(&w, None).map_err(|e| e.to_string())?;
        for (i, &l) in s.annotation.labels.iter().enumerate() {
            scores.push(a.raw_attention[i]);
            labels.push(l == 1);
        }
    }
    let auc = roc_auc(&scores, &labels).map_err(|e| e.to_string())?;
    ensure(auc >= 0.95, format!("held-out AUC {auc:.4}"))?;
    Ok(format!("held-out AUC {auc:.4} over {} words", scores.len()))
}

fn toy_pair_distances(toy: &Toy) -> Outcome {
    let ds = load_dataset(toy.path("data/manifest.json")).map_err(|e| e.to_string())?;
    let ck = Act2gCheckpoint::load(toy.path("artifacts/checkpoint.json")).map_err(|e| e.to_string())?;
    let (vae, _) = GestureVae::load(toy.path("artifacts/vae.json")).map_err(|e| e.to_string())?;
    let cl = ClusterModel::load(toy.path("artifacts/clusters.json")).map_err(|e| e.to_string())?;
    let (text, gesture) = ck.encoders().map_err(|e| e.to_string())?;
    let (mut ft, mut fg, mut cs) = (Vec::new(), Vec::new(), Vec::new());
    for s in ds.split(Split::Test) {
        let kp = extract_keyposes(&s.clip, toy.cfg.model.min_keyposes, toy.cfg.model.max_keyposes).unwrap();
        ft.push(text.infer(&ds.embeddings.embed_words(&s.annotation.words()), None).unwrap().feature);
        fg.push(gesture.encode(&kp.poses).unwrap());
        cs.push(cl.predict(&vae.encode(&kp).unwrap().mu));
    }
    let (pos, neg) = pair_distance_means(&ft, &fg, &cs).map_err(|e| e.to_string())?;
    ensure(pos < neg, format!("positive {pos:.3} vs negative {neg:.3}"))?;
    Ok(format!("held-out mean distance positive {pos:.3} < negative {neg:.3}"))
}

fn toy_family_match(toy: &Toy) -> Outcome {
    let ds = load_dataset(toy.path("data/manifest.json")).map_err(|e| e.to_string())?;
    let g = load_generator(&toy.cfg).map_err(|e| e.to_string())?;
    let (mut hit, mut total) = (0usize, 0usize);
    for s in ds.split(Split::Test) {
        let fam = s.annotation.family.unwrap();
        for seed in 0..100u64 {
            let mut req = GenerationRequest::new(s.annotation.text.clone());
            req.seed = seed;
            let out = g.generate(&req).map_err(|e| e.to_string())?;
            total += 1;
            hit += usize::from(family_of(&out.diagnostics.segments[0].clip_id) == fam);
        }
    }
    let rate = hit as f64 / total as f64;
    ensure(rate >= 0.8, format!("family match {hit}/{total}"))?;
    Ok(format!("family match {hit}/{total} = {:.1}% (test texts x 100 seeds)", 100.0 * rate))
}

fn toy_override_flip(toy: &Toy) -> Outcome {
    let g = load_generator(&toy.cfg).map_err(|e| e.to_string())?;
    let fill = filler_words();
    let (mut hit, mut total, mut plain_first) = (0usize, 0usize, 0usize);
    let mut plain_total = 0usize;
    for a in 0..4 {
        for b in 0..4 {
            if a == b {
                continue;
            }
            let text = format!("{} {} {} {} {}", fill[a], family_keyword(a), fill[b + 4], family_keyword(b), fill[9]);
            for seed in 0..100u64 {
                let mut plain = GenerationRequest::new(text.clone());
                plain.seed = seed;
                let fam = family_of(&g.generate(&plain).unwrap().diagnostics.segments[0].clip_id);
                plain_first += usize::from(fam == a);
                plain_total += 1;
                for (idx, want) in [(1usize, a), (3usize, b)] {
                    let req = GenerationRequest { seed, ..GenerationRequest::new(text.clone()) }.emphasize(&[idx]);
                    let out = g.generate(&req).map_err(|e| e.to_string())?;
                    total += 1;
                    hit += usize::from(family_of(&out.diagnostics.segments[0].clip_id) == want);
                }
            }
        }
    }
    let rate = hit as f64 / total as f64;
    let detail = format!(
        "emphasized family retrieved {hit}/{total} = {:.1}% (without override first keyword wins {plain_first}/{plain_total})",
        100.0 * rate
    );
    ensure(rate >= 0.8, detail.clone())?;
    Ok(detail)
}

fn toy_runtime(toy: &Toy) -> Outcome {
    let secs = toy.cli_time.as_secs_f64();
    ensure(secs < 600.0, format!("pipeline took {secs:.0} s"))?;
    Ok(format!("synth-data through generate in {secs:.1} s"))
}

// --------------------------------------------------------------- interfaces

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn same_after<F: Fn(&Path)>(src: &Path, resave: F) -> Result<(), String> {
    let before = std::fs::read(src).map_err(|e| e.to_string())?;
    let tmp = tempfile::tempdir().unwrap();
    let dst = tmp.path().join("copy.json");
    std::fs::copy(src, &dst).unwrap();
    resave(&dst);
    ensure(before == std::fs::read(&dst).unwrap(), format!("{} changed on re-save", src.display()))
}

fn interfaces(toy: &Toy) -> Outcome {
    let data = toy.path("data");
    let ds = load_dataset(data.join("manifest.json")).map_err(|e| e.to_string())?;
    let copy = tempfile::tempdir().unwrap();
    ds.save(copy.path()).map_err(|e| e.to_string())?;
    let files = tree(&data);
    ensure(files == tree(copy.path()), "dataset tree differs after load and save")?;

    same_after(&data.join("motions/f02_007.json"), |p| MotionClip::load(p).unwrap().save(p).unwrap())?;
    same_after(&toy.path("artifacts/checkpoint.json"), |p| Act2gCheckpoint::load(p).unwrap().save(p).unwrap())?;
    same_after(&toy.path("artifacts/vae.json"), |p| {
        let (v, h) = GestureVae::load(p).unwrap();
        v.save(p, &h).unwrap()
    })?;
    same_after(&toy.path("artifacts/attention.json"), |p| {
        let (t, h) = TextEncoder::load(p).unwrap();
        t.save(p, &h).unwrap()
    })?;
    same_after(&toy.path("artifacts/clusters.json"), |p| ClusterModel::load(p).unwrap().save(p).unwrap())?;

    let lib_dir = toy.path("artifacts/library");
    let lib = GestureLibrary::load(&lib_dir).map_err(|e| e.to_string())?;
    let lib_copy = tempfile::tempdir().unwrap();
    lib.save(lib_copy.path()).map_err(|e| e.to_string())?;
    ensure(tree(&lib_dir) == tree(lib_copy.path()), "library tree differs after load and save")?;

    let app = router(load_generator(&toy.cfg).map_err(|e| e.to_string())?, 0);
    let rt = tokio::runtime::Runtime::new().unwrap();
    let body = r#"{"text":"look at this big circle and the square box","seed":5,"target_duration_s":3.0}"#;
    let call = || {
        let app = app.clone();
        rt.block_on(async move {
            let req = Request::post("/generate")
                .header("content-type", "application/json")
                .body(Body::from(body))
                .unwrap();
            let res = app.oneshot(req).await.unwrap();
            assert!(res.status().is_success(), "status {}", res.status());
            res.into_body().collect().await.unwrap().to_bytes()
        })
    };
    let first = call();
    ensure(first == call(), "/generate bodies differ")?;
    Ok(format!(
        "{} dataset files, motion, checkpoint, vae, attention, clusters, library ({} clips) byte-identical; /generate {} bytes identical",
        files.len(),
        lib.len(),
        first.len()
    ))
}

fn main() {
    let mut suite = Suite { failed: 0 };
    println!("acceptance criteria");
    suite.run("gradient integrity", gradient_integrity);
    suite.run("closed-form oracles", closed_form_oracles);
    suite.run("clustering", clustering);
    suite.run("motion guarantees", motion_guarantees);

    let toy = run_cli_pipeline();
    suite.run("interfaces: full CLI pipeline exits 0", || match &toy {
        Ok(_) => Ok("seven subcommands exited 0".into()),
        Err(e) => Err(e.clone()),
    });
    match &toy {
        Ok(toy) => {
            suite.run("toy: pipeline under 10 minutes", || toy_runtime(toy));
            suite.run("toy: K-Means purity >= 0.9", || toy_purity(toy));
            suite.run("toy: held-out attention ROC-AUC >= 0.95", || toy_auc(toy));
            suite.run("toy: held-out positive < negative distance", || toy_pair_distances(toy));
            suite.run("toy: family match >= 80% of seeded runs", || toy_family_match(toy));
            suite.run("toy: attention override flips family >= 80%", || toy_override_flip(toy));
            suite.run("interfaces: round trips and /generate determinism", || interfaces(toy));
        }
        Err(_) => {
            for name in [
                "toy: pipeline under 10 minutes",
                "toy: K-Means purity >= 0.9",
                "toy: held-out attention ROC-AUC >= 0.95",
                "toy: held-out positive < negative distance",
                "toy: family match >= 80% of seeded runs",
                "toy: attention override flips family >= 80%",
                "interfaces: round trips and /generate determinism",
            ] {
                suite.run(name, || Err("pipeline did not complete".into()));
            }
        }
    }
    if suite.failed > 0 {
        println!("{} criteria failed", suite.failed);
        std::process::exit(1);
    }
    println!("all criteria passed");
}
