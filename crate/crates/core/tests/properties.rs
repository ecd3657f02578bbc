use act2g_core::clustering::{kmeans_once, kmeans_points, PositiveMatrix};
use act2g_core::gesture_vae::kl_divergence;
use act2g_core::metrics::{diversity, frechet_distance, gaussian_fit};
use act2g_core::motion::{
    extract_keyposes, speed_adjust, spline_stitch_with_spans, MotionClip, Pose, JOINTS, MAX_KEYPOSES, MIN_KEYPOSES,
};
use act2g_core::text_encoder::{normalize_attention, override_raw, tokenize, tokenize_words};
use proptest::prelude::*;

fn clip_strategy(min_frames: usize, max_frames: usize) -> impl Strategy<Value = MotionClip> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, JOINTS * 3), min_frames..=max_frames).prop_map(
        |frames| {
            let poses = frames.iter().map(|f| Pose::from_flat(f).unwrap()).collect();
            MotionClip::new("p", 15.0, poses).unwrap()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn attention_normalization_sums_to_one(raw in prop::collection::vec(1e-4f64..1.0, 1..=32)) {
        let a = normalize_attention(&raw);
        let s: f64 = a.iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
        for i in 0..raw.len() {
            for j in 0..raw.len() {
                if raw[i] < raw[j] {
                    prop_assert!(a[i] < a[j]);
                }
            }
        }
    }
}

proptest! {
    #[test]
    fn tokenize_is_idempotent(text in "\\PC{0,80}") {
        let once = tokenize_words(&text);
        let again = tokenize_words(&once.join(" "));
        prop_assert_eq!(&once, &again);
        let t = tokenize("id", &text, 32);
        if let Ok(t) = t {
            prop_assert!(t.tokens.len() <= 32);
            prop_assert_eq!(t.mask.len(), 32);
        }
    }

    #[test]
    fn override_argmax_is_an_emphasized_word(n in 1usize..=32, picks in prop::collection::btree_set(0usize..32, 1..4)) {
        let words: Vec<(usize, f64)> = picks.iter().filter(|&&i| i < n).map(|&i| (i, 0.5)).collect();
        prop_assume!(!words.is_empty());
        let a = normalize_attention(&override_raw(n, &words).unwrap());
        let best = (0..n).max_by(|&i, &j| a[i].total_cmp(&a[j])).unwrap();
        prop_assert!(words.iter().any(|&(i, _)| i == best));
    }

    #[test]
    fn lloyd_sse_never_increases(
        points in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 8..60),
        k in 1usize..6,
        seed in any::<u64>(),
    ) {
        let fit = kmeans_once(&points, k, seed).unwrap();
        for w in fit.sse_trace.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12, "{:?}", fit.sse_trace);
        }
        prop_assert!(fit.labels.iter().all(|&l| l < k));
        let best = kmeans_points(&points, k, seed).unwrap();
        prop_assert_eq!(&best, &kmeans_points(&points, k, seed).unwrap());
        for w in best.sse_trace.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
        }
    }

    #[test]
    fn positive_matrix_commutes_with_permutation(
        labels in prop::collection::vec(0usize..4, 1..12),
        perm_seed in any::<u64>(),
    ) {
        let n = labels.len();
        let ids: Vec<String> = (0..n).map(|i| format!("c{i}")).collect();
        let mut order: Vec<usize> = (0..n).collect();
        let mut s = perm_seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (s >> 33) as usize % (i + 1));
        }
        let p = PositiveMatrix::from_labels(ids.clone(), &labels);
        let q = PositiveMatrix::from_labels(order.iter().map(|&i| ids[i].clone()).collect(), &order.iter().map(|&i| labels[i]).collect::<Vec<_>>());
        for a in 0..n {
            prop_assert_eq!(p.values[a][a], 1.0);
            for b in 0..n {
                prop_assert_eq!(q.values[a][b], p.values[order[a]][order[b]]);
                prop_assert_eq!(p.values[a][b], p.values[b][a]);
            }
        }
        prop_assert_eq!(p.negatives, q.negatives);
    }

    #[test]
    fn diversity_translation_and_scale(
        z in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 2..10),
        shift in prop::collection::vec(-100.0f64..100.0, 4),
        scale in -10.0f64..10.0,
    ) {
        let d = diversity(&z).unwrap();
        let moved: Vec<Vec<f64>> = z.iter().map(|r| r.iter().zip(&shift).map(|(a, b)| a + b).collect()).collect();
        let scaled: Vec<Vec<f64>> = z.iter().map(|r| r.iter().map(|a| a * scale).collect()).collect();
        prop_assert!((diversity(&moved).unwrap() - d).abs() <= 1e-9 * (1.0 + d));
        prop_assert!((diversity(&scaled).unwrap() - scale.abs() * d).abs() <= 1e-9 * (1.0 + d * scale.abs()));
    }

    #[test]
    fn frechet_is_symmetric_and_nonnegative(
        a in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 4..20),
        b in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 4..20),
    ) {
        let (ma, ca) = gaussian_fit(&a).unwrap();
        let (mb, cb) = gaussian_fit(&b).unwrap();
        let ab = frechet_distance(&ma, &ca, &mb, &cb).unwrap();
        let ba = frechet_distance(&mb, &cb, &ma, &ca).unwrap();
        prop_assert!((ab - ba).abs() < 1e-8 * (1.0 + ab.abs()));
        prop_assert!(ab > -1e-9);
    }

    #[test]
    fn kl_is_nonnegative(
        mu in prop::collection::vec(-5.0f64..5.0, 1..8),
        log_sigma in prop::collection::vec(-3.0f64..3.0, 1..8),
    ) {
        let n = mu.len().min(log_sigma.len());
        let sigma: Vec<f64> = log_sigma[..n].iter().map(|l| l.exp()).collect();
        prop_assert!(kl_divergence(&mu[..n], &sigma) >= 0.0);
    }

    #[test]
    fn keyposes_always_valid(clip in clip_strategy(5, 90)) {
        let kp = extract_keyposes(&clip, MIN_KEYPOSES, MAX_KEYPOSES).unwrap();
        prop_assert!((MIN_KEYPOSES..=MAX_KEYPOSES).contains(&kp.poses.len()));
        prop_assert_eq!(kp.source_indices[0], 0);
        prop_assert_eq!(*kp.source_indices.last().unwrap(), clip.len() - 1);
        prop_assert!(kp.source_indices.windows(2).all(|w| w[0] < w[1]));
        for (p, &i) in kp.poses.iter().zip(&kp.source_indices) {
            prop_assert_eq!(p, &clip.frames[i]);
        }
    }

    #[test]
    fn speed_adjust_hits_duration(clip in clip_strategy(2, 60), target in 0.2f64..8.0) {
        let out = speed_adjust(&clip, target).unwrap();
        prop_assert!((out.duration() - target).abs() <= 0.5 / clip.fps + 1e-9);
        prop_assert_eq!(out.frames[0], clip.frames[0]);
        prop_assert_eq!(out.frames.last(), clip.frames.last());
    }

    #[test]
    fn stitch_keeps_segment_interiors(segs in prop::collection::vec(clip_strategy(8, 30), 1..4)) {
        let (out, spans) = spline_stitch_with_spans(&segs, 0.25).unwrap();
        prop_assert_eq!(spans.len(), segs.len());
        for (seg, span) in segs.iter().zip(&spans) {
            let copied = &out.frames[span.output_start..span.output_start + span.len()];
            prop_assert_eq!(copied, &seg.frames[span.source_start..span.source_end]);
        }
        prop_assert_eq!(out.frames[0], segs[0].frames[0]);
        prop_assert_eq!(out.frames.last(), segs.last().unwrap().frames.last());
    }
}
