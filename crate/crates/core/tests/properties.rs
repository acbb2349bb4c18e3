mod common;

use common::*;
use proptest::prelude::*;
use segmental_core::dp::{edge_posteriors, forward_backward, max_path};
use segmental_core::encoder::{encode, EncoderConfig, EncoderOutputs, EncoderParams, Mode, Subsample};
use segmental_core::lattice::{build_ctc_space, build_segmental_space, Edge};
use segmental_core::losses::ctc_collapse;
use segmental_core::math::Mat;
use segmental_core::model::{Objective, Partition, SegmentalLoss};
use segmental_core::params::ParamSet;
use segmental_core::training::clip_global_norm;
use segmental_core::weights::fc::FcParams;
use segmental_core::weights::{score_all_edges, DecoderConfig, DecoderParams, WeightFnKind};

fn fc_direct(h: &Mat, e: &Edge, p: &FcParams) -> f64 {
    let t_len = h.rows() as isize;
    let lp = |i: usize| -> Vec<f64> {
        let z: Vec<f64> = (0..p.classifier.weight.rows())
            .map(|l| {
                p.classifier.bias.get(l, 0)
                    + (0..h.cols()).map(|d| p.classifier.weight.get(l, d) * h.get(i, d)).sum::<f64>()
            })
            .collect();
        let lse = logsumexp(z.iter().cloned());
        z.iter().map(|v| v - lse).collect()
    };
    let proj = |m: &Mat, i: usize| -> f64 {
        let z = lp(i);
        (0..z.len()).map(|k| m.get(e.label, k) * z[k]).sum()
    };
    let n = e.end - e.start;
    let mut w = (e.start..e.end).map(|i| proj(&p.avg, i)).sum::<f64>() / n as f64;
    for i in [e.start + n / 6, e.start + n / 2, e.start + 5 * n / 6] {
        w += proj(&p.sample, i);
    }
    let clamp = |i: isize| i.clamp(0, t_len - 1) as usize;
    for k in 1..=3isize {
        w += proj(&p.left[k as usize - 1], clamp(e.start as isize - k));
        w += proj(&p.right[k as usize - 1], clamp(e.end as isize + k - 1));
    }
    w + p.duration.get(e.label, n - 1) + p.bias.get(e.label, 0)
}

fn decoder(kind: WeightFnKind, labels: usize, dim: usize, d: usize, seed: u64) -> (DecoderConfig, DecoderParams) {
    let mut cfg = DecoderConfig::new(kind, d);
    cfg.srnn.hidden1 = 6;
    cfg.srnn.hidden2 = 5;
    let mut r = rng(seed);
    let mut params = DecoderParams::init(&cfg, labels, dim, &mut r);
    // Non-zero biases so that every term is exercised.
    for t in params.tensors_mut() {
        for v in t.as_mut_slice() {
            if *v == 0.0 {
                *v = normals(&mut r, 1)[0] * 0.1;
            }
        }
    }
    (cfg, params)
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 64,
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn duration_proportional_shift_moves_every_path_equally(
        t in 1usize..7, l in 1usize..4, d in 1usize..4, c in -3.0f64..3.0, seed in any::<u64>()
    ) {
        let space = build_segmental_space(t, l, d).unwrap();
        let w = normals(&mut rng(seed), space.num_edges());
        let shifted: Vec<f64> = space.edges().iter().map(|e| w[e.id] + c * e.duration() as f64).collect();
        let (p0, s0) = max_path(&space, &w).unwrap();
        let (p1, s1) = max_path(&space, &shifted).unwrap();
        prop_assert_eq!(p0.edges, p1.edges);
        prop_assert!((s1 - s0 - c * t as f64).abs() < 1e-9);
        let z0 = forward_backward(&space, &w).unwrap().log_partition;
        let z1 = forward_backward(&space, &shifted).unwrap().log_partition;
        prop_assert!((z1 - z0 - c * t as f64).abs() < 1e-9);
    }

    #[test]
    fn path_weight_is_additive_in_the_weights(t in 1usize..7, l in 1usize..4, d in 1usize..4, seed in any::<u64>()) {
        let space = build_segmental_space(t, l, d).unwrap();
        let mut r = rng(seed);
        let a = normals(&mut r, space.num_edges());
        let b = normals(&mut r, space.num_edges());
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let (p, _) = max_path(&space, &a).unwrap();
        prop_assert!((p.weight(&sum) - p.weight(&a) - p.weight(&b)).abs() < 1e-12);
    }

    #[test]
    fn segment_posteriors_cover_every_frame_once(t in 1usize..9, l in 1usize..4, d in 1usize..5, seed in any::<u64>()) {
        let space = build_segmental_space(t, l, d).unwrap();
        let w = normals(&mut rng(seed), space.num_edges());
        let m = forward_backward(&space, &w).unwrap();
        let gamma = edge_posteriors(&space, &w, &m);
        for frame in 0..t {
            let cover: f64 = space
                .edges()
                .iter()
                .filter(|e| e.start <= frame && frame < e.end)
                .map(|e| gamma[e.id])
                .sum();
            prop_assert!((cover - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn ctc_per_frame_offsets_shift_log_partition(t in 1usize..12, s in 2usize..5, seed in any::<u64>()) {
        let space = build_ctc_space(t, s, s - 1).unwrap();
        let mut r = rng(seed);
        let w = normals(&mut r, space.num_edges());
        let offsets = normals(&mut r, t);
        let shifted: Vec<f64> = w.iter().enumerate().map(|(i, v)| v + offsets[i / s]).collect();
        let z0 = forward_backward(&space, &w).unwrap().log_partition;
        let z1 = forward_backward(&space, &shifted).unwrap().log_partition;
        prop_assert!((z1 - z0 - offsets.iter().sum::<f64>()).abs() < 1e-9);
    }

    #[test]
    fn fc_table_matches_direct_sums(t in 1usize..10, l in 1usize..4, d in 1usize..6, seed in any::<u64>()) {
        let h = normal_mat(&mut rng(seed), t, 3);
        let (cfg, params) = decoder(WeightFnKind::Fc, l, 3, d, seed ^ 1);
        let DecoderParams::Fc(fc) = &params else { unreachable!() };
        let space = build_segmental_space(t, l, d).unwrap();
        let enc = EncoderOutputs { h: h.clone() };
        let (table, _) = score_all_edges(&space, &enc, &params, &cfg).unwrap();
        for e in space.edges() {
            prop_assert!((table.values[e.id] - fc_direct(&h, e, fc)).abs() < 1e-9);
        }
    }

    #[test]
    fn fc_reads_only_the_span_and_boundary_frames(t in 8usize..14, seed in any::<u64>(), frame in 0usize..14) {
        prop_assume!(frame < t);
        let mut h = normal_mat(&mut rng(seed), t, 3);
        let (cfg, params) = decoder(WeightFnKind::Fc, 2, 3, 4, seed ^ 2);
        let space = build_segmental_space(t, 2, 4).unwrap();
        let (before, _) = score_all_edges(&space, &EncoderOutputs { h: h.clone() }, &params, &cfg).unwrap();
        h.row_mut(frame).iter_mut().for_each(|v| *v += 1.0);
        let (after, _) = score_all_edges(&space, &EncoderOutputs { h }, &params, &cfg).unwrap();
        for e in space.edges() {
            let near = frame + 3 >= e.start && frame < e.end + 3;
            let clamped = (e.start < 3 && frame == 0) || (e.end + 3 > t && frame == t - 1);
            // Prefix sums may round differently once any frame changes.
            if !near && !clamped {
                prop_assert!((before.values[e.id] - after.values[e.id]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn srnn_ignores_frames_inside_a_segment(t in 4usize..10, seed in any::<u64>(), frame in 0usize..10) {
        prop_assume!(frame < t);
        let mut h = normal_mat(&mut rng(seed), t, 3);
        let (cfg, params) = decoder(WeightFnKind::Srnn, 2, 3, 7, seed ^ 3);
        let space = build_segmental_space(t, 2, 7).unwrap();
        let (before, _) = score_all_edges(&space, &EncoderOutputs { h: h.clone() }, &params, &cfg).unwrap();
        h.row_mut(frame).iter_mut().for_each(|v| *v -= 0.5);
        let (after, _) = score_all_edges(&space, &EncoderOutputs { h }, &params, &cfg).unwrap();
        // Boundary vertex v reads row v - 1.
        for e in space.edges() {
            if frame + 1 != e.start && frame + 1 != e.end {
                prop_assert_eq!(before.values[e.id], after.values[e.id]);
            }
        }
    }

    #[test]
    fn pyramid_halves_the_frame_rate_per_layer(
        t in 1usize..40, layers in 1usize..4, concat in any::<bool>(), seed in any::<u64>()
    ) {
        let cfg = EncoderConfig {
            input_dim: 2,
            hidden: 3,
            layers,
            pyramid: true,
            subsample: if concat { Subsample::Concat } else { Subsample::Select },
            dropout: 0.0,
            num_labels: 2,
        };
        let params = EncoderParams::init(&cfg, seed);
        let x = normal_mat(&mut rng(seed), t, 2);
        let (out, _) = encode(&x, &params, &cfg, Mode::Eval).unwrap();
        let mut expected = t;
        for _ in 1..layers {
            expected = expected.div_ceil(2);
        }
        prop_assert_eq!(out.frames(), expected);
        prop_assert_eq!(cfg.output_frames(t), expected);
    }

    #[test]
    fn same_seed_same_model_and_gradients(seed in any::<u64>(), dropout_seed in any::<u64>()) {
        let mut r = rng(seed);
        let utt = random_utterance(&mut r, 7, 3, 3, 3);
        let mut a = small_model(WeightFnKind::Srnn, 3, 3, 2, false, 4, seed);
        let mut b = small_model(WeightFnKind::Srnn, 3, 3, 2, false, 4, seed);
        a.config.encoder.dropout = 0.3;
        b.config.encoder.dropout = 0.3;
        prop_assert_eq!(&a, &b);
        let objective = Objective::Segmental(SegmentalLoss::MarginalLog);
        let mode = Mode::Train { seed: dropout_seed };
        let ga = a.evaluate(&utt, &objective, mode, Partition::All).unwrap();
        let gb = b.evaluate(&utt, &objective, mode, Partition::All).unwrap();
        prop_assert_eq!(ga.value.to_bits(), gb.value.to_bits());
        prop_assert_eq!(ga.grads, gb.grads);
    }

    #[test]
    fn clipping_keeps_direction_and_bounds_the_norm(scale in 0.01f64..100.0, clip in 0.1f64..10.0, seed in any::<u64>()) {
        let model = small_model(WeightFnKind::Fc, 2, 2, 1, false, 3, seed);
        let mut grads = model.params.clone();
        grads.scale(scale);
        let original = grads.clone();
        let before = original.sum_sq().sqrt();
        let (norm, factor) = clip_global_norm(&mut grads, clip);
        prop_assert!((norm - before).abs() <= 1e-12 * before.max(1.0));
        let after = grads.sum_sq().sqrt();
        prop_assert!(after <= clip * (1.0 + 1e-12) || before <= clip);
        prop_assert!(factor > 0.0 && factor <= 1.0);
        for ((_, g), (_, o)) in grads.tensors().iter().zip(original.tensors().iter()) {
            for (x, y) in g.as_slice().iter().zip(o.as_slice()) {
                prop_assert!((x - factor * y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn ctc_collapse_drops_blanks_and_is_stable_without_adjacent_repeats(frames in proptest::collection::vec(0usize..4, 0..30)) {
        let out = ctc_collapse(&frames, 3);
        prop_assert!(!out.contains(&3));
        if out.windows(2).all(|w| w[0] != w[1]) {
            prop_assert_eq!(ctc_collapse(&out, 3), out.clone());
        }
        let mut interleaved = Vec::new();
        for &l in &out {
            interleaved.extend([l, l, 3]);
        }
        prop_assert_eq!(ctc_collapse(&interleaved, 3), out);
    }
}
