mod common;

use common::*;
use rand::Rng;
use segmental_core::dp::{edge_posteriors, forward_backward, max_path, Path};
use segmental_core::lattice::{
    build_ctc_constraint, build_ctc_space, build_label_chain, build_segmental_space, intersect, RepeatPolicy,
    SearchSpace,
};
use segmental_core::losses::{ctc_loss, hinge_loss, log_loss, marginal_log_loss, CostFunction};
use segmental_core::Error;

fn random_space(rng: &mut impl Rng) -> SearchSpace {
    let t = rng.random_range(1..=6);
    let l = rng.random_range(1..=3);
    let d = rng.random_range(1..=3);
    build_segmental_space(t, l, d).unwrap()
}

fn random_truth(rng: &mut impl Rng, space: &SearchSpace) -> Path {
    let paths = enumerate_paths(space);
    let p = paths[rng.random_range(0..paths.len())].clone();
    Path::from_edges(space, p).unwrap()
}

fn frame_labels(space: &SearchSpace, edges: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    for &e in edges {
        let e = space.edge(e);
        out.extend(std::iter::repeat_n(e.label, e.end - e.start));
    }
    out
}

fn hamming(a: &[usize], b: &[usize]) -> f64 {
    a.iter().zip(b).filter(|(x, y)| x != y).count() as f64
}

#[test]
fn path_count_matches_enumeration() {
    let mut rng = rng(1);
    for _ in 0..50 {
        let space = random_space(&mut rng);
        assert_eq!(space.count_paths(), enumerate_paths(&space).len() as f64);
    }
}

#[test]
fn best_path_matches_enumeration() {
    let mut rng = rng(2);
    for _ in 0..200 {
        let space = random_space(&mut rng);
        let w = normals(&mut rng, space.num_edges());
        let (path, score) = max_path(&space, &w).unwrap();
        let (best, edges) = best_path(&space, &w);
        assert!((score - best).abs() < 1e-12);
        assert_eq!(path.edges, edges);
    }
}

#[test]
fn ties_resolve_to_smallest_edge_ids() {
    // Durations 1 and 2 both reach v_2; with equal weights the best
    // predecessor is the lowest-numbered edge into each vertex.
    let space = build_segmental_space(2, 2, 2).unwrap();
    let (path, score) = max_path(&space, &vec![0.0; space.num_edges()]).unwrap();
    assert_eq!(score, 0.0);
    let last = *path.edges.last().unwrap();
    assert_eq!(last, *space.in_edges(space.final_vertex()).iter().min().unwrap());
}

#[test]
fn log_partition_matches_enumeration() {
    let mut rng = rng(3);
    for _ in 0..200 {
        let space = random_space(&mut rng);
        let w = normals(&mut rng, space.num_edges());
        let m = forward_backward(&space, &w).unwrap();
        assert!((m.log_partition - log_partition(&space, &w)).abs() < 1e-10);
    }
}

#[test]
fn posteriors_match_enumeration() {
    let mut rng = rng(4);
    for _ in 0..100 {
        let space = random_space(&mut rng);
        let w = normals(&mut rng, space.num_edges());
        let m = forward_backward(&space, &w).unwrap();
        let gamma = edge_posteriors(&space, &w, &m);
        let z = log_partition(&space, &w);
        let mut expected = vec![0.0; space.num_edges()];
        for p in enumerate_paths(&space) {
            let prob = (path_weight(&p, &w) - z).exp();
            for e in p {
                expected[e] += prob;
            }
        }
        for (g, e) in gamma.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-10);
        }
    }
}

#[test]
fn intersection_keeps_exactly_the_accepted_paths() {
    let mut rng = rng(5);
    for _ in 0..100 {
        let space = random_space(&mut rng);
        let truth = random_truth(&mut rng, &space);
        let chain = build_label_chain(&truth.labels).unwrap();
        let inter = intersect(&space, &chain).unwrap();
        let mut mapped: Vec<Vec<usize>> = enumerate_paths(inter.space())
            .into_iter()
            .map(|p| p.iter().map(|&e| inter.edge_origin()[e]).collect())
            .collect();
        let mut expected: Vec<Vec<usize>> = enumerate_paths(&space)
            .into_iter()
            .filter(|p| chain.accepts(&path_labels(&space, p)))
            .collect();
        mapped.sort();
        expected.sort();
        assert_eq!(mapped, expected);
        for (i, &o) in inter.edge_origin().iter().enumerate() {
            let (a, b) = (inter.space().edge(i), space.edge(o));
            assert_eq!((a.label, a.start, a.end), (b.label, b.start, b.end));
        }
    }
}

#[test]
fn impossible_constraint_is_an_empty_language() {
    let space = build_segmental_space(3, 2, 2).unwrap();
    let chain = build_label_chain(&[0, 1, 0, 1]).unwrap();
    assert!(matches!(intersect(&space, &chain), Err(Error::EmptyLanguage)));
}

#[test]
fn single_path_space_has_zero_log_loss_and_decodes_its_only_path() {
    let space = build_segmental_space(4, 1, 1).unwrap();
    assert_eq!(space.count_paths(), 1.0);
    let w = vec![0.3, -1.0, 2.0, 0.5];
    let (path, score) = max_path(&space, &w).unwrap();
    assert_eq!(path.segments(), vec![(0, 0, 1), (0, 1, 2), (0, 2, 3), (0, 3, 4)]);
    assert!((score - 1.8).abs() < 1e-12);
    let loss = log_loss(&space, &w, &path).unwrap();
    assert!(loss.value.abs() < 1e-12);
    assert!(loss.grads.iter().all(|g| g.abs() < 1e-12));
}

#[test]
fn log_loss_matches_enumeration_and_finite_differences() {
    let mut rng = rng(6);
    for _ in 0..50 {
        let space = random_space(&mut rng);
        let w = normals(&mut rng, space.num_edges());
        let truth = random_truth(&mut rng, &space);
        let loss = log_loss(&space, &w, &truth).unwrap();
        let expected = log_partition(&space, &w) - path_weight(&truth.edges, &w);
        assert!((loss.value - expected).abs() < 1e-10);
        let num = numeric_grad(&w, 1e-5, |x| log_partition(&space, x) - path_weight(&truth.edges, x));
        assert!(max_rel_err(&loss.grads, &num) < 1e-7);
    }
}

#[test]
fn marginal_log_loss_matches_enumeration_and_finite_differences() {
    let mut rng = rng(7);
    for _ in 0..50 {
        let space = random_space(&mut rng);
        let w = normals(&mut rng, space.num_edges());
        let labels = random_truth(&mut rng, &space).labels;
        let chain = build_label_chain(&labels).unwrap();
        let oracle = |x: &[f64]| {
            let paths = enumerate_paths(&space);
            let inner = logsumexp(
                paths
                    .iter()
                    .filter(|p| path_labels(&space, p) == labels)
                    .map(|p| path_weight(p, x)),
            );
            logsumexp(paths.iter().map(|p| path_weight(p, x))) - inner
        };
        let loss = marginal_log_loss(&space, &w, &chain).unwrap();
        assert!((loss.value - oracle(&w)).abs() < 1e-10);
        let num = numeric_grad(&w, 1e-5, oracle);
        assert!(max_rel_err(&loss.grads, &num) < 1e-7);
    }
}

#[test]
fn hinge_matches_enumeration_and_bounds_the_cost() {
    let mut rng = rng(8);
    for _ in 0..200 {
        let space = random_space(&mut rng);
        let w = normals(&mut rng, space.num_edges());
        let truth = random_truth(&mut rng, &space);
        let truth_frames = frame_labels(&space, &truth.edges);
        let cost = CostFunction::new(&truth, space.num_labels());
        let loss = hinge_loss(&space, &w, &truth, &cost).unwrap();
        let expected = enumerate_paths(&space)
            .iter()
            .map(|p| hamming(&frame_labels(&space, p), &truth_frames) + path_weight(p, &w))
            .fold(f64::NEG_INFINITY, f64::max)
            - path_weight(&truth.edges, &w);
        assert!((loss.value - expected).abs() < 1e-10);
        let (decoded, _) = max_path(&space, &w).unwrap();
        assert!(hamming(&frame_labels(&space, &decoded.edges), &truth_frames) <= loss.value + 1e-9);
        assert!(loss.value >= -1e-12);
    }
}

#[test]
fn hinge_subgradient_matches_finite_differences_away_from_ties() {
    let mut rng = rng(9);
    let mut checked = 0;
    while checked < 50 {
        let space = random_space(&mut rng);
        let w = normals(&mut rng, space.num_edges());
        let truth = random_truth(&mut rng, &space);
        let cost = CostFunction::new(&truth, space.num_labels());
        let f = |x: &[f64]| hinge_loss(&space, x, &truth, &cost).unwrap().value;
        let scores: Vec<f64> = {
            let tf = frame_labels(&space, &truth.edges);
            let mut s: Vec<f64> = enumerate_paths(&space)
                .iter()
                .map(|p| hamming(&frame_labels(&space, p), &tf) + path_weight(p, &w))
                .collect();
            s.sort_by(|a, b| b.total_cmp(a));
            s
        };
        if scores.len() > 1 && scores[0] - scores[1] < 1e-3 {
            continue;
        }
        let loss = hinge_loss(&space, &w, &truth, &cost).unwrap();
        let num = numeric_grad(&w, 1e-6, f);
        assert!(max_rel_err(&loss.grads, &num) < 1e-6);
        checked += 1;
    }
}

#[test]
fn ctc_space_is_normalized_under_log_softmax() {
    let mut rng = rng(10);
    for _ in 0..100 {
        let t = rng.random_range(1..=20);
        let symbols = rng.random_range(2..=6);
        let lp = log_softmax(&normal_mat(&mut rng, t, symbols));
        let space = build_ctc_space(t, symbols, symbols - 1).unwrap();
        let m = forward_backward(&space, lp.as_slice()).unwrap();
        assert!(m.log_partition.abs() < 1e-9);
    }
}

#[test]
fn ctc_matches_the_alpha_recursion() {
    let mut rng = rng(11);
    for _ in 0..100 {
        let labels = rng.random_range(1..=5);
        let blank = labels;
        let n = rng.random_range(1..=6);
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..labels)).collect();
        let repeats = y.windows(2).filter(|w| w[0] == w[1]).count();
        let min_frames = n + repeats;
        if min_frames > 20 {
            continue;
        }
        let t = rng.random_range(min_frames..=20);
        let lp = log_softmax(&normal_mat(&mut rng, t, labels + 1));
        let loss = ctc_loss(&lp, &y, blank, RepeatPolicy::Strict).unwrap();
        assert!((loss.value - ctc_nll(&lp, &y, blank)).abs() < 1e-8);
        if repeats == 0 {
            let verbatim = ctc_loss(&lp, &y, blank, RepeatPolicy::Verbatim).unwrap();
            assert!((verbatim.value - loss.value).abs() < 1e-9);
        }
    }
}

#[test]
fn verbatim_repeats_admit_more_alignments() {
    let mut rng = rng(12);
    for _ in 0..20 {
        let lp = log_softmax(&normal_mat(&mut rng, 6, 3));
        let y = [0, 0, 1];
        let strict = ctc_loss(&lp, &y, 2, RepeatPolicy::Strict).unwrap().value;
        let verbatim = ctc_loss(&lp, &y, 2, RepeatPolicy::Verbatim).unwrap().value;
        assert!(verbatim < strict);
    }
}

#[test]
fn ctc_constraint_accepts_the_expected_strings() {
    let c = build_ctc_constraint(&[0, 0], 2, RepeatPolicy::Strict).unwrap();
    assert!(c.accepts(&[0, 2, 0]));
    assert!(c.accepts(&[2, 0, 0, 2, 2, 0, 2]));
    assert!(!c.accepts(&[0, 0]));
    let v = build_ctc_constraint(&[0, 0], 2, RepeatPolicy::Verbatim).unwrap();
    assert!(v.accepts(&[0, 0]));
    assert!(v.accepts(&[0, 2, 0]));
    assert!(!v.accepts(&[0]));
}

#[test]
fn ctc_logit_gradient_matches_finite_differences() {
    let mut rng = rng(13);
    for _ in 0..30 {
        let t = rng.random_range(3..=8);
        let z = normal_mat(&mut rng, t, 4);
        let y = [0, 1];
        let f = |x: &[f64]| {
            let lp = log_softmax(&segmental_core::math::Mat::from_vec(t, 4, x.to_vec()));
            ctc_nll(&lp, &y, 3)
        };
        let loss = ctc_loss(&log_softmax(&z), &y, 3, RepeatPolicy::Strict).unwrap();
        let num = numeric_grad(z.as_slice(), 1e-5, f);
        assert!(max_rel_err(&loss.grads, &num) < 1e-7);
    }
}
