//! Reference implementations used as test oracles: exhaustive path
//! enumeration, the alpha recursion over the blank-interleaved label
//! sequence for CTC, and central finite differences.
#![allow(dead_code)]

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use segmental_core::encoder::{EncoderConfig, Mode, Subsample};
use segmental_core::lattice::{LabelId, RepeatPolicy, SearchSpace};
use segmental_core::math::Mat;
use segmental_core::model::{Model, ModelConfig, Objective, Partition, Utterance};
use segmental_core::params::ParamSet;
use segmental_core::weights::{DecoderConfig, WeightFnKind};

pub fn rng(seed: u64) -> ChaCha8Rng {
    segmental_core::params::rng_from_seed(seed)
}

pub fn normals(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn normal_mat(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_vec(rows, cols, normals(rng, rows * cols))
}

/// Every initial-to-final path, as edge id lists.
pub fn enumerate_paths(space: &SearchSpace) -> Vec<Vec<usize>> {
    fn walk(space: &SearchSpace, v: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if v == space.final_vertex() {
            out.push(prefix.clone());
            return;
        }
        for &e in space.out_edges(v) {
            prefix.push(e);
            walk(space, space.edge(e).head, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    walk(space, space.initial(), &mut Vec::new(), &mut out);
    out
}

pub fn path_weight(path: &[usize], w: &[f64]) -> f64 {
    path.iter().map(|&e| w[e]).sum()
}

pub fn path_labels(space: &SearchSpace, path: &[usize]) -> Vec<LabelId> {
    path.iter().map(|&e| space.edge(e).label).collect()
}

pub fn logsumexp(xs: impl IntoIterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = xs.into_iter().collect();
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn log_partition(space: &SearchSpace, w: &[f64]) -> f64 {
    logsumexp(enumerate_paths(space).iter().map(|p| path_weight(p, w)))
}

/// Best path weight and the first maximizing path in enumeration order.
pub fn best_path(space: &SearchSpace, w: &[f64]) -> (f64, Vec<usize>) {
    let mut best: Option<(f64, Vec<usize>)> = None;
    for p in enumerate_paths(space) {
        let s = path_weight(&p, w);
        if best.as_ref().is_none_or(|(b, _)| s > *b) {
            best = Some((s, p));
        }
    }
    best.expect("space has a path")
}

/// Row-wise log-softmax.
pub fn log_softmax(z: &Mat) -> Mat {
    let mut out = z.clone();
    for r in 0..z.rows() {
        let row = out.row_mut(r);
        let lse = logsumexp(row.iter().cloned());
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

/// Negative log-likelihood of `labels` under per-frame log-probabilities,
/// by the alpha recursion over `∅ y1 ∅ y2 ... yU ∅`, where a skip over a
/// blank is only allowed between different labels.
pub fn ctc_nll(log_probs: &Mat, labels: &[LabelId], blank: LabelId) -> f64 {
    let mut ext = vec![blank];
    for &l in labels {
        ext.push(l);
        ext.push(blank);
    }
    let s_len = ext.len();
    let t_len = log_probs.rows();
    let mut alpha = vec![f64::NEG_INFINITY; s_len];
    alpha[0] = log_probs.get(0, ext[0]);
    if s_len > 1 {
        alpha[1] = log_probs.get(0, ext[1]);
    }
    for t in 1..t_len {
        let prev = alpha.clone();
        for s in 0..s_len {
            let mut terms = vec![prev[s]];
            if s >= 1 {
                terms.push(prev[s - 1]);
            }
            if s >= 2 && ext[s] != blank && ext[s] != ext[s - 2] {
                terms.push(prev[s - 2]);
            }
            alpha[s] = logsumexp(terms) + log_probs.get(t, ext[s]);
        }
    }
    -logsumexp([alpha[s_len - 1], alpha[s_len - 2]])
}

/// Finite-difference step.
pub const STEP: f64 = 1e-5;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let plus = f(&x);
            x[i] = orig - h;
            let minus = f(&x);
            x[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// A small model with dropout off.
pub fn small_model(kind: WeightFnKind, input_dim: usize, labels: usize, layers: usize, pyramid: bool, max_duration: usize, seed: u64) -> Model {
    let config = ModelConfig {
        encoder: EncoderConfig {
            input_dim,
            hidden: 4,
            layers,
            pyramid,
            subsample: Subsample::Select,
            dropout: 0.0,
            num_labels: labels,
        },
        decoder: {
            let mut d = DecoderConfig::new(kind, max_duration);
            d.srnn.label_dim = 3;
            d.srnn.duration_dim = 2;
            d.srnn.hidden1 = 5;
            d.srnn.hidden2 = 4;
            d
        },
        repeats: RepeatPolicy::Verbatim,
        cost_scale: 1.0,
    };
    Model::init(config, seed).expect("valid config")
}

/// A random utterance tiled by segments of 1..=`max_duration` frames with no
/// equal adjacent labels.
pub fn random_utterance(rng: &mut impl Rng, frames: usize, input_dim: usize, labels: usize, max_duration: usize) -> Utterance {
    let mut segments = Vec::new();
    let mut s = 0;
    let mut prev = usize::MAX;
    while s < frames {
        let n = rng.random_range(1..=max_duration.min(frames - s));
        let mut l = rng.random_range(0..labels);
        if labels > 1 {
            while l == prev {
                l = rng.random_range(0..labels);
            }
        }
        segments.push((l, s, s + n));
        prev = l;
        s += n;
    }
    Utterance {
        id: "u".into(),
        features: normal_mat(rng, frames, input_dim),
        labels: segments.iter().map(|x| x.0).collect(),
        segments: Some(segments),
    }
}

/// Central difference at `STEP`, or `None` if it disagrees with the one at
/// `STEP / 2`: a ReLU or argmax kink lies within the step.
pub fn smooth_central(mut f: impl FnMut(f64) -> f64) -> Option<f64> {
    let c = (f(STEP) - f(-STEP)) / (2.0 * STEP);
    let c_half = (f(STEP / 2.0) - f(-STEP / 2.0)) / STEP;
    ((c - c_half).abs() <= 1e-7 * c.abs().max(1.0)).then_some(c)
}

/// Max relative error over `coords` random parameter coordinates, skipping
/// kinks. Returns the error and the numbers of coordinates compared and
/// skipped.
pub fn param_gradient_check(model: &Model, utt: &Utterance, objective: &Objective, coords: usize, rng: &mut impl Rng) -> (f64, usize, usize) {
    let analytic = model.evaluate(utt, objective, Mode::Eval, Partition::All).unwrap();
    let grads: Vec<f64> = analytic.grads.tensors().iter().flat_map(|(_, m)| m.as_slice().to_vec()).collect();
    let total = grads.len();
    let (mut worst, mut compared, mut kinks) = (0.0f64, 0, 0);
    for i in sample(rng, total, coords.min(total)) {
        let shifted = |delta: f64| {
            let mut m = model.clone();
            let mut seen = 0;
            for t in m.params.tensors_mut() {
                let n = t.len();
                if i < seen + n {
                    t.as_mut_slice()[i - seen] += delta;
                    break;
                }
                seen += n;
            }
            m.loss(utt, objective).unwrap()
        };
        let Some(central) = smooth_central(shifted) else {
            kinks += 1;
            continue;
        };
        worst = worst.max(rel_err(grads[i], central));
        compared += 1;
    }
    (worst, compared, kinks)
}
