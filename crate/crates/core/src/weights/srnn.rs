//! Segmental RNN weight function: a two-layer feed-forward network over the
//! encoder states at both segment boundaries and label and duration
//! embeddings,
//!
//! ```text
//! z1 = ReLU(W1 [h_s; h_t; c_l; d_k] + b1)
//! z2 = tanh(W2 z1 + b2)
//! w  = θ · z2
//! ```
//!
//! Boundary `v` reads encoder output `v - 1` (frames are 1-based in this
//! convention); boundary 0 reads a zero vector. `d_k` is indexed by the
//! duration bucket `⌊log2 (t - s)⌋`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::encoder::EncoderOutputs;
use crate::lattice::{Edge, SearchSpace};
use crate::math::{axpy, dot, tanh, Mat};
use crate::params::{glorot, uniform, ParamSet, EMBEDDING_RANGE};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SrnnConfig {
    pub label_dim: usize,
    pub duration_dim: usize,
    pub hidden1: usize,
    pub hidden2: usize,
}

impl Default for SrnnConfig {
    fn default() -> Self {
        SrnnConfig {
            label_dim: 32,
            duration_dim: 5,
            hidden1: 64,
            hidden2: 64,
        }
    }
}

/// Duration bucket `⌊log2 n⌋` for `n >= 1`.
#[inline]
pub fn duration_bucket(n: usize) -> usize {
    debug_assert!(n >= 1);
    n.ilog2() as usize
}

/// Buckets needed for durations `1..=max_duration`.
pub fn num_buckets(max_duration: usize) -> usize {
    duration_bucket(max_duration.max(1)) + 1
}

#[derive(Clone, Debug, PartialEq)]
pub struct SrnnParams {
    pub label_embeddings: Mat,
    pub duration_embeddings: Mat,
    /// Columns: `[h_s | h_t | c_l | d_k]`.
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
    pub theta: Mat,
}

impl SrnnParams {
    pub fn init(
        num_labels: usize,
        enc_dim: usize,
        max_duration: usize,
        cfg: &SrnnConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let input = 2 * enc_dim + cfg.label_dim + cfg.duration_dim;
        SrnnParams {
            label_embeddings: uniform(num_labels, cfg.label_dim, EMBEDDING_RANGE, rng),
            duration_embeddings: uniform(num_buckets(max_duration), cfg.duration_dim, EMBEDDING_RANGE, rng),
            w1: glorot(cfg.hidden1, input, rng),
            b1: Mat::zeros(cfg.hidden1, 1),
            w2: glorot(cfg.hidden2, cfg.hidden1, rng),
            b2: Mat::zeros(cfg.hidden2, 1),
            theta: glorot(cfg.hidden2, 1, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        SrnnParams {
            label_embeddings: self.label_embeddings.zeros_like(),
            duration_embeddings: self.duration_embeddings.zeros_like(),
            w1: self.w1.zeros_like(),
            b1: self.b1.zeros_like(),
            w2: self.w2.zeros_like(),
            b2: self.b2.zeros_like(),
            theta: self.theta.zeros_like(),
        }
    }

    fn enc_dim(&self) -> usize {
        (self.w1.cols() - self.label_embeddings.cols() - self.duration_embeddings.cols()) / 2
    }

    fn hidden1(&self) -> usize {
        self.w1.rows()
    }
}

impl ParamSet for SrnnParams {
    fn tensors(&self) -> Vec<(String, &Mat)> {
        vec![
            ("dec.srnn.label_embeddings".into(), &self.label_embeddings),
            ("dec.srnn.duration_embeddings".into(), &self.duration_embeddings),
            ("dec.srnn.w1".into(), &self.w1),
            ("dec.srnn.b1".into(), &self.b1),
            ("dec.srnn.w2".into(), &self.w2),
            ("dec.srnn.b2".into(), &self.b2),
            ("dec.srnn.theta".into(), &self.theta),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        vec![
            &mut self.label_embeddings,
            &mut self.duration_embeddings,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.theta,
        ]
    }
}

fn boundary_vector(enc: &EncoderOutputs, v: usize) -> Vec<f64> {
    if v == 0 {
        vec![0.0; enc.dim()]
    } else {
        enc.h.row(v - 1).to_vec()
    }
}

/// Weight of one segment, evaluating `W1` on the full concatenated input.
pub fn srnn_score(enc: &EncoderOutputs, edge: &Edge, params: &SrnnParams) -> f64 {
    let mut input = boundary_vector(enc, edge.start);
    input.extend(boundary_vector(enc, edge.end));
    input.extend_from_slice(params.label_embeddings.row(edge.label));
    input.extend_from_slice(params.duration_embeddings.row(duration_bucket(edge.duration())));
    let mut z1 = params.b1.as_slice().to_vec();
    params.w1.matvec_add(&input, &mut z1);
    z1.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut z2 = params.b2.as_slice().to_vec();
    params.w2.matvec_add(&z1, &mut z2);
    z2.iter().zip(params.theta.as_slice()).map(|(&a, &th)| th * tanh(a)).sum()
}

/// `out += W[:, offset..offset + x.len()] x`.
fn block_matvec_add(w: &Mat, offset: usize, x: &[f64], out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate() {
        *o += dot(&w.row(r)[offset..offset + x.len()], x);
    }
}

/// `out += W[:, offset..offset + out.len()]^T y`.
fn block_matvec_t_add(w: &Mat, offset: usize, y: &[f64], out: &mut [f64]) {
    let width = out.len();
    for (r, &yr) in y.iter().enumerate() {
        if yr != 0.0 {
            axpy(yr, &w.row(r)[offset..offset + width], out);
        }
    }
}

/// `W[:, offset..] += a x^T`.
fn block_add_outer(w: &mut Mat, offset: usize, a: &[f64], x: &[f64]) {
    for (r, &ar) in a.iter().enumerate() {
        if ar != 0.0 {
            axpy(ar, x, &mut w.row_mut(r)[offset..offset + x.len()]);
        }
    }
}

/// First-layer contributions split by input block, so each edge only sums
/// four precomputed vectors.
#[derive(Clone, Debug)]
pub struct SrnnCache {
    left: Mat,
    right: Mat,
    label: Mat,
    duration: Mat,
}

pub(crate) fn precompute(enc: &EncoderOutputs, params: &SrnnParams) -> SrnnCache {
    let d = params.enc_dim();
    let h1 = params.hidden1();
    let frames = enc.frames();
    let mut left = Mat::zeros(frames + 1, h1);
    let mut right = Mat::zeros(frames + 1, h1);
    for v in 1..=frames {
        block_matvec_add(&params.w1, 0, enc.h.row(v - 1), left.row_mut(v));
        block_matvec_add(&params.w1, d, enc.h.row(v - 1), right.row_mut(v));
    }
    let label_off = 2 * d;
    let dur_off = label_off + params.label_embeddings.cols();
    let mut label = Mat::zeros(params.label_embeddings.rows(), h1);
    for l in 0..label.rows() {
        let row = label.row_mut(l);
        row.copy_from_slice(params.b1.as_slice());
        block_matvec_add(&params.w1, label_off, params.label_embeddings.row(l), row);
    }
    let mut duration = Mat::zeros(params.duration_embeddings.rows(), h1);
    for k in 0..duration.rows() {
        block_matvec_add(&params.w1, dur_off, params.duration_embeddings.row(k), duration.row_mut(k));
    }
    SrnnCache {
        left,
        right,
        label,
        duration,
    }
}

struct Activations {
    pre1: Vec<f64>,
    z1: Vec<f64>,
    z2: Vec<f64>,
}

impl Activations {
    fn new(params: &SrnnParams) -> Self {
        Activations {
            pre1: vec![0.0; params.w1.rows()],
            z1: vec![0.0; params.w1.rows()],
            z2: vec![0.0; params.w2.rows()],
        }
    }

    fn run(&mut self, cache: &SrnnCache, params: &SrnnParams, e: &Edge) -> f64 {
        let (l, s, t) = (cache.left.row(e.start), cache.right.row(e.end), cache.label.row(e.label));
        let d = cache.duration.row(duration_bucket(e.duration()));
        for k in 0..self.pre1.len() {
            let p = l[k] + s[k] + t[k] + d[k];
            self.pre1[k] = p;
            self.z1[k] = p.max(0.0);
        }
        params.w2.matvec(&self.z1, &mut self.z2);
        let mut w = 0.0;
        for (k, z) in self.z2.iter_mut().enumerate() {
            *z = tanh(*z + params.b2.as_slice()[k]);
            w += params.theta.as_slice()[k] * *z;
        }
        w
    }
}

pub(crate) fn score_edges(space: &SearchSpace, cache: &SrnnCache, params: &SrnnParams) -> Vec<f64> {
    let mut act = Activations::new(params);
    space.edges().iter().map(|e| act.run(cache, params, e)).collect()
}

/// Chain rule from per-edge gradients to `SrnnParams` and `∂L/∂h`. Edges
/// with zero gradient are skipped.
pub(crate) fn backprop(
    space: &SearchSpace,
    enc: &EncoderOutputs,
    cache: &SrnnCache,
    params: &SrnnParams,
    edge_grads: &[f64],
    grads: &mut SrnnParams,
) -> Mat {
    let h1 = params.hidden1();
    let frames = enc.frames();
    let mut act = Activations::new(params);
    let mut d_left = Mat::zeros(frames + 1, h1);
    let mut d_right = Mat::zeros(frames + 1, h1);
    let mut d_label = Mat::zeros(cache.label.rows(), h1);
    let mut d_duration = Mat::zeros(cache.duration.rows(), h1);
    let mut d_pre2 = vec![0.0; params.w2.rows()];
    let mut d_pre1 = vec![0.0; h1];
    for (e, &g) in space.edges().iter().zip(edge_grads) {
        if g == 0.0 {
            continue;
        }
        act.run(cache, params, e);
        axpy(g, &act.z2, grads.theta.as_mut_slice());
        for (k, d) in d_pre2.iter_mut().enumerate() {
            let z = act.z2[k];
            *d = g * params.theta.as_slice()[k] * (1.0 - z * z);
        }
        grads.w2.add_outer(1.0, &d_pre2, &act.z1);
        axpy(1.0, &d_pre2, grads.b2.as_mut_slice());
        d_pre1.iter_mut().for_each(|v| *v = 0.0);
        params.w2.matvec_t_add(&d_pre2, &mut d_pre1);
        for (d, &p) in d_pre1.iter_mut().zip(&act.pre1) {
            if p <= 0.0 {
                *d = 0.0;
            }
        }
        axpy(1.0, &d_pre1, d_left.row_mut(e.start));
        axpy(1.0, &d_pre1, d_right.row_mut(e.end));
        axpy(1.0, &d_pre1, d_label.row_mut(e.label));
        axpy(1.0, &d_pre1, d_duration.row_mut(duration_bucket(e.duration())));
    }

    let d = params.enc_dim();
    let label_off = 2 * d;
    let dur_off = label_off + params.label_embeddings.cols();
    let mut d_h = Mat::zeros(frames, d);
    for v in 1..=frames {
        let h = enc.h.row(v - 1);
        block_add_outer(&mut grads.w1, 0, d_left.row(v), h);
        block_add_outer(&mut grads.w1, d, d_right.row(v), h);
        block_matvec_t_add(&params.w1, 0, d_left.row(v), d_h.row_mut(v - 1));
        block_matvec_t_add(&params.w1, d, d_right.row(v), d_h.row_mut(v - 1));
    }
    for l in 0..d_label.rows() {
        let g = d_label.row(l);
        block_add_outer(&mut grads.w1, label_off, g, params.label_embeddings.row(l));
        axpy(1.0, g, grads.b1.as_mut_slice());
        block_matvec_t_add(&params.w1, label_off, g, grads.label_embeddings.row_mut(l));
    }
    for k in 0..d_duration.rows() {
        let g = d_duration.row(k);
        block_add_outer(&mut grads.w1, dur_off, g, params.duration_embeddings.row(k));
        block_matvec_t_add(&params.w1, dur_off, g, grads.duration_embeddings.row_mut(k));
    }
    d_h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buckets_are_log_scale() {
        assert_eq!(
            (1..=9).map(duration_bucket).collect::<Vec<_>>(),
            vec![0, 1, 1, 2, 2, 2, 2, 3, 3]
        );
        assert_eq!(num_buckets(8), 4);
        assert_eq!(num_buckets(30), 5);
        assert_eq!(num_buckets(1), 1);
    }
}
