//! Frame-classifier weight function: segment scores assembled from per-frame
//! label log-probabilities (span average, three interior samples, three
//! frames on either side of each boundary), plus duration and bias terms.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::encoder::{classifier_head, EncoderOutputs, HeadParams};
use crate::lattice::{Edge, SearchSpace};
use crate::math::{exp, log_softmax_backward, log_softmax_in_place, Mat};
use crate::params::{glorot, ParamSet};

/// Number of boundary samples on each side of a segment.
pub const BOUNDARY_TAPS: usize = 3;

/// Where boundary samples are read, relative to the defaults `s - k`
/// (left) and `t + k - 1` (right). Indices are clamped to the utterance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FcConfig {
    pub left_shift: isize,
    pub right_shift: isize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FcParams {
    pub classifier: HeadParams,
    pub avg: Mat,
    pub sample: Mat,
    pub left: [Mat; BOUNDARY_TAPS],
    pub right: [Mat; BOUNDARY_TAPS],
    /// `num_labels x max_duration`; column `n - 1` scores duration `n`.
    pub duration: Mat,
    pub bias: Mat,
}

impl FcParams {
    pub fn init(num_labels: usize, enc_dim: usize, max_duration: usize, rng: &mut impl Rng) -> Self {
        let l = num_labels;
        FcParams {
            classifier: HeadParams::init(l, enc_dim, rng),
            avg: glorot(l, l, rng),
            sample: glorot(l, l, rng),
            left: core::array::from_fn(|_| glorot(l, l, rng)),
            right: core::array::from_fn(|_| glorot(l, l, rng)),
            duration: glorot(l, max_duration, rng),
            bias: Mat::zeros(l, 1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        FcParams {
            classifier: self.classifier.zeros_like(),
            avg: self.avg.zeros_like(),
            sample: self.sample.zeros_like(),
            left: core::array::from_fn(|k| self.left[k].zeros_like()),
            right: core::array::from_fn(|k| self.right[k].zeros_like()),
            duration: self.duration.zeros_like(),
            bias: self.bias.zeros_like(),
        }
    }

    pub fn num_labels(&self) -> usize {
        self.avg.rows()
    }

    pub fn max_duration(&self) -> usize {
        self.duration.cols()
    }
}

impl ParamSet for FcParams {
    fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = vec![
            ("dec.fc.classifier.weight".into(), &self.classifier.weight),
            ("dec.fc.classifier.bias".into(), &self.classifier.bias),
            ("dec.fc.avg".into(), &self.avg),
            ("dec.fc.sample".into(), &self.sample),
        ];
        for k in 0..BOUNDARY_TAPS {
            out.push((format!("dec.fc.left{}", k + 1), &self.left[k]));
        }
        for k in 0..BOUNDARY_TAPS {
            out.push((format!("dec.fc.right{}", k + 1), &self.right[k]));
        }
        out.push(("dec.fc.duration".into(), &self.duration));
        out.push(("dec.fc.bias".into(), &self.bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = vec![
            &mut self.classifier.weight,
            &mut self.classifier.bias,
            &mut self.avg,
            &mut self.sample,
        ];
        out.extend(self.left.iter_mut());
        out.extend(self.right.iter_mut());
        out.push(&mut self.duration);
        out.push(&mut self.bias);
        out
    }
}

/// Interior sample frames `s + ⌊n/6⌋`, `s + ⌊n/2⌋`, `s + ⌊5n/6⌋` for a
/// segment of `n = t - s` frames.
#[inline]
pub fn sample_positions(start: usize, end: usize) -> [usize; 3] {
    let n = end - start;
    [start + n / 6, start + n / 2, start + 5 * n / 6]
}

#[inline]
fn clamp_frame(i: isize, frames: usize) -> usize {
    i.clamp(0, frames as isize - 1) as usize
}

/// Left boundary frame for tap `k` (1-based).
#[inline]
pub fn left_frame(start: usize, k: usize, cfg: &FcConfig, frames: usize) -> usize {
    clamp_frame(start as isize - k as isize + cfg.left_shift, frames)
}

/// Right boundary frame for tap `k` (1-based).
#[inline]
pub fn right_frame(end: usize, k: usize, cfg: &FcConfig, frames: usize) -> usize {
    clamp_frame(end as isize + k as isize - 1 + cfg.right_shift, frames)
}

fn frame_log_probs(enc: &EncoderOutputs, head: &HeadParams, i: usize) -> Vec<f64> {
    let mut z = head.bias.as_slice().to_vec();
    head.weight.matvec_add(enc.h.row(i), &mut z);
    log_softmax_in_place(&mut z);
    z
}

fn transformed(m: &Mat, z: &[f64], label: usize) -> f64 {
    crate::math::dot(m.row(label), z)
}

/// Weight of one segment, computed directly from the encoder outputs it
/// touches.
pub fn fc_score(enc: &EncoderOutputs, edge: &Edge, params: &FcParams, cfg: &FcConfig) -> f64 {
    let frames = enc.frames();
    let (s, t, l) = (edge.start, edge.end, edge.label);
    let n = t - s;
    let z = |i: usize| frame_log_probs(enc, &params.classifier, i);
    let mut avg = 0.0;
    for i in s..t {
        avg += transformed(&params.avg, &z(i), l);
    }
    let mut w = avg / n as f64;
    for j in sample_positions(s, t) {
        w += transformed(&params.sample, &z(j), l);
    }
    for k in 1..=BOUNDARY_TAPS {
        w += transformed(&params.left[k - 1], &z(left_frame(s, k, cfg, frames)), l);
        w += transformed(&params.right[k - 1], &z(right_frame(t, k, cfg, frames)), l);
    }
    w + params.duration.get(l, n - 1) + params.bias.get(l, 0)
}

/// Per-frame quantities shared by every edge of an utterance.
#[derive(Clone, Debug)]
pub struct FcCache {
    pub log_probs: Mat,
    avg_prefix: Mat,
    sample: Mat,
    left: [Mat; BOUNDARY_TAPS],
    right: [Mat; BOUNDARY_TAPS],
}

/// `u_i = M z_i` for every frame.
fn transform_all(m: &Mat, z: &Mat) -> Mat {
    let mut out = Mat::zeros(z.rows(), m.rows());
    for i in 0..z.rows() {
        m.matvec(z.row(i), out.row_mut(i));
    }
    out
}

pub(crate) fn precompute(enc: &EncoderOutputs, params: &FcParams) -> FcCache {
    let z = classifier_head(enc, &params.classifier);
    let avg = transform_all(&params.avg, &z);
    let labels = params.num_labels();
    let mut avg_prefix = Mat::zeros(z.rows() + 1, labels);
    for i in 0..z.rows() {
        for l in 0..labels {
            let v = avg_prefix.get(i, l) + avg.get(i, l);
            avg_prefix.set(i + 1, l, v);
        }
    }
    FcCache {
        sample: transform_all(&params.sample, &z),
        left: core::array::from_fn(|k| transform_all(&params.left[k], &z)),
        right: core::array::from_fn(|k| transform_all(&params.right[k], &z)),
        avg_prefix,
        log_probs: z,
    }
}

pub(crate) fn score_edges(space: &SearchSpace, cache: &FcCache, params: &FcParams, cfg: &FcConfig) -> Vec<f64> {
    let frames = cache.log_probs.rows();
    space
        .edges()
        .iter()
        .map(|e| {
            let (s, t, l) = (e.start, e.end, e.label);
            let n = t - s;
            let mut w = (cache.avg_prefix.get(t, l) - cache.avg_prefix.get(s, l)) / n as f64;
            for j in sample_positions(s, t) {
                w += cache.sample.get(j, l);
            }
            for k in 1..=BOUNDARY_TAPS {
                w += cache.left[k - 1].get(left_frame(s, k, cfg, frames), l);
                w += cache.right[k - 1].get(right_frame(t, k, cfg, frames), l);
            }
            w + params.duration.get(l, n - 1) + params.bias.get(l, 0)
        })
        .collect()
}

/// Chain rule from per-edge gradients to `FcParams` and `∂L/∂h`.
pub(crate) fn backprop(
    space: &SearchSpace,
    enc: &EncoderOutputs,
    cache: &FcCache,
    params: &FcParams,
    cfg: &FcConfig,
    edge_grads: &[f64],
    grads: &mut FcParams,
) -> Mat {
    let z = &cache.log_probs;
    let (frames, labels) = z.shape();
    // Range updates for the span average go through a difference array.
    let mut avg_diff = Mat::zeros(frames + 1, labels);
    let mut d_sample = Mat::zeros(frames, labels);
    let mut d_left: [Mat; BOUNDARY_TAPS] = core::array::from_fn(|_| Mat::zeros(frames, labels));
    let mut d_right: [Mat; BOUNDARY_TAPS] = core::array::from_fn(|_| Mat::zeros(frames, labels));
    for (e, &g) in space.edges().iter().zip(edge_grads) {
        if g == 0.0 {
            continue;
        }
        let (s, t, l) = (e.start, e.end, e.label);
        let n = t - s;
        let per_frame = g / n as f64;
        avg_diff.set(s, l, avg_diff.get(s, l) + per_frame);
        avg_diff.set(t, l, avg_diff.get(t, l) - per_frame);
        for j in sample_positions(s, t) {
            d_sample.set(j, l, d_sample.get(j, l) + g);
        }
        for k in 1..=BOUNDARY_TAPS {
            let i = left_frame(s, k, cfg, frames);
            d_left[k - 1].set(i, l, d_left[k - 1].get(i, l) + g);
            let i = right_frame(t, k, cfg, frames);
            d_right[k - 1].set(i, l, d_right[k - 1].get(i, l) + g);
        }
        grads.duration.set(l, n - 1, grads.duration.get(l, n - 1) + g);
        grads.bias.set(l, 0, grads.bias.get(l, 0) + g);
    }
    let mut d_avg = vec![0.0; labels];
    let mut d_z = vec![0.0; labels];
    let mut d_logits = vec![0.0; labels];
    let mut d_h = Mat::zeros(frames, enc.dim());
    for i in 0..frames {
        for (l, d) in d_avg.iter_mut().enumerate() {
            *d += avg_diff.get(i, l);
        }
        d_z.iter_mut().for_each(|v| *v = 0.0);
        let zi = z.row(i);
        let pairs = core::iter::once((&params.avg, &mut grads.avg, &d_avg[..]))
            .chain(core::iter::once((&params.sample, &mut grads.sample, d_sample.row(i))))
            .chain(
                params
                    .left
                    .iter()
                    .zip(grads.left.iter_mut())
                    .zip(d_left.iter())
                    .map(|((p, g), d)| (p, g, d.row(i))),
            )
            .chain(
                params
                    .right
                    .iter()
                    .zip(grads.right.iter_mut())
                    .zip(d_right.iter())
                    .map(|((p, g), d)| (p, g, d.row(i))),
            );
        for (m, gm, du) in pairs {
            gm.add_outer(1.0, du, zi);
            m.matvec_t_add(du, &mut d_z);
        }
        if d_z.iter().all(|&v| v == 0.0) {
            continue;
        }
        log_softmax_backward(zi, &d_z, &mut d_logits);
        grads.classifier.weight.add_outer(1.0, &d_logits, enc.h.row(i));
        crate::math::axpy(1.0, &d_logits, grads.classifier.bias.as_mut_slice());
        params.classifier.weight.matvec_t_add(&d_logits, d_h.row_mut(i));
    }
    d_h
}

/// Frame posteriors `exp(z_i)` for the cached log-probabilities.
pub fn posteriors(cache: &FcCache) -> Mat {
    let mut p = cache.log_probs.clone();
    p.as_mut_slice().iter_mut().for_each(|v| *v = exp(*v));
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_offsets_for_six_frames() {
        assert_eq!(sample_positions(0, 6), [1, 3, 5]);
        assert_eq!(sample_positions(4, 5), [4, 4, 4]);
        assert_eq!(sample_positions(2, 14), [4, 8, 12]);
    }

    #[test]
    fn boundary_frames_clamp() {
        let cfg = FcConfig::default();
        assert_eq!(left_frame(1, 3, &cfg, 10), 0);
        assert_eq!(left_frame(5, 2, &cfg, 10), 3);
        assert_eq!(right_frame(9, 3, &cfg, 10), 9);
        assert_eq!(right_frame(4, 1, &cfg, 10), 4);
        let shifted = FcConfig { left_shift: 1, right_shift: -1 };
        assert_eq!(left_frame(5, 1, &shifted, 10), 5);
        assert_eq!(right_frame(4, 1, &shifted, 10), 3);
    }
}
