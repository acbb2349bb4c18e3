//! Training losses. The three lattice losses return gradients with respect
//! to edge weights; the frame losses return gradients with respect to the
//! pre-softmax logits of a classifier head.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::dp::{edge_posteriors, forward_backward, max_path, Path};
use crate::error::{invalid, Error, Result};
use crate::lattice::{
    build_ctc_constraint, build_ctc_space, intersect, ConstraintFst, Edge, IntersectedSpace,
    LabelId, RepeatPolicy, SearchSpace,
};
use crate::math::{exp, Mat};

#[derive(Clone, Debug, PartialEq)]
pub struct LossResult {
    pub value: f64,
    /// Per edge for lattice losses; per frame and label (row-major) for
    /// frame losses.
    pub grads: Vec<f64>,
}

impl LossResult {
    pub fn is_finite(&self) -> bool {
        self.value.is_finite() && self.grads.iter().all(|g| g.is_finite())
    }
}

/// Per-frame Hamming cost against a ground-truth path.
///
/// The cost of an edge is the number of frames it covers whose ground-truth
/// label differs from the edge label, times `scale`. It is zero on the
/// ground-truth edges and sums over the edges of any path.
#[derive(Clone, Debug)]
pub struct CostFunction {
    frame_labels: Vec<LabelId>,
    num_labels: usize,
    // prefix[i * num_labels + l] = frames in [0, i) labelled l
    prefix: Vec<u32>,
    scale: f64,
}

impl CostFunction {
    pub fn new(truth: &Path, num_labels: usize) -> Self {
        let mut frame_labels = Vec::new();
        for (&label, &(s, t)) in truth.labels.iter().zip(&truth.segmentation) {
            debug_assert_eq!(s, frame_labels.len());
            frame_labels.extend(core::iter::repeat_n(label, t - s));
        }
        Self::from_frame_labels(frame_labels, num_labels)
    }

    pub fn from_frame_labels(frame_labels: Vec<LabelId>, num_labels: usize) -> Self {
        let n = frame_labels.len();
        let mut prefix = vec![0u32; (n + 1) * num_labels];
        for (i, &l) in frame_labels.iter().enumerate() {
            let (done, rest) = prefix.split_at_mut((i + 1) * num_labels);
            rest[..num_labels].copy_from_slice(&done[i * num_labels..]);
            if l < num_labels {
                rest[l] += 1;
            }
        }
        CostFunction {
            frame_labels,
            num_labels,
            prefix,
            scale: 1.0,
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn frame_labels(&self) -> &[LabelId] {
        &self.frame_labels
    }

    /// `cost(e, p)`.
    pub fn edge_cost(&self, edge: &Edge) -> f64 {
        let (s, t) = (edge.start, edge.end.min(self.frame_labels.len()));
        let matching = if edge.label < self.num_labels && s < t {
            self.prefix[t * self.num_labels + edge.label] - self.prefix[s * self.num_labels + edge.label]
        } else {
            0
        };
        self.scale * (edge.duration() - matching as usize) as f64
    }

    /// `cost(p', p) = Σ_{e'∈p'} cost(e', p)`.
    pub fn path_cost(&self, space: &SearchSpace, path: &Path) -> f64 {
        path.edges.iter().map(|&e| self.edge_cost(space.edge(e))).sum()
    }
}

/// Mislabelled frame count of `edge` against `truth`.
pub fn overlap_cost(edge: &Edge, truth: &Path) -> f64 {
    let mut cost = 0usize;
    for (&label, &(s, t)) in truth.labels.iter().zip(&truth.segmentation) {
        let lo = s.max(edge.start);
        let hi = t.min(edge.end);
        if lo < hi && label != edge.label {
            cost += hi - lo;
        }
    }
    cost as f64
}

fn check_truth(space: &SearchSpace, truth: &Path) -> Result<()> {
    let rebuilt = Path::from_edges(space, truth.edges.clone())?;
    if rebuilt != *truth {
        return Err(Error::PathNotInSpace("labels or segmentation disagree with edges".into()));
    }
    Ok(())
}

fn check_weights(space: &SearchSpace, weights: &[f64]) -> Result<()> {
    if weights.len() != space.num_edges() {
        return Err(Error::ShapeMismatch(format!(
            "{} weights for {} edges",
            weights.len(),
            space.num_edges()
        )));
    }
    Ok(())
}

/// `argmax_{p'} [cost(p', p) + w(p')]` and its augmented score.
pub fn cost_augmented_decode(
    space: &SearchSpace,
    weights: &[f64],
    cost: &CostFunction,
) -> Result<(Path, f64)> {
    check_weights(space, weights)?;
    let augmented: Vec<f64> = space
        .edges()
        .iter()
        .map(|e| weights[e.id] + cost.edge_cost(e))
        .collect();
    max_path(space, &augmented)
}

/// Structured hinge loss with a decomposable cost and its subgradient
/// `−1[e∈p] + 1[e∈p̃]`.
pub fn hinge_loss(
    space: &SearchSpace,
    weights: &[f64],
    truth: &Path,
    cost: &CostFunction,
) -> Result<LossResult> {
    check_truth(space, truth)?;
    let (augmented, score) = cost_augmented_decode(space, weights, cost)?;
    let value = score - truth.weight(weights);
    let mut grads = vec![0.0; space.num_edges()];
    for &e in &truth.edges {
        grads[e] -= 1.0;
    }
    for &e in &augmented.edges {
        grads[e] += 1.0;
    }
    Ok(LossResult { value, grads })
}

/// `−log P(p | x) = −w(p) + log Z(x)`, gradient `−1[e∈p] + γ(e)`.
pub fn log_loss(space: &SearchSpace, weights: &[f64], truth: &Path) -> Result<LossResult> {
    check_truth(space, truth)?;
    let marginals = forward_backward(space, weights)?;
    let mut grads = edge_posteriors(space, weights, &marginals);
    for &e in &truth.edges {
        grads[e] -= 1.0;
    }
    Ok(LossResult {
        value: marginals.log_partition - truth.weight(weights),
        grads,
    })
}

/// `−log Z(x, y) + log Z(x)` where `Z(x, y)` sums over the paths accepted by
/// `constraint`.
pub fn marginal_log_loss(
    space: &SearchSpace,
    weights: &[f64],
    constraint: &ConstraintFst,
) -> Result<LossResult> {
    let constrained = intersect(space, constraint)?;
    marginal_log_loss_intersected(space, weights, &constrained)
}

/// As [`marginal_log_loss`], with `G ∩ F` already built.
pub fn marginal_log_loss_intersected(
    space: &SearchSpace,
    weights: &[f64],
    constrained: &IntersectedSpace,
) -> Result<LossResult> {
    check_weights(space, weights)?;
    let full = forward_backward(space, weights)?;
    let mut grads = edge_posteriors(space, weights, &full);
    let inner_weights = constrained.project_weights(weights);
    let inner = forward_backward(constrained.space(), &inner_weights)?;
    let inner_post = edge_posteriors(constrained.space(), &inner_weights, &inner);
    constrained.scatter_add(&inner_post, -1.0, &mut grads);
    Ok(LossResult {
        value: full.log_partition - inner.log_partition,
        grads,
    })
}

fn check_frame_labels(log_probs: &Mat, labels: &[LabelId]) -> Result<()> {
    if labels.len() != log_probs.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} frame labels for {} frames",
            labels.len(),
            log_probs.rows()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= log_probs.cols()) {
        return Err(invalid(format!("frame label {bad} out of range")));
    }
    Ok(())
}

/// Mean frame-wise cross entropy; gradient is with respect to the logits
/// that produced the log-softmax rows `log_probs`.
pub fn frame_cross_entropy(log_probs: &Mat, frame_labels: &[LabelId]) -> Result<LossResult> {
    check_frame_labels(log_probs, frame_labels)?;
    let n = log_probs.rows() as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(log_probs.len());
    for (i, &label) in frame_labels.iter().enumerate() {
        let row = log_probs.row(i);
        value -= row[label];
        for (l, &lp) in row.iter().enumerate() {
            let onehot = if l == label { 1.0 } else { 0.0 };
            grads.push((exp(lp) - onehot) / n);
        }
    }
    Ok(LossResult {
        value: value / n,
        grads,
    })
}

/// CTC as marginal log loss on the frame-level search space with
/// log-softmax edge weights. Gradients are with respect to the logits.
pub fn ctc_loss(
    log_probs: &Mat,
    labels: &[LabelId],
    blank: LabelId,
    repeats: RepeatPolicy,
) -> Result<LossResult> {
    let (frames, symbols) = log_probs.shape();
    let space = build_ctc_space(frames, symbols, blank)?;
    let constraint = build_ctc_constraint(labels, blank, repeats)?;
    let weights = log_probs.as_slice();
    let mll = marginal_log_loss(&space, weights, &constraint)?;
    let mut grads = vec![0.0; weights.len()];
    for t in 0..frames {
        let g = &mll.grads[t * symbols..(t + 1) * symbols];
        let total: f64 = g.iter().sum();
        for (l, out) in grads[t * symbols..(t + 1) * symbols].iter_mut().enumerate() {
            *out = g[l] - exp(log_probs.get(t, l)) * total;
        }
    }
    Ok(LossResult {
        value: mll.value,
        grads,
    })
}

/// Removes consecutive duplicates, then blanks.
pub fn ctc_collapse(frames: &[LabelId], blank: LabelId) -> Vec<LabelId> {
    let mut out = Vec::new();
    let mut prev = None;
    for &l in frames {
        if Some(l) != prev && l != blank {
            out.push(l);
        }
        prev = Some(l);
    }
    out
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(hyp: &[T], reference: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut cur = vec![0; reference.len() + 1];
    for (i, h) in hyp.iter().enumerate() {
        cur[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let sub = prev[j] + usize::from(h != r);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[reference.len()]
}
