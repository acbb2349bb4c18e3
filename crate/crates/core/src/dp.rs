//! Exact inference over a [`SearchSpace`]: maximum-weight path, forward and
//! backward marginals in log space, and edge posteriors.
//!
//! All sweeps rely on vertex ids being a topological order. Every
//! accumulation is done in `f64`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::lattice::{LabelId, SearchSpace};
use crate::math::{exp, NEG_INF};

/// Per-edge weights `w(e)` with a parallel gradient buffer `∂L/∂w(e)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeWeightTable {
    pub values: Vec<f64>,
    pub grads: Vec<f64>,
}

impl EdgeWeightTable {
    pub fn new(values: Vec<f64>) -> Self {
        let grads = vec![0.0; values.len()];
        EdgeWeightTable { values, grads }
    }

    pub fn zeros(num_edges: usize) -> Self {
        Self::new(vec![0.0; num_edges])
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `grads += scale * g`.
    pub fn accumulate(&mut self, g: &[f64], scale: f64) {
        assert_eq!(g.len(), self.grads.len());
        for (d, &v) in self.grads.iter_mut().zip(g) {
            *d += scale * v;
        }
    }

    pub fn clear_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn check(&self, space: &SearchSpace) -> Result<()> {
        if self.values.len() != space.num_edges() {
            return Err(Error::ShapeMismatch(format!(
                "{} weights for {} edges",
                self.values.len(),
                space.num_edges()
            )));
        }
        Ok(())
    }
}

/// A path through a search space: edge ids, label sequence and segmentation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Path {
    pub edges: Vec<usize>,
    pub labels: Vec<LabelId>,
    pub segmentation: Vec<(usize, usize)>,
}

impl Path {
    /// Validates that `edges` chain from the initial to the final vertex.
    pub fn from_edges(space: &SearchSpace, edges: Vec<usize>) -> Result<Self> {
        let mut at = space.initial();
        for &e in &edges {
            if e >= space.num_edges() {
                return Err(Error::PathNotInSpace(format!("edge {e} does not exist")));
            }
            let edge = space.edge(e);
            if edge.tail != at {
                return Err(Error::PathNotInSpace(format!("edge {e} does not continue the path")));
            }
            at = edge.head;
        }
        if at != space.final_vertex() {
            return Err(Error::PathNotInSpace("path does not reach the final vertex".into()));
        }
        let labels = edges.iter().map(|&e| space.edge(e).label).collect();
        let segmentation = edges
            .iter()
            .map(|&e| (space.edge(e).start, space.edge(e).end))
            .collect();
        Ok(Path {
            edges,
            labels,
            segmentation,
        })
    }

    /// Looks up the edges for `(label, start, end)` segments in a space whose
    /// vertex id equals its time (segmental and CTC spaces).
    pub fn from_segments(space: &SearchSpace, segments: &[(LabelId, usize, usize)]) -> Result<Self> {
        let mut edges = Vec::with_capacity(segments.len());
        for &(label, start, end) in segments {
            let tail = space
                .vertices()
                .iter()
                .position(|v| v.time == start)
                .ok_or_else(|| Error::PathNotInSpace(format!("no vertex at time {start}")))?;
            let head = space
                .vertices()
                .iter()
                .position(|v| v.time == end)
                .ok_or_else(|| Error::PathNotInSpace(format!("no vertex at time {end}")))?;
            let e = space.find_edge(tail, label, head).ok_or_else(|| {
                Error::PathNotInSpace(format!("no edge for segment ({label}, {start}, {end})"))
            })?;
            edges.push(e);
        }
        Self::from_edges(space, edges)
    }

    /// `(label, start, end)` for each segment.
    pub fn segments(&self) -> Vec<(LabelId, usize, usize)> {
        self.labels
            .iter()
            .zip(&self.segmentation)
            .map(|(&l, &(s, t))| (l, s, t))
            .collect()
    }

    /// `w(p) = Σ_{e∈p} w(e)`.
    pub fn weight(&self, weights: &[f64]) -> f64 {
        self.edges.iter().map(|&e| weights[e]).sum()
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

/// Maximum-weight path by a single forward sweep and backtracking.
///
/// Ties are broken toward the smallest edge id.
pub fn max_path(space: &SearchSpace, weights: &[f64]) -> Result<(Path, f64)> {
    if weights.len() != space.num_edges() {
        return Err(Error::ShapeMismatch(format!(
            "{} weights for {} edges",
            weights.len(),
            space.num_edges()
        )));
    }
    let nv = space.num_vertices();
    let mut best = vec![NEG_INF; nv];
    let mut back = vec![usize::MAX; nv];
    best[space.initial()] = 0.0;
    for v in 0..nv {
        if v == space.initial() {
            continue;
        }
        let mut d = NEG_INF;
        let mut arg = usize::MAX;
        for &e in space.in_edges(v) {
            let from = best[space.edge(e).tail];
            if from == NEG_INF {
                continue;
            }
            let cand = from + weights[e];
            if cand > d {
                d = cand;
                arg = e;
            }
        }
        best[v] = d;
        back[v] = arg;
    }
    let fin = space.final_vertex();
    let score = best[fin];
    if score == NEG_INF {
        return Err(Error::NoPath);
    }
    let mut edges = Vec::new();
    let mut u = fin;
    while u != space.initial() {
        let e = back[u];
        edges.push(e);
        u = space.edge(e).tail;
    }
    edges.reverse();
    Ok((Path::from_edges(space, edges)?, score))
}

/// Forward and backward log marginals.
#[derive(Clone, Debug, PartialEq)]
pub struct Marginals {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub log_partition: f64,
}

/// `α(v)` and `β(v)` in log space; unreachable vertices get `-∞`.
pub fn forward_backward(space: &SearchSpace, weights: &[f64]) -> Result<Marginals> {
    if weights.len() != space.num_edges() {
        return Err(Error::ShapeMismatch(format!(
            "{} weights for {} edges",
            weights.len(),
            space.num_edges()
        )));
    }
    let nv = space.num_vertices();
    let mut alpha = vec![NEG_INF; nv];
    alpha[space.initial()] = 0.0;
    let mut terms = Vec::new();
    for v in 0..nv {
        if v == space.initial() {
            continue;
        }
        terms.clear();
        terms.extend(
            space
                .in_edges(v)
                .iter()
                .map(|&e| alpha[space.edge(e).tail] + weights[e]),
        );
        alpha[v] = log_sum(&terms);
    }
    let mut beta = vec![NEG_INF; nv];
    beta[space.final_vertex()] = 0.0;
    for v in (0..nv).rev() {
        if v == space.final_vertex() {
            continue;
        }
        terms.clear();
        terms.extend(
            space
                .out_edges(v)
                .iter()
                .map(|&e| beta[space.edge(e).head] + weights[e]),
        );
        beta[v] = log_sum(&terms);
    }
    let log_partition = alpha[space.final_vertex()];
    if log_partition == NEG_INF {
        return Err(Error::NoPath);
    }
    Ok(Marginals {
        alpha,
        beta,
        log_partition,
    })
}

// `-∞` terms are skipped so `(-∞) - (-∞)` never occurs.
#[inline]
fn log_sum(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(NEG_INF, f64::max);
    if max == NEG_INF {
        return NEG_INF;
    }
    let sum: f64 = terms
        .iter()
        .filter(|&&t| t != NEG_INF)
        .map(|&t| exp(t - max))
        .sum();
    max + crate::math::ln(sum)
}

/// `γ(e) = exp(α(tail) + w(e) + β(head) − log Z)`.
pub fn edge_posteriors(space: &SearchSpace, weights: &[f64], marginals: &Marginals) -> Vec<f64> {
    space
        .edges()
        .iter()
        .map(|e| {
            let a = marginals.alpha[e.tail];
            let b = marginals.beta[e.head];
            if a == NEG_INF || b == NEG_INF {
                0.0
            } else {
                exp(a + weights[e.id] + b - marginals.log_partition)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_ctc_space, build_segmental_space};

    fn one_edge() -> SearchSpace {
        build_segmental_space(1, 1, 1).unwrap()
    }

    #[test]
    fn single_edge_lattice() {
        let g = one_edge();
        let (p, s) = max_path(&g, &[2.5]).unwrap();
        assert_eq!((p.edges.clone(), s), (vec![0], 2.5));
        let m = forward_backward(&g, &[2.5]).unwrap();
        assert_eq!(m.log_partition, 2.5);
        assert_eq!(m.beta[0], 2.5);
        let post = edge_posteriors(&g, &[2.5], &m);
        assert!((post[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn equal_weights_path_length() {
        for (t, d) in [(5, 2), (7, 3), (6, 6), (4, 1)] {
            let g = build_segmental_space(t, 2, d).unwrap();
            let (_, s) = max_path(&g, &vec![0.5; g.num_edges()]).unwrap();
            assert!((s - 0.5 * t as f64).abs() < 1e-12);
            let (_, s) = max_path(&g, &vec![-0.5; g.num_edges()]).unwrap();
            assert!((s + 0.5 * t.div_ceil(d) as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn ties_take_smallest_edge_id() {
        let g = build_segmental_space(3, 3, 2).unwrap();
        let (p, _) = max_path(&g, &vec![0.0; g.num_edges()]).unwrap();
        // Zero weights: the first in-edge of every vertex wins.
        let mut u = g.final_vertex();
        for &e in p.edges.iter().rev() {
            assert_eq!(e, g.in_edges(u)[0]);
            u = g.edge(e).tail;
        }
    }

    #[test]
    fn zero_weights_partition_counts_paths() {
        let g = build_segmental_space(3, 2, 2).unwrap();
        let m = forward_backward(&g, &vec![0.0; 10]).unwrap();
        assert!((m.log_partition - 16f64.ln()).abs() < 1e-12);
        assert!((m.beta[0] - m.log_partition).abs() < 1e-12);
    }

    #[test]
    fn ctc_locally_normalized_partition_is_one() {
        let g = build_ctc_space(4, 3, 2).unwrap();
        let mut w = Vec::new();
        for t in 0..4 {
            let row = [0.2 + t as f64, -1.0, 0.7];
            let lse = crate::math::log_sum_exp(&row);
            w.extend(row.iter().map(|x| x - lse));
        }
        let m = forward_backward(&g, &w).unwrap();
        assert!(m.log_partition.abs() < 1e-12);
    }

    #[test]
    fn path_validation() {
        let g = build_segmental_space(3, 2, 2).unwrap();
        assert!(Path::from_segments(&g, &[(0, 0, 2), (1, 2, 3)]).is_ok());
        assert!(Path::from_segments(&g, &[(0, 0, 3)]).is_err());
        assert!(Path::from_edges(&g, vec![0]).is_err());
        let p = Path::from_segments(&g, &[(1, 0, 1), (1, 1, 3)]).unwrap();
        assert_eq!(p.labels, vec![1, 1]);
        assert_eq!(p.segmentation, vec![(0, 1), (1, 3)]);
    }

    #[test]
    fn weight_length_mismatch() {
        let g = one_edge();
        assert!(matches!(max_path(&g, &[]), Err(Error::ShapeMismatch(_))));
        assert!(matches!(forward_backward(&g, &[1.0, 2.0]), Err(Error::ShapeMismatch(_))));
    }
}
