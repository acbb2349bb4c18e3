//! Search spaces as time-indexed acyclic FSTs, unweighted constraint
//! automata over label strings, and their intersection.
//!
//! Every search space keeps its vertices in a topological order (edges always
//! go from a smaller vertex id to a larger one, and strictly forward in time),
//! so the dynamic programs in [`crate::dp`] can sweep vertex ids directly.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};

pub type LabelId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vertex {
    pub id: usize,
    /// Frame index `τ(v)`.
    pub time: usize,
}

/// A segment `(label, start, end)` placed between two vertices.
///
/// Input and output symbols coincide with the label in every space built
/// here.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Edge {
    pub id: usize,
    pub tail: usize,
    pub head: usize,
    pub label: LabelId,
    pub start: usize,
    pub end: usize,
}

impl Edge {
    #[inline]
    pub fn input(&self) -> LabelId {
        self.label
    }

    #[inline]
    pub fn output(&self) -> LabelId {
        self.label
    }

    #[inline]
    pub fn duration(&self) -> usize {
        self.end - self.start
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpaceKind {
    Segmental { max_duration: usize },
    Ctc { blank: LabelId },
    Intersected,
    Custom,
}

/// A weighted-FST search space with a single initial and a single final
/// vertex. Weights live outside, in an edge-indexed table.
#[derive(Clone, Debug)]
pub struct SearchSpace {
    vertices: Vec<Vertex>,
    edges: Vec<Edge>,
    initial: usize,
    final_vertex: usize,
    in_offsets: Vec<usize>,
    in_edges: Vec<usize>,
    out_offsets: Vec<usize>,
    out_edges: Vec<usize>,
    num_labels: usize,
    kind: SpaceKind,
}

impl SearchSpace {
    /// Builds a space from vertex times and `(tail, head, label)` triples.
    ///
    /// Vertex ids are the positions in `times`; every edge must satisfy
    /// `tail < head` and `times[tail] < times[head]`.
    pub fn from_edges(
        times: Vec<usize>,
        edges: &[(usize, usize, LabelId)],
        initial: usize,
        final_vertex: usize,
        num_labels: usize,
    ) -> Result<Self> {
        Self::assemble(times, edges, initial, final_vertex, num_labels, SpaceKind::Custom)
    }

    fn assemble(
        times: Vec<usize>,
        triples: &[(usize, usize, LabelId)],
        initial: usize,
        final_vertex: usize,
        num_labels: usize,
        kind: SpaceKind,
    ) -> Result<Self> {
        let nv = times.len();
        if nv == 0 {
            return Err(invalid("search space needs at least one vertex"));
        }
        if initial >= nv || final_vertex >= nv {
            return Err(invalid("initial or final vertex out of range"));
        }
        let mut edges = Vec::with_capacity(triples.len());
        for (id, &(tail, head, label)) in triples.iter().enumerate() {
            if tail >= nv || head >= nv {
                return Err(invalid(format!("edge {id} references a missing vertex")));
            }
            if tail >= head || times[tail] >= times[head] {
                return Err(invalid(format!(
                    "edge {id} ({tail} -> {head}) does not move forward in topological order and time"
                )));
            }
            if label >= num_labels {
                return Err(invalid(format!("edge {id} has label {label} outside the alphabet")));
            }
            edges.push(Edge {
                id,
                tail,
                head,
                label,
                start: times[tail],
                end: times[head],
            });
        }
        let (in_offsets, in_edges) = csr(nv, edges.iter().map(|e| e.head));
        let (out_offsets, out_edges) = csr(nv, edges.iter().map(|e| e.tail));
        let vertices = times
            .into_iter()
            .enumerate()
            .map(|(id, time)| Vertex { id, time })
            .collect();
        Ok(SearchSpace {
            vertices,
            edges,
            initial,
            final_vertex,
            in_offsets,
            in_edges,
            out_offsets,
            out_edges,
            num_labels,
            kind,
        })
    }

    #[inline]
    pub fn vertices(&self) -> &[Vertex] {
        &self.vertices
    }

    #[inline]
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    #[inline]
    pub fn edge(&self, id: usize) -> &Edge {
        &self.edges[id]
    }

    #[inline]
    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    #[inline]
    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    #[inline]
    pub fn initial(&self) -> usize {
        self.initial
    }

    #[inline]
    pub fn final_vertex(&self) -> usize {
        self.final_vertex
    }

    /// Number of frames spanned, `τ(final)`.
    #[inline]
    pub fn num_frames(&self) -> usize {
        self.vertices[self.final_vertex].time
    }

    #[inline]
    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    #[inline]
    pub fn kind(&self) -> SpaceKind {
        self.kind
    }

    /// `in(v)`, in increasing edge id.
    #[inline]
    pub fn in_edges(&self, v: usize) -> &[usize] {
        &self.in_edges[self.in_offsets[v]..self.in_offsets[v + 1]]
    }

    /// `out(v)`, in increasing edge id.
    #[inline]
    pub fn out_edges(&self, v: usize) -> &[usize] {
        &self.out_edges[self.out_offsets[v]..self.out_offsets[v + 1]]
    }

    /// Finds the edge `(label, start, end)` leaving the vertex at `start`.
    pub fn find_edge(&self, tail: usize, label: LabelId, head: usize) -> Option<usize> {
        self.out_edges(tail)
            .iter()
            .copied()
            .find(|&e| self.edges[e].head == head && self.edges[e].label == label)
    }

    /// Number of initial-to-final paths, as a float.
    pub fn count_paths(&self) -> f64 {
        let mut count = vec![0.0f64; self.num_vertices()];
        count[self.initial] = 1.0;
        for v in 0..self.num_vertices() {
            for &e in self.out_edges(v) {
                let head = self.edges[e].head;
                count[head] += count[v];
            }
        }
        count[self.final_vertex]
    }
}

fn csr(nv: usize, keys: impl Iterator<Item = usize> + Clone) -> (Vec<usize>, Vec<usize>) {
    let mut offsets = vec![0usize; nv + 1];
    for k in keys.clone() {
        offsets[k + 1] += 1;
    }
    for i in 0..nv {
        offsets[i + 1] += offsets[i];
    }
    let mut fill = offsets.clone();
    let mut ids = vec![0usize; offsets[nv]];
    for (id, k) in keys.enumerate() {
        ids[fill[k]] = id;
        fill[k] += 1;
    }
    (offsets, ids)
}

/// Full segmental space: one edge per `(label, s, t)` with
/// `0 <= s < t <= num_frames` and `t - s <= max_duration`.
///
/// Edges are numbered by end time, then start time, then label, so `in(v_t)`
/// is a contiguous id range.
pub fn build_segmental_space(
    num_frames: usize,
    num_labels: usize,
    max_duration: usize,
) -> Result<SearchSpace> {
    if num_frames == 0 {
        return Err(invalid("search space needs at least one frame"));
    }
    if num_labels == 0 {
        return Err(invalid("alphabet is empty"));
    }
    if max_duration == 0 {
        return Err(invalid("maximum duration must be at least 1"));
    }
    let mut triples = Vec::with_capacity(num_frames * max_duration.min(num_frames) * num_labels);
    for t in 1..=num_frames {
        for s in t.saturating_sub(max_duration)..t {
            for label in 0..num_labels {
                triples.push((s, t, label));
            }
        }
    }
    SearchSpace::assemble(
        (0..=num_frames).collect(),
        &triples,
        0,
        num_frames,
        num_labels,
        SpaceKind::Segmental { max_duration },
    )
}

/// Frame-level CTC space: an edge for every symbol (blank included) at every
/// frame. Edge `e` for frame `t` (0-based) and symbol `l` has id
/// `t * num_symbols + l`.
pub fn build_ctc_space(num_frames: usize, num_symbols: usize, blank: LabelId) -> Result<SearchSpace> {
    if num_frames == 0 {
        return Err(invalid("search space needs at least one frame"));
    }
    if num_symbols == 0 {
        return Err(invalid("alphabet is empty"));
    }
    if blank >= num_symbols {
        return Err(invalid("blank symbol outside the alphabet"));
    }
    let mut triples = Vec::with_capacity(num_frames * num_symbols);
    for t in 0..num_frames {
        for label in 0..num_symbols {
            triples.push((t, t + 1, label));
        }
    }
    SearchSpace::assemble(
        (0..=num_frames).collect(),
        &triples,
        0,
        num_frames,
        num_symbols,
        SpaceKind::Ctc { blank },
    )
}

/// Deterministic, unweighted automaton over label strings.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConstraintFst {
    start: usize,
    accept: Vec<bool>,
    /// Per state, `(label, next state)` sorted by label.
    transitions: Vec<Vec<(LabelId, usize)>>,
}

impl ConstraintFst {
    /// Builds an automaton from `(from, label, to)` transitions, rejecting
    /// nondeterministic ones.
    pub fn from_transitions(
        num_states: usize,
        start: usize,
        accepting: &[usize],
        transitions: &[(usize, LabelId, usize)],
    ) -> Result<Self> {
        if start >= num_states {
            return Err(invalid("start state out of range"));
        }
        let mut accept = vec![false; num_states];
        for &q in accepting {
            if q >= num_states {
                return Err(invalid("accepting state out of range"));
            }
            accept[q] = true;
        }
        let mut table: Vec<Vec<(LabelId, usize)>> = vec![Vec::new(); num_states];
        for &(from, label, to) in transitions {
            if from >= num_states || to >= num_states {
                return Err(invalid("transition references a missing state"));
            }
            table[from].push((label, to));
        }
        for (q, row) in table.iter_mut().enumerate() {
            row.sort_unstable();
            if row.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(invalid(format!("state {q} has two transitions on one label")));
            }
        }
        Ok(ConstraintFst {
            start,
            accept,
            transitions: table,
        })
    }

    /// Single accepting state with a self-loop on every label: accepts Σ*.
    pub fn universal(num_labels: usize) -> Self {
        let loops: Vec<_> = (0..num_labels).map(|l| (0, l, 0)).collect();
        Self::from_transitions(1, 0, &[0], &loops).expect("universal automaton is deterministic")
    }

    #[inline]
    pub fn num_states(&self) -> usize {
        self.accept.len()
    }

    pub fn num_edges(&self) -> usize {
        self.transitions.iter().map(Vec::len).sum()
    }

    #[inline]
    pub fn start(&self) -> usize {
        self.start
    }

    #[inline]
    pub fn is_accepting(&self, state: usize) -> bool {
        self.accept[state]
    }

    /// All transitions as `(from, label, to)`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, LabelId, usize)> + '_ {
        self.transitions
            .iter()
            .enumerate()
            .flat_map(|(q, row)| row.iter().map(move |&(l, to)| (q, l, to)))
    }

    #[inline]
    pub fn next(&self, state: usize, label: LabelId) -> Option<usize> {
        let row = &self.transitions[state];
        row.binary_search_by_key(&label, |&(l, _)| l)
            .ok()
            .map(|i| row[i].1)
    }

    pub fn accepts(&self, labels: &[LabelId]) -> bool {
        let mut q = self.start;
        for &l in labels {
            match self.next(q, l) {
                Some(n) => q = n,
                None => return false,
            }
        }
        self.accept[q]
    }
}

/// Chain automaton accepting exactly the string `labels`.
pub fn build_label_chain(labels: &[LabelId]) -> Result<ConstraintFst> {
    if labels.is_empty() {
        return Err(invalid("label sequence is empty"));
    }
    let transitions: Vec<_> = labels.iter().enumerate().map(|(k, &l)| (k, l, k + 1)).collect();
    ConstraintFst::from_transitions(labels.len() + 1, 0, &[labels.len()], &transitions)
}

/// How the CTC constraint treats equal adjacent labels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum RepeatPolicy {
    /// `∅* y1+ ∅* y2+ ... ∅* yK+ ∅*` taken literally: a run of a repeated label
    /// may also stand for two adjacent copies.
    #[default]
    Verbatim,
    /// A blank is mandatory between equal adjacent labels (textbook CTC).
    Strict,
}

/// Automaton for `∅* y1+ ∅* y2+ ... ∅* yK+ ∅*` over per-frame symbols.
pub fn build_ctc_constraint(
    labels: &[LabelId],
    blank: LabelId,
    repeats: RepeatPolicy,
) -> Result<ConstraintFst> {
    if labels.is_empty() {
        return Err(invalid("label sequence is empty"));
    }
    if labels.contains(&blank) {
        return Err(invalid("label sequence contains the blank symbol"));
    }
    let k = labels.len();
    // State 2j is the blank run after j labels, state 2j-1 the run of label j.
    let run = |j: usize| 2 * j - 1;
    let gap = |j: usize| 2 * j;
    let mut nfa = Vec::new();
    for j in 0..=k {
        nfa.push((gap(j), blank, gap(j)));
        if j < k {
            nfa.push((gap(j), labels[j], run(j + 1)));
        }
    }
    let mut needs_subsets = false;
    for j in 1..=k {
        let y = labels[j - 1];
        nfa.push((run(j), y, run(j)));
        nfa.push((run(j), blank, gap(j)));
        if j < k {
            let next = labels[j];
            if next != y {
                nfa.push((run(j), next, run(j + 1)));
            } else if repeats == RepeatPolicy::Verbatim {
                nfa.push((run(j), next, run(j + 1)));
                needs_subsets = true;
            }
        }
    }
    let num_states = 2 * k + 1;
    let accepting = [run(k), gap(k)];
    if needs_subsets {
        Ok(determinize(num_states, 0, &accepting, &nfa))
    } else {
        ConstraintFst::from_transitions(num_states, 0, &accepting, &nfa)
    }
}

/// Subset construction for the small NFAs produced by the CTC constraint
/// when adjacent labels repeat.
fn determinize(
    num_states: usize,
    start: usize,
    accepting: &[usize],
    nfa: &[(usize, LabelId, usize)],
) -> ConstraintFst {
    let mut by_state: Vec<Vec<(LabelId, usize)>> = vec![Vec::new(); num_states];
    for &(from, l, to) in nfa {
        by_state[from].push((l, to));
    }
    let mut ids: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    let mut sets: Vec<Vec<usize>> = vec![vec![start]];
    ids.insert(vec![start], 0);
    let mut transitions = Vec::new();
    let mut i = 0;
    while i < sets.len() {
        let mut moves: Vec<(LabelId, usize)> = sets[i]
            .iter()
            .flat_map(|&q| by_state[q].iter().copied())
            .collect();
        moves.sort_unstable();
        moves.dedup();
        let mut j = 0;
        while j < moves.len() {
            let label = moves[j].0;
            let mut target = Vec::new();
            while j < moves.len() && moves[j].0 == label {
                target.push(moves[j].1);
                j += 1;
            }
            let next_id = sets.len();
            let id = *ids.entry(target.clone()).or_insert_with(|| {
                sets.push(target);
                next_id
            });
            transitions.push((i, label, id));
        }
        i += 1;
    }
    let accept: Vec<usize> = sets
        .iter()
        .enumerate()
        .filter(|(_, s)| s.iter().any(|q| accepting.contains(q)))
        .map(|(id, _)| id)
        .collect();
    ConstraintFst::from_transitions(sets.len(), 0, &accept, &transitions)
        .expect("subset construction yields a deterministic automaton")
}

/// `G ∩ F`: a search space over `(time vertex, constraint state)` pairs.
#[derive(Clone, Debug)]
pub struct IntersectedSpace {
    space: SearchSpace,
    edge_origin: Vec<usize>,
    /// Originating `(vertex, state)` of every product vertex. All accepting
    /// pairs at the final vertex are merged into one vertex, recorded with
    /// the smallest accepting state.
    pairs: Vec<(usize, usize)>,
}

impl IntersectedSpace {
    #[inline]
    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    /// Originating edge id in the unconstrained space, per intersected edge.
    #[inline]
    pub fn edge_origin(&self) -> &[usize] {
        &self.edge_origin
    }

    #[inline]
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Weights of the intersected edges, inherited from their origins.
    pub fn project_weights(&self, weights: &[f64]) -> Vec<f64> {
        self.edge_origin.iter().map(|&e| weights[e]).collect()
    }

    /// Adds `scale * values[e']` into `target[origin(e')]` for every
    /// intersected edge `e'`.
    pub fn scatter_add(&self, values: &[f64], scale: f64, target: &mut [f64]) {
        for (&origin, &v) in self.edge_origin.iter().zip(values) {
            target[origin] += scale * v;
        }
    }
}

/// Product construction, keeping only pairs that are both reachable from the
/// start and co-reachable to an accepting pair at the final vertex.
pub fn intersect(space: &SearchSpace, constraint: &ConstraintFst) -> Result<IntersectedSpace> {
    let nv = space.num_vertices();
    let nq = constraint.num_states();
    let fin = space.final_vertex();
    if !space.out_edges(fin).is_empty() {
        return Err(invalid("final vertex must have no outgoing edges"));
    }
    let idx = |v: usize, q: usize| v * nq + q;

    let mut reach = vec![false; nv * nq];
    reach[idx(space.initial(), constraint.start())] = true;
    for v in 0..nv {
        for q in 0..nq {
            if !reach[idx(v, q)] {
                continue;
            }
            for &e in space.out_edges(v) {
                let edge = space.edge(e);
                if let Some(q2) = constraint.next(q, edge.input()) {
                    reach[idx(edge.head, q2)] = true;
                }
            }
        }
    }

    let mut keep = vec![false; nv * nq];
    for q in 0..nq {
        keep[idx(fin, q)] = constraint.is_accepting(q) && reach[idx(fin, q)];
    }
    for v in (0..nv).rev() {
        if v == fin {
            continue;
        }
        for q in 0..nq {
            if !reach[idx(v, q)] {
                continue;
            }
            keep[idx(v, q)] = space.out_edges(v).iter().any(|&e| {
                let edge = space.edge(e);
                constraint
                    .next(q, edge.input())
                    .is_some_and(|q2| keep[idx(edge.head, q2)])
            });
        }
    }

    let mut id_of = vec![usize::MAX; nv * nq];
    let mut times = Vec::new();
    let mut pairs = Vec::new();
    let mut final_id = None;
    for v in 0..nv {
        for q in 0..nq {
            if !keep[idx(v, q)] {
                continue;
            }
            if v == fin {
                let id = *final_id.get_or_insert_with(|| {
                    times.push(space.vertices()[v].time);
                    pairs.push((v, q));
                    times.len() - 1
                });
                id_of[idx(v, q)] = id;
            } else {
                id_of[idx(v, q)] = times.len();
                times.push(space.vertices()[v].time);
                pairs.push((v, q));
            }
        }
    }
    let (Some(final_id), true) = (final_id, keep[idx(space.initial(), constraint.start())]) else {
        return Err(Error::EmptyLanguage);
    };
    let initial_id = id_of[idx(space.initial(), constraint.start())];

    let mut triples = Vec::new();
    let mut edge_origin = Vec::new();
    for (pid, &(v, q)) in pairs.iter().enumerate() {
        if v == fin {
            continue;
        }
        for &e in space.out_edges(v) {
            let edge = space.edge(e);
            let Some(q2) = constraint.next(q, edge.input()) else {
                continue;
            };
            if keep[idx(edge.head, q2)] {
                triples.push((pid, id_of[idx(edge.head, q2)], edge.label));
                edge_origin.push(e);
            }
        }
    }
    let space = SearchSpace::assemble(
        times,
        &triples,
        initial_id,
        final_id,
        space.num_labels(),
        SpaceKind::Intersected,
    )?;
    Ok(IntersectedSpace {
        space,
        edge_origin,
        pairs,
    })
}
