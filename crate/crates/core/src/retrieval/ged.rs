//! Graph edit distance between scene graphs.
//!
//! Nodes of the source graph are assigned in index order, each either to an
//! unused target node or to deletion; target nodes left over at the end are
//! insertions. Edges are compared under the induced mapping with their
//! relation re-oriented to the mapped pair. Small instances are solved
//! exactly with A*; larger ones (or A* runs that exhaust their expansion
//! budget) fall back to a beam search that yields an upper bound.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use super::RetrievalError;
use crate::scenegraph::{Relation, SceneGraph};

/// Largest node count (on either side) solved exactly.
pub const EXACT_NODE_LIMIT: usize = 8;
pub const BEAM_WIDTH: usize = 64;
/// Default cap on A* expansions before falling back to the beam.
pub const DEFAULT_BUDGET: usize = 2_000_000;

/// Per-operation edit costs. Insertions add target-side elements,
/// deletions remove source-side elements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GedCosts {
    pub node_insert: f64,
    pub node_delete: f64,
    pub node_substitute: f64,
    pub edge_insert: f64,
    pub edge_delete: f64,
    pub edge_substitute: f64,
}

impl Default for GedCosts {
    fn default() -> Self {
        Self {
            node_insert: 1.0,
            node_delete: 1.0,
            node_substitute: 1.0,
            edge_insert: 1.0,
            edge_delete: 1.0,
            edge_substitute: 1.0,
        }
    }
}

impl GedCosts {
    /// Unit costs with free target-side insertions: a source graph that is
    /// a subgraph of the target scores zero.
    pub fn subgraph() -> Self {
        Self {
            node_insert: 0.0,
            edge_insert: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), RetrievalError> {
        let all = [
            self.node_insert,
            self.node_delete,
            self.node_substitute,
            self.edge_insert,
            self.edge_delete,
            self.edge_substitute,
        ];
        if all.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(RetrievalError::InvalidCosts("costs must be finite and non-negative".into()));
        }
        if self.node_substitute > self.node_insert + self.node_delete + 1e-12
            || self.edge_substitute > self.edge_insert + self.edge_delete + 1e-12
        {
            return Err(RetrievalError::InvalidCosts("substitution exceeds insert + delete".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GedOutcome {
    pub cost: f64,
    /// False when the value is a beam-search upper bound.
    pub exact: bool,
    pub expansions: usize,
}

const UNMAPPED: u32 = u32::MAX;

struct Problem<'c> {
    costs: &'c GedCosts,
    na: usize,
    nb: usize,
    labels_a: Vec<u32>,
    labels_b: Vec<u32>,
    rel_a: Vec<Option<Relation>>,
    rel_b: Vec<Option<Relation>>,
    /// Label histograms of source nodes `depth..na`, per depth.
    suffix_counts: Vec<Vec<u32>>,
    /// Source edges with both endpoints at index >= depth, per depth.
    suffix_edges: Vec<usize>,
    edges_b: usize,
    words: usize,
}

#[derive(Clone)]
struct State {
    mapping: Vec<u32>,
    used: Vec<u64>,
    g: f64,
    f: f64,
    /// Target edges with both endpoints used / unused.
    used_edges: usize,
    free_edges: usize,
}

impl State {
    fn is_used(&self, t: usize) -> bool {
        self.used[t / 64] >> (t % 64) & 1 == 1
    }
}

fn dense_relations(g: &SceneGraph) -> Vec<Option<Relation>> {
    let n = g.nodes().len();
    let mut m = vec![None; n * n];
    for e in g.edges() {
        m[e.from * n + e.to] = Some(e.relation);
        m[e.to * n + e.from] = Some(e.relation.opposite());
    }
    m
}

impl<'c> Problem<'c> {
    fn new(a: &SceneGraph, b: &SceneGraph, costs: &'c GedCosts) -> Self {
        let mut interner: HashMap<String, u32> = HashMap::new();
        let mut intern = |g: &SceneGraph| -> Vec<u32> {
            g.nodes()
                .iter()
                .map(|n| {
                    let next = interner.len() as u32;
                    *interner.entry(n.label_key()).or_insert(next)
                })
                .collect()
        };
        let labels_a = intern(a);
        let labels_b = intern(b);
        let nlabels = interner.len();
        let (na, nb) = (labels_a.len(), labels_b.len());
        let rel_a = dense_relations(a);
        let mut suffix_counts = vec![vec![0u32; nlabels]; na + 1];
        for depth in (0..na).rev() {
            suffix_counts[depth] = suffix_counts[depth + 1].clone();
            suffix_counts[depth][labels_a[depth] as usize] += 1;
        }
        let mut suffix_edges = vec![0usize; na + 1];
        for depth in (0..na).rev() {
            let own = (depth + 1..na).filter(|&k| rel_a[depth * na + k].is_some()).count();
            suffix_edges[depth] = suffix_edges[depth + 1] + own;
        }
        Self {
            costs,
            na,
            nb,
            labels_a,
            labels_b,
            rel_a,
            rel_b: dense_relations(b),
            suffix_counts,
            suffix_edges,
            edges_b: b.edges().len(),
            words: nb.div_ceil(64).max(1),
        }
    }

    fn root(&self) -> State {
        let mut s = State {
            mapping: Vec::with_capacity(self.na),
            used: vec![0; self.words],
            g: 0.0,
            f: 0.0,
            used_edges: 0,
            free_edges: self.edges_b,
        };
        s.f = self.heuristic(&s);
        s
    }

    /// Admissible lower bound on the cost still to be paid from `s`.
    fn heuristic(&self, s: &State) -> f64 {
        let depth = s.mapping.len();
        if depth == self.na {
            return 0.0;
        }
        let c = self.costs;
        let mut remaining_b = self.suffix_counts[depth].clone();
        let rem_a: u32 = remaining_b.iter().sum();
        let mut unused_b = 0u32;
        let mut common = 0u32;
        // Reuse `remaining_b` as the per-label budget of source nodes.
        for t in 0..self.nb {
            if !s.is_used(t) {
                unused_b += 1;
                let slot = &mut remaining_b[self.labels_b[t] as usize];
                if *slot > 0 {
                    *slot -= 1;
                    common += 1;
                }
            }
        }
        let x = (rem_a - common) as f64;
        let y = (unused_b - common) as f64;
        let m = x.min(y);
        let node_lb = m * c.node_substitute.min(c.node_delete + c.node_insert)
            + (x - m) * c.node_delete
            + (y - m) * c.node_insert;
        let ea = self.suffix_edges[depth] as f64;
        let eb = s.free_edges as f64;
        let edge_lb = (ea - eb).max(0.0) * c.edge_delete + (eb - ea).max(0.0) * c.edge_insert;
        node_lb + edge_lb
    }

    fn child(&self, s: &State, target: u32) -> State {
        let c = self.costs;
        let i = s.mapping.len();
        let mut g = s.g;
        let mut used = s.used.clone();
        let (mut used_edges, mut free_edges) = (s.used_edges, s.free_edges);
        if target == UNMAPPED {
            g += c.node_delete;
            for k in 0..i {
                if self.rel_a[i * self.na + k].is_some() {
                    g += c.edge_delete;
                }
            }
        } else {
            let t = target as usize;
            if self.labels_a[i] != self.labels_b[t] {
                g += c.node_substitute;
            }
            for (k, &mk) in s.mapping.iter().enumerate() {
                let ea = self.rel_a[i * self.na + k];
                if mk == UNMAPPED {
                    if ea.is_some() {
                        g += c.edge_delete;
                    }
                    continue;
                }
                let eb = self.rel_b[t * self.nb + mk as usize];
                g += match (ea, eb) {
                    (Some(x), Some(y)) if x != y => c.edge_substitute,
                    (Some(_), None) => c.edge_delete,
                    (None, Some(_)) => c.edge_insert,
                    _ => 0.0,
                };
            }
            for u in 0..self.nb {
                if u != t && self.rel_b[t * self.nb + u].is_some() {
                    if s.is_used(u) {
                        used_edges += 1;
                    } else {
                        free_edges -= 1;
                    }
                }
            }
            used[t / 64] |= 1 << (t % 64);
        }
        let mut mapping = Vec::with_capacity(self.na);
        mapping.extend_from_slice(&s.mapping);
        mapping.push(target);
        let mut next = State {
            mapping,
            used,
            g,
            f: 0.0,
            used_edges,
            free_edges,
        };
        if i + 1 == self.na {
            let used_count: u32 = next.used.iter().map(|w| w.count_ones()).sum();
            next.g += (self.nb as u32 - used_count) as f64 * c.node_insert
                + (self.edges_b - next.used_edges) as f64 * c.edge_insert;
        }
        next.f = next.g + self.heuristic(&next);
        next
    }

    fn expand(&self, s: &State, out: &mut Vec<State>) {
        for t in 0..self.nb {
            if !s.is_used(t) {
                out.push(self.child(s, t as u32));
            }
        }
        out.push(self.child(s, UNMAPPED));
    }
}

struct Queued {
    f: f64,
    depth: usize,
    seq: usize,
    state: State,
}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        // Max-heap: smaller f first, then deeper, then earlier.
        other
            .f
            .total_cmp(&self.f)
            .then_with(|| self.depth.cmp(&other.depth))
            .then_with(|| other.seq.cmp(&self.seq))
    }
}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Queued {}

fn astar(p: &Problem<'_>, budget: usize) -> Option<(f64, usize)> {
    let mut heap = BinaryHeap::new();
    let mut seq = 0usize;
    heap.push(Queued {
        f: 0.0,
        depth: 0,
        seq,
        state: p.root(),
    });
    let mut expansions = 0usize;
    let mut children = Vec::new();
    while let Some(Queued { state, .. }) = heap.pop() {
        if state.mapping.len() == p.na {
            return Some((state.g, expansions));
        }
        expansions += 1;
        if expansions > budget {
            return None;
        }
        children.clear();
        p.expand(&state, &mut children);
        for child in children.drain(..) {
            seq += 1;
            heap.push(Queued {
                f: child.f,
                depth: child.mapping.len(),
                seq,
                state: child,
            });
        }
    }
    unreachable!("search space always contains a complete mapping")
}

fn beam(p: &Problem<'_>, width: usize) -> (f64, usize) {
    let mut level = vec![p.root()];
    let mut expansions = 0;
    for _ in 0..p.na {
        let mut next = Vec::with_capacity(level.len() * (p.nb + 1));
        for s in &level {
            expansions += 1;
            p.expand(s, &mut next);
        }
        next.sort_by(|x, y| x.f.total_cmp(&y.f).then_with(|| x.mapping.cmp(&y.mapping)));
        next.truncate(width);
        level = next;
    }
    let best = level.iter().map(|s| s.g).min_by(f64::total_cmp).expect("beam is never empty");
    (best, expansions)
}

/// Edit distance transforming `a` into `b`.
pub fn ged(a: &SceneGraph, b: &SceneGraph, costs: &GedCosts, budget: usize) -> Result<GedOutcome, RetrievalError> {
    if a.is_empty() || b.is_empty() {
        return Err(RetrievalError::EmptyGraph);
    }
    costs.validate()?;
    let p = Problem::new(a, b, costs);
    if p.na.max(p.nb) <= EXACT_NODE_LIMIT {
        if let Some((cost, expansions)) = astar(&p, budget) {
            return Ok(GedOutcome {
                cost,
                exact: true,
                expansions,
            });
        }
    }
    let (cost, expansions) = beam(&p, BEAM_WIDTH);
    Ok(GedOutcome {
        cost,
        exact: false,
        expansions,
    })
}
