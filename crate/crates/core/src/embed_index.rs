//! Graph embeddings and exact cosine top-n candidate extraction.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::io::{Read, Write};

use thiserror::Error;

use crate::scenegraph::SceneGraph;

pub const DEFAULT_DIM: usize = 256;
/// Magic prefix of the embedding store.
pub const STORE_MAGIC: &[u8; 4] = b"GPRV";
const STORE_VERSION: u8 = 1;
const UNIT_TOLERANCE: f64 = 1e-6;

/// Weisfeiler-Lehman refinement rounds after the label round.
pub const WL_ROUNDS: usize = 2;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("cannot embed an empty graph")]
    EmptyGraph,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("vector is not finite and unit-norm")]
    NotUnit,
    #[error("duplicate scene id `{0}`")]
    DuplicateId(String),
    #[error("scene id `{0}` too long for the store")]
    IdTooLong(String),
    #[error("index is empty")]
    EmptyIndex,
    #[error("embedding store: {0}")]
    Store(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A unit-norm vector of 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    /// Normalize `values`; fails on zero or non-finite input.
    pub fn normalized(values: &[f64]) -> Result<Self, IndexError> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(IndexError::NotUnit);
        }
        Self::from_unit(values.iter().map(|v| (v / norm) as f32).collect())
    }

    /// Wrap values that are already unit-norm.
    pub fn from_unit(values: Vec<f32>) -> Result<Self, IndexError> {
        let norm = values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if values.iter().any(|v| !v.is_finite()) || (norm - 1.0).abs() >= UNIT_TOLERANCE {
            return Err(IndexError::NotUnit);
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut lanes = [0f32; 8];
    let chunks_a = a.chunks_exact(8);
    let chunks_b = b.chunks_exact(8);
    let (rest_a, rest_b) = (chunks_a.remainder(), chunks_b.remainder());
    for (ca, cb) in chunks_a.zip(chunks_b) {
        for k in 0..8 {
            lanes[k] += ca[k] * cb[k];
        }
    }
    let mut total: f64 = lanes.iter().map(|&v| v as f64).sum();
    for (x, y) in rest_a.iter().zip(rest_b) {
        total += (*x as f64) * (*y as f64);
    }
    total
}

/// Cosine similarity of two unit vectors, clamped to [-1, 1].
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, IndexError> {
    if a.dim() != b.dim() {
        return Err(IndexError::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(dot(&a.values, &b.values).clamp(-1.0, 1.0))
}

/// Anything that maps a scene graph to a fixed-dimension unit vector.
pub trait GraphEmbedder {
    fn dim(&self) -> usize;
    fn embed(&self, graph: &SceneGraph) -> Result<EmbeddingVector, IndexError>;
}

/// Deterministic label/structure hashing embedder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StructuralEmbedder {
    pub dim: usize,
}

impl Default for StructuralEmbedder {
    fn default() -> Self {
        Self { dim: DEFAULT_DIM }
    }
}

impl GraphEmbedder for StructuralEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, graph: &SceneGraph) -> Result<EmbeddingVector, IndexError> {
        structural_embed(graph, self.dim)
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub(crate) fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn combine(seed: u64, value: u64) -> u64 {
    mix64(seed ^ value.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(seed << 6).wrapping_add(seed >> 2))
}

/// Signed feature hashing of per-node label tokens refined by two
/// Weisfeiler-Lehman rounds over (relation, neighbor token) multisets.
/// Positions are never read, so isomorphic graphs embed identically.
pub fn structural_embed(graph: &SceneGraph, dim: usize) -> Result<EmbeddingVector, IndexError> {
    if graph.is_empty() {
        return Err(IndexError::EmptyGraph);
    }
    assert!(dim > 0, "embedding dimension must be positive");
    let relations = graph.relation_matrix();
    let mut tokens: Vec<u64> = graph.nodes().iter().map(|n| mix64(fnv1a(n.label_key().as_bytes()))).collect();
    let mut acc = vec![0f64; dim];
    let mut scatter = |tokens: &[u64], round: usize| {
        for &t in tokens {
            let h = mix64(t ^ (round as u64 + 1).wrapping_mul(0xd6e8_feb8_6659_fd93));
            let bucket = (h % dim as u64) as usize;
            acc[bucket] += if h >> 63 == 0 { 1.0 } else { -1.0 };
        }
    };
    scatter(&tokens, 0);
    for round in 1..=WL_ROUNDS {
        let next: Vec<u64> = (0..tokens.len())
            .map(|v| {
                let mut neigh: Vec<(usize, u64)> = relations[v]
                    .iter()
                    .enumerate()
                    .filter_map(|(u, r)| r.map(|r| (r.index(), tokens[u])))
                    .collect();
                neigh.sort_unstable();
                neigh
                    .into_iter()
                    .fold(combine(0x5eed, tokens[v]), |h, (r, t)| combine(combine(h, r as u64), t))
            })
            .collect();
        tokens = next;
        scatter(&tokens, round);
    }
    // Hash collisions can cancel every bucket for tiny graphs.
    if acc.iter().all(|&v| v == 0.0) {
        acc[0] = 1.0;
    }
    EmbeddingVector::normalized(&acc)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub scene_id: String,
    pub score: f64,
}

/// Ranked candidates, best first.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CandidateSet {
    pub ranked: Vec<Candidate>,
}

impl CandidateSet {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.ranked.iter().map(|c| c.scene_id.as_str())
    }
    pub fn len(&self) -> usize {
        self.ranked.len()
    }
    pub fn is_empty(&self) -> bool {
        self.ranked.is_empty()
    }
}

/// Flat in-memory index over unit vectors stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    seen: HashSet<String>,
}

struct HeapEntry<'a> {
    score: f64,
    id: &'a str,
    row: usize,
}

impl HeapEntry<'_> {
    /// Greater means ranked later.
    fn rank_cmp(&self, other: &Self) -> Ordering {
        other.score.total_cmp(&self.score).then_with(|| self.id.cmp(other.id))
    }
}

impl PartialEq for HeapEntry<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.rank_cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapEntry<'_> {}
impl PartialOrd for HeapEntry<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.rank_cmp(other)
    }
}

impl VectorIndex {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
            seen: HashSet::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn insert(&mut self, scene_id: impl Into<String>, vector: &EmbeddingVector) -> Result<(), IndexError> {
        let scene_id = scene_id.into();
        if vector.dim() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                actual: vector.dim(),
            });
        }
        if scene_id.len() > u16::MAX as usize {
            return Err(IndexError::IdTooLong(scene_id));
        }
        if !self.seen.insert(scene_id.clone()) {
            return Err(IndexError::DuplicateId(scene_id));
        }
        self.ids.push(scene_id);
        self.data.extend_from_slice(vector.values());
        Ok(())
    }

    pub fn vector(&self, row: usize) -> EmbeddingVector {
        EmbeddingVector {
            values: self.row(row).to_vec(),
        }
    }

    fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    /// Exact top-`n` by cosine similarity; ties go to the smaller scene id.
    pub fn extract_candidates(&self, query: &EmbeddingVector, n: usize) -> Result<CandidateSet, IndexError> {
        if query.dim() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                actual: query.dim(),
            });
        }
        if self.is_empty() {
            return Err(IndexError::EmptyIndex);
        }
        let n = n.max(1).min(self.len());
        let mut heap: BinaryHeap<HeapEntry<'_>> = BinaryHeap::with_capacity(n + 1);
        for (row, id) in self.ids.iter().enumerate() {
            let entry = HeapEntry {
                score: dot(query.values(), self.row(row)).clamp(-1.0, 1.0),
                id,
                row,
            };
            if heap.len() < n {
                heap.push(entry);
            } else if let Some(worst) = heap.peek() {
                if entry.rank_cmp(worst) == Ordering::Less {
                    heap.pop();
                    heap.push(entry);
                }
            }
        }
        let mut ranked = heap.into_vec();
        ranked.sort();
        Ok(CandidateSet {
            ranked: ranked
                .into_iter()
                .map(|e| Candidate {
                    scene_id: self.ids[e.row].clone(),
                    score: e.score,
                })
                .collect(),
        })
    }

    pub fn write_store<W: Write>(&self, mut out: W) -> Result<(), IndexError> {
        out.write_all(STORE_MAGIC)?;
        out.write_all(&[STORE_VERSION])?;
        out.write_all(&(self.dim as u32).to_le_bytes())?;
        out.write_all(&(self.len() as u64).to_le_bytes())?;
        for (row, id) in self.ids.iter().enumerate() {
            out.write_all(&(id.len() as u16).to_le_bytes())?;
            out.write_all(id.as_bytes())?;
            for v in self.row(row) {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_store<R: Read>(mut input: R) -> Result<Self, IndexError> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], IndexError> {
            let end = pos + n;
            if end > bytes.len() {
                return Err(IndexError::Store("truncated".into()));
            }
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        if take(4)? != STORE_MAGIC {
            return Err(IndexError::Store("bad magic".into()));
        }
        let version = take(1)?[0];
        if version != STORE_VERSION {
            return Err(IndexError::Store(format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let mut index = VectorIndex::new(dim);
        for _ in 0..count {
            let len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
            let id = String::from_utf8(take(len)?.to_vec()).map_err(|e| IndexError::Store(e.to_string()))?;
            let raw = take(dim * 4)?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            index.insert(id, &EmbeddingVector::from_unit(values)?)?;
        }
        if pos != bytes.len() {
            return Err(IndexError::Store("trailing bytes".into()));
        }
        Ok(index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::EnuPoint;
    use crate::scenegraph::build_map_graph;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> EmbeddingVector {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        EmbeddingVector::normalized(&v).unwrap()
    }

    fn random_graph(rng: &mut ChaCha8Rng, prefix: &str, nodes: usize) -> SceneGraph {
        let elements: Vec<(String, EnuPoint)> = (0..nodes)
            .map(|_| {
                (
                    format!("{prefix}{}", rng.random_range(0..40)),
                    EnuPoint::planar(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)),
                )
            })
            .collect();
        build_map_graph(&elements, 50.0, "g", None).unwrap()
    }

    fn direct_cosine(a: &[f32], b: &[f32]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
        let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        d / (na * nb)
    }

    #[test]
    fn cosine_basics() {
        let mut e0 = vec![0.0; 4];
        e0[0] = 1.0;
        let mut e1 = vec![0.0; 4];
        e1[1] = 1.0;
        let a = EmbeddingVector::normalized(&e0).unwrap();
        let b = EmbeddingVector::normalized(&e1).unwrap();
        assert_eq!(cosine_similarity(&a, &a).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&a, &b).unwrap(), 0.0);
        let c = EmbeddingVector::normalized(&[1.0, 0.0]).unwrap();
        assert!(matches!(cosine_similarity(&a, &c), Err(IndexError::DimensionMismatch { .. })));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let (x, y) = (random_unit(&mut rng, 37), random_unit(&mut rng, 37));
            let s = cosine_similarity(&x, &y).unwrap();
            assert!((s - direct_cosine(x.values(), y.values())).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_non_unit() {
        assert!(EmbeddingVector::normalized(&[0.0, 0.0]).is_err());
        assert!(EmbeddingVector::from_unit(vec![0.5, 0.5]).is_err());
        assert!(EmbeddingVector::from_unit(vec![f32::NAN, 1.0]).is_err());
    }

    #[test]
    fn structural_embedding_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = random_graph(&mut rng, "L", 9);
        let e = structural_embed(&g, DEFAULT_DIM).unwrap();
        assert!((cosine_similarity(&e, &e).unwrap() - 1.0).abs() < 1e-6);
        // Same structure, different positions and scene id.
        let moved = g.erase_positions().with_scene_id("other");
        assert_eq!(structural_embed(&moved, DEFAULT_DIM).unwrap(), e);
        // Case-folded labels match.
        let upper_parts: Vec<(String, EnuPoint)> = g
            .nodes()
            .iter()
            .map(|n| (n.label.to_uppercase(), n.position.unwrap()))
            .collect();
        let upper = build_map_graph(&upper_parts, 50.0, "g", None).unwrap();
        assert_eq!(structural_embed(&upper, DEFAULT_DIM).unwrap(), e);
    }

    #[test]
    fn disjoint_label_graphs_near_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut sims: Vec<f64> = (0..1000)
            .map(|_| {
                let na = rng.random_range(1..=12);
                let nb = rng.random_range(1..=12);
                let a = structural_embed(&random_graph(&mut rng, "a", na), DEFAULT_DIM).unwrap();
                let b = structural_embed(&random_graph(&mut rng, "b", nb), DEFAULT_DIM).unwrap();
                cosine_similarity(&a, &b).unwrap().abs()
            })
            .collect();
        sims.sort_by(f64::total_cmp);
        let mean = sims.iter().sum::<f64>() / sims.len() as f64;
        let p99 = sims[989];
        assert!(mean < 0.05, "mean |cos| {mean}");
        assert!(p99 < 0.2, "p99 |cos| {p99}");
    }

    fn brute_force(index: &VectorIndex, q: &EmbeddingVector, n: usize) -> Vec<(String, f64)> {
        let mut all: Vec<(String, f64)> = (0..index.len())
            .map(|r| (index.ids()[r].clone(), direct_cosine(q.values(), index.row(r))))
            .collect();
        all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        all.truncate(n);
        all
    }

    #[test]
    fn extraction_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut index = VectorIndex::new(16);
        for i in 0..500 {
            index.insert(format!("s{i:04}"), &random_unit(&mut rng, 16)).unwrap();
        }
        for _ in 0..50 {
            let q = random_unit(&mut rng, 16);
            let got = index.extract_candidates(&q, 10).unwrap();
            let want = brute_force(&index, &q, 10);
            assert_eq!(got.ids().collect::<Vec<_>>(), want.iter().map(|w| w.0.as_str()).collect::<Vec<_>>());
            for (c, w) in got.ranked.iter().zip(&want) {
                assert!((c.score - w.1).abs() < 1e-6);
            }
        }
        let q = index.vector(123);
        let head = &index.extract_candidates(&q, 1).unwrap().ranked[0];
        assert_eq!(head.scene_id, "s0123");
        assert!((head.score - 1.0).abs() < 1e-6);
        assert_eq!(index.extract_candidates(&q, 10_000).unwrap().len(), 500);
    }

    #[test]
    fn ties_break_by_scene_id() {
        let v = EmbeddingVector::normalized(&[1.0, 1.0]).unwrap();
        let mut index = VectorIndex::new(2);
        for id in ["c", "a", "b"] {
            index.insert(id, &v).unwrap();
        }
        let got = index.extract_candidates(&v, 2).unwrap();
        assert_eq!(got.ids().collect::<Vec<_>>(), ["a", "b"]);
        assert!(matches!(index.insert("a", &v), Err(IndexError::DuplicateId(_))));
    }

    #[test]
    fn store_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut index = VectorIndex::new(DEFAULT_DIM);
        for i in 0..20 {
            index.insert(format!("cell_{i}_0"), &random_unit(&mut rng, DEFAULT_DIM)).unwrap();
        }
        let mut buf = Vec::new();
        index.write_store(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"GPRV");
        let id_bytes: usize = index.ids().iter().map(|id| 2 + id.len()).sum();
        assert_eq!(buf.len(), 4 + 1 + 4 + 8 + id_bytes + 20 * DEFAULT_DIM * 4);
        let back = VectorIndex::read_store(&buf[..]).unwrap();
        assert_eq!(back, index);
        let mut again = Vec::new();
        back.write_store(&mut again).unwrap();
        assert_eq!(again, buf);
        assert!(VectorIndex::read_store(&buf[..buf.len() - 1]).is_err());
    }
}
