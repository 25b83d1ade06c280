//! Shared fixtures for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use textplace::embed_index::{EmbeddingVector, StructuralEmbedder, VectorIndex};
use textplace::osm::parse_osm_bytes;
use textplace::pipeline::{self, GeneratedQuery, GridSpec, Perturbation, SceneDatabase};
use textplace::synth::{synthetic_osm_xml, SynthConfig};

pub struct Fixture {
    pub db: SceneDatabase,
    pub index: VectorIndex,
    pub queries: Vec<GeneratedQuery>,
}

/// Database, 256-d structural index and unperturbed queries over a
/// synthetic map with `cells` grid cells.
pub fn fixture(cells: usize, queries: usize, seed: u64) -> Fixture {
    let cfg = SynthConfig::for_grid(cells, 120.0, seed);
    let xml = synthetic_osm_xml(&cfg).expect("valid synthetic config");
    let (elements, _) = parse_osm_bytes(xml.as_bytes()).expect("synthetic XML parses");
    let (sw, ne) = cfg.bbox().expect("valid bbox");
    let db = pipeline::build_database(&elements, GridSpec::new(sw, ne, cells)).expect("non-empty database");
    let index = pipeline::build_index(&db, &StructuralEmbedder { dim: 256 }).expect("index builds");
    let queries = pipeline::generate_queries(&db, queries, Perturbation::default(), seed).expect("queries");
    Fixture { db, index, queries }
}

/// Unit vector with uniform coordinates before normalization.
pub fn random_unit<R: Rng>(rng: &mut R, dim: usize) -> EmbeddingVector {
    let values: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    EmbeddingVector::normalized(&values).expect("non-zero vector")
}

/// Index of `len` random unit vectors.
pub fn random_index(len: usize, dim: usize, seed: u64) -> VectorIndex {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut index = VectorIndex::new(dim);
    for i in 0..len {
        index.insert(format!("s{i:06}"), &random_unit(&mut rng, dim)).expect("unique ids");
    }
    index
}
