//! Text-to-map place retrieval over OpenStreetMap scene graphs.
//!
//! Map regions become scene graphs of labeled objects joined by cardinal
//! relations; a short text description is parsed into the same form and
//! matched against a database of map graphs, first by embedding similarity
//! and then by graph edit distance or a learned joint encoder.

pub mod embed_index;
pub mod geo;
pub mod osm;
pub mod pipeline;
pub mod retrieval;
pub mod scenegraph;
pub mod synth;
pub mod textio;

pub use embed_index::{
    cosine_similarity, Candidate, CandidateSet, EmbeddingVector, GraphEmbedder, IndexError, StructuralEmbedder,
    VectorIndex,
};
pub use geo::{gps_to_enu, EnuPoint, GeoError, GeoPoint};
pub use osm::{parse_osm, parse_osm_bytes, OsmElement, OsmElementSet, OsmError};
pub use pipeline::{
    build_database, build_index, evaluate, generate_queries, query, EvalReport, GeneratedQuery, GridSpec,
    PipelineError, QueryMode, QueryOptions, SceneDatabase,
};
pub use retrieval::{ged, rerank, GedCosts, JointModel, RerankMode, RetrievalError, RetrievalResult};
pub use scenegraph::{build_map_graph, build_text_graph, direction_relation, Relation, SceneGraph};
pub use textio::{generate_description, parse_description, Description};
