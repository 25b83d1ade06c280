//! Database construction, querying, recall evaluation and latency benches.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Read, Write};
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed_index::{
    cosine_similarity, CandidateSet, GraphEmbedder, IndexError, StructuralEmbedder, VectorIndex,
};
use crate::geo::{GeoError, GeoPoint};
use crate::osm::OsmElementSet;
use crate::retrieval::{
    rerank, GedCosts, JointModel, RankedScene, RerankMode, RerankOptions, RetrievalError, TrainingPair,
    DEFAULT_BUDGET,
};
use crate::scenegraph::{build_map_graph, build_text_graph, SceneError, SceneGraph, DEFAULT_EDGE_THRESHOLD};
use crate::textio::{
    describe_graph, parse_description, perturb_description, render_description, Description, TextError,
    DEFAULT_MAX_SENTENCES,
};

pub const DEFAULT_RADIUS: f64 = 50.0;
pub const DEFAULT_MIN_NODES: usize = 6;
pub const DEFAULT_CANDIDATES: usize = 10;
pub const DEFAULT_KS: [usize; 3] = [1, 3, 5];
/// Objects per generated query, taken nearest the scene center.
pub const QUERY_OBJECTS: usize = 6;
pub const DB_FORMAT: &str = "textplace-scenes";
pub const DB_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no grid cell produced a scene")]
    EmptyDatabase,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("database line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("unsupported database version {0}")]
    Version(u32),
    #[error("database truncated: header announces {expected} scenes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("scene `{0}` is not in the database")]
    UnknownScene(String),
    #[error("index does not match database: {0}")]
    IndexMismatch(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Where and how scenes are cut out of the map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub south_west: GeoPoint,
    pub north_east: GeoPoint,
    pub cells: usize,
    pub radius: f64,
    pub min_nodes: usize,
}

impl GridSpec {
    pub fn new(south_west: GeoPoint, north_east: GeoPoint, cells: usize) -> Self {
        Self {
            south_west,
            north_east,
            cells,
            radius: DEFAULT_RADIUS,
            min_nodes: DEFAULT_MIN_NODES,
        }
    }

    fn validate(&self) -> Result<(), PipelineError> {
        if self.cells == 0 {
            return Err(PipelineError::InvalidGrid("cell count must be at least 1".into()));
        }
        if self.south_west.lat() > self.north_east.lat() || self.south_west.lon() > self.north_east.lon() {
            return Err(PipelineError::InvalidGrid("bbox corners are not ordered".into()));
        }
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return Err(PipelineError::InvalidGrid("radius must be positive".into()));
        }
        Ok(())
    }
}

/// Rows and columns for `cells` centers: the most square exact
/// factorization when its aspect ratio is at most 2, otherwise a
/// `floor(sqrt)`-row grid whose last row is partly filled.
pub fn grid_shape(cells: usize) -> (usize, usize) {
    let cells = cells.max(1);
    let root = (cells as f64).sqrt().floor() as usize;
    if let Some(rows) = (1..=root).rev().find(|r| cells % r == 0) {
        let cols = cells / rows;
        if cols <= 2 * rows {
            return (rows, cols);
        }
    }
    (root, cells.div_ceil(root))
}

/// Cell centers in row-major order: `(row, col, center)`.
pub fn grid_centers(spec: &GridSpec) -> Result<Vec<(usize, usize, GeoPoint)>, PipelineError> {
    spec.validate()?;
    let (rows, cols) = grid_shape(spec.cells);
    let dlat = (spec.north_east.lat() - spec.south_west.lat()) / rows as f64;
    let dlon = (spec.north_east.lon() - spec.south_west.lon()) / cols as f64;
    let mut out = Vec::with_capacity(spec.cells);
    'rows: for row in 0..rows {
        for col in 0..cols {
            if out.len() == spec.cells {
                break 'rows;
            }
            let center = GeoPoint::new(
                spec.south_west.lat() + (row as f64 + 0.5) * dlat,
                spec.south_west.lon() + (col as f64 + 0.5) * dlon,
            )?;
            out.push((row, col, center));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneDatabase {
    grid: GridSpec,
    scenes: BTreeMap<String, SceneGraph>,
}

#[derive(Serialize, Deserialize)]
struct DbHeader {
    format: String,
    version: u32,
    bbox: [f64; 4],
    cells: usize,
    radius: f64,
    min_nodes: usize,
    scenes: usize,
}

impl SceneDatabase {
    pub fn new(grid: GridSpec, scenes: impl IntoIterator<Item = SceneGraph>) -> Result<Self, PipelineError> {
        let mut map = BTreeMap::new();
        for scene in scenes {
            if scene.nodes().len() < grid.min_nodes {
                return Err(PipelineError::InvalidGrid(format!(
                    "scene `{}` has {} nodes, below the minimum {}",
                    scene.scene_id(),
                    scene.nodes().len(),
                    grid.min_nodes
                )));
            }
            let id = scene.scene_id().to_string();
            if map.insert(id.clone(), scene).is_some() {
                return Err(PipelineError::InvalidGrid(format!("duplicate scene id `{id}`")));
            }
        }
        if map.is_empty() {
            return Err(PipelineError::EmptyDatabase);
        }
        Ok(Self { grid, scenes: map })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn get(&self, scene_id: &str) -> Option<&SceneGraph> {
        self.scenes.get(scene_id)
    }

    /// Scenes in ascending id order.
    pub fn scenes(&self) -> impl Iterator<Item = &SceneGraph> {
        self.scenes.values()
    }

    /// Header line followed by one scene per line.
    pub fn save<W: Write>(&self, mut out: W) -> Result<(), PipelineError> {
        let g = &self.grid;
        let header = DbHeader {
            format: DB_FORMAT.into(),
            version: DB_VERSION,
            bbox: [g.south_west.lat(), g.south_west.lon(), g.north_east.lat(), g.north_east.lon()],
            cells: g.cells,
            radius: g.radius,
            min_nodes: g.min_nodes,
            scenes: self.scenes.len(),
        };
        let line = serde_json::to_string(&header).map_err(|e| PipelineError::Format { line: 1, message: e.to_string() })?;
        writeln!(out, "{line}")?;
        for scene in self.scenes.values() {
            writeln!(out, "{}", scene.to_json_line())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.save(&mut buf).expect("writing to memory cannot fail");
        buf
    }

    pub fn load<R: Read>(input: R) -> Result<Self, PipelineError> {
        let mut lines = BufReader::new(input).lines();
        let first = lines.next().transpose()?.ok_or(PipelineError::Format {
            line: 1,
            message: "empty file".into(),
        })?;
        let header: DbHeader = serde_json::from_str(&first).map_err(|e| PipelineError::Format {
            line: 1,
            message: format!("bad header: {e}"),
        })?;
        if header.format != DB_FORMAT {
            return Err(PipelineError::Format {
                line: 1,
                message: format!("unknown format `{}`", header.format),
            });
        }
        if header.version != DB_VERSION {
            return Err(PipelineError::Version(header.version));
        }
        let [a, b, c, d] = header.bbox;
        let grid = GridSpec {
            south_west: GeoPoint::new(a, b)?,
            north_east: GeoPoint::new(c, d)?,
            cells: header.cells,
            radius: header.radius,
            min_nodes: header.min_nodes,
        };
        let mut scenes = Vec::with_capacity(header.scenes);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let scene = SceneGraph::from_json_line(&line).map_err(|e| PipelineError::Format {
                line: i + 2,
                message: e.to_string(),
            })?;
            scenes.push(scene);
        }
        if scenes.len() != header.scenes {
            return Err(PipelineError::Truncated {
                expected: header.scenes,
                found: scenes.len(),
            });
        }
        Self::new(grid, scenes)
    }
}

/// Cut one map scene graph per grid cell, keeping cells with at least
/// `min_nodes` objects.
pub fn build_database(osm: &OsmElementSet, spec: GridSpec) -> Result<SceneDatabase, PipelineError> {
    let centers = grid_centers(&spec)?;
    let scenes = centers
        .par_iter()
        .map(|&(row, col, center)| {
            let hits = osm.elements_within(center, spec.radius);
            if hits.len() < spec.min_nodes.max(1) {
                return Ok(None);
            }
            let objects: Vec<(String, _)> = hits.iter().map(|h| (h.element.label.clone(), h.nearest)).collect();
            let graph = build_map_graph(&objects, DEFAULT_EDGE_THRESHOLD, format!("cell_{row}_{col}"), Some(center))?;
            Ok(Some(graph.quantized()))
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    let scenes: Vec<SceneGraph> = scenes.into_iter().flatten().collect();
    if scenes.is_empty() {
        return Err(PipelineError::EmptyDatabase);
    }
    SceneDatabase::new(spec, scenes)
}

/// Embed every scene of the database.
pub fn build_index(db: &SceneDatabase, embedder: &(dyn GraphEmbedder + Sync)) -> Result<VectorIndex, PipelineError> {
    let vectors = db
        .scenes
        .par_iter()
        .map(|(id, g)| Ok((id.clone(), embedder.embed(g)?)))
        .collect::<Result<Vec<_>, IndexError>>()?;
    let mut index = VectorIndex::new(embedder.dim());
    for (id, v) in vectors {
        index.insert(id, &v)?;
    }
    Ok(index)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryMode {
    Ged,
    Net,
    /// Candidate extraction only; results ranked by embedding similarity.
    None,
}

impl QueryMode {
    fn rerank(self) -> Option<RerankMode> {
        match self {
            QueryMode::Ged => Some(RerankMode::Ged),
            QueryMode::Net => Some(RerankMode::Net),
            QueryMode::None => None,
        }
    }
}

impl std::str::FromStr for QueryMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ged" => Ok(QueryMode::Ged),
            "net" => Ok(QueryMode::Net),
            "none" => Ok(QueryMode::None),
            other => Err(format!("unknown mode `{other}` (expected ged, net or none)")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QueryOptions<'m> {
    pub n: usize,
    pub k: usize,
    pub mode: QueryMode,
    pub costs: GedCosts,
    pub budget: usize,
    pub model: Option<&'m JointModel>,
}

impl Default for QueryOptions<'_> {
    fn default() -> Self {
        Self {
            n: DEFAULT_CANDIDATES,
            k: 5,
            mode: QueryMode::Ged,
            costs: GedCosts::subgraph(),
            budget: DEFAULT_BUDGET,
            model: None,
        }
    }
}

impl<'m> QueryOptions<'m> {
    fn rerank_options(&self, mode: RerankMode) -> RerankOptions<'m> {
        RerankOptions {
            mode,
            k: self.k,
            costs: self.costs,
            budget: self.budget,
            model: self.model,
        }
    }
}

/// Wall time per stage, milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub parse_ms: f64,
    pub graph_ms: f64,
    pub embed_ms: f64,
    pub candidates_ms: f64,
    pub rerank_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    pub ranked: Vec<RankedScene>,
    pub mode: QueryMode,
    pub candidates: CandidateSet,
    pub timings: StageTimings,
}

impl QueryOutcome {
    pub fn ranked_ids(&self) -> Vec<String> {
        self.ranked.iter().map(|r| r.scene_id.clone()).collect()
    }
}

fn ms_since(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

fn check_index(db: &SceneDatabase, index: &VectorIndex) -> Result<(), PipelineError> {
    if index.len() != db.len() {
        return Err(PipelineError::IndexMismatch(format!(
            "index holds {} vectors for {} scenes",
            index.len(),
            db.len()
        )));
    }
    Ok(())
}

/// Text graph of a description.
pub fn text_graph(text: &Description) -> Result<SceneGraph, PipelineError> {
    let parsed = parse_description(text)?;
    Ok(build_text_graph(&parsed, "query")?)
}

/// Parse, embed, extract `n` candidates and rerank them.
pub fn query(db: &SceneDatabase, index: &VectorIndex, text: &Description, opts: &QueryOptions<'_>) -> Result<QueryOutcome, PipelineError> {
    check_index(db, index)?;
    let start = Instant::now();
    let parsed = parse_description(text)?;
    let parse_ms = ms_since(start);
    let t = Instant::now();
    let graph = build_text_graph(&parsed, "query")?;
    let graph_ms = ms_since(t);
    let mut out = query_graph(db, index, &graph, opts)?;
    out.timings.parse_ms = parse_ms;
    out.timings.graph_ms = graph_ms;
    out.timings.total_ms = ms_since(start);
    Ok(out)
}

/// [`query`] starting from an already built text graph.
pub fn query_graph(db: &SceneDatabase, index: &VectorIndex, graph: &SceneGraph, opts: &QueryOptions<'_>) -> Result<QueryOutcome, PipelineError> {
    let start = Instant::now();
    let mut timings = StageTimings::default();
    let t = Instant::now();
    let embedding = StructuralEmbedder { dim: index.dim() }.embed(graph)?;
    timings.embed_ms = ms_since(t);
    let t = Instant::now();
    let candidates = index.extract_candidates(&embedding, opts.n)?;
    timings.candidates_ms = ms_since(t);
    let t = Instant::now();
    let ranked = match opts.mode.rerank() {
        None => candidates
            .ranked
            .iter()
            .take(opts.k)
            .map(|c| RankedScene {
                scene_id: c.scene_id.clone(),
                score: c.score,
            })
            .collect(),
        Some(mode) => {
            let graphs = candidates
                .ranked
                .iter()
                .map(|c| db.get(&c.scene_id).ok_or_else(|| PipelineError::UnknownScene(c.scene_id.clone())))
                .collect::<Result<Vec<_>, _>>()?;
            rerank(graph, &graphs, &opts.rerank_options(mode))?.ranked
        }
    };
    timings.rerank_ms = ms_since(t);
    timings.total_ms = ms_since(start);
    Ok(QueryOutcome {
        ranked,
        mode: opts.mode,
        candidates,
        timings,
    })
}

/// Rerank against every scene of the database, skipping candidate
/// extraction.
pub fn rerank_all(db: &SceneDatabase, graph: &SceneGraph, opts: &QueryOptions<'_>) -> Result<Vec<RankedScene>, PipelineError> {
    let mode = opts.mode.rerank().unwrap_or(RerankMode::Ged);
    let graphs: Vec<&SceneGraph> = db.scenes().collect();
    Ok(rerank(graph, &graphs, &opts.rerank_options(mode))?.ranked)
}

/// One line of a query batch file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedQuery {
    pub query_id: String,
    pub truth_scene_id: String,
    pub sentences: Vec<String>,
}

impl GeneratedQuery {
    pub fn description(&self) -> Description {
        Description::new(self.sentences.clone())
    }
}

/// Subgraph of the `QUERY_OBJECTS` objects nearest the scene center.
pub fn query_subgraph(scene: &SceneGraph) -> Result<SceneGraph, PipelineError> {
    let mut order: Vec<(f64, usize)> = scene
        .nodes()
        .iter()
        .enumerate()
        .map(|(i, n)| (n.position.map_or(f64::INFINITY, |p| p.x.hypot(p.y)), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let keep: Vec<usize> = order.iter().take(QUERY_OBJECTS).map(|&(_, i)| i).collect();
    Ok(scene.induced(&keep, scene.scene_id())?)
}

/// Perturbation applied when generating queries.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Perturbation {
    pub drop_labels: usize,
    pub flip_relations: usize,
}

/// Describe the central objects of `scene`.
pub fn describe_scene(scene: &SceneGraph, perturbation: Perturbation, seed: u64) -> Result<Description, PipelineError> {
    let sub = query_subgraph(scene)?;
    let mut parsed = describe_graph(&sub, DEFAULT_MAX_SENTENCES);
    if perturbation != Perturbation::default() {
        parsed = perturb_description(&parsed, perturbation.drop_labels, perturbation.flip_relations, seed);
    }
    Ok(render_description(&parsed))
}

/// Generate `count` queries from database scenes. Scenes are drawn without
/// replacement while possible.
pub fn generate_queries(db: &SceneDatabase, count: usize, perturbation: Perturbation, seed: u64) -> Result<Vec<GeneratedQuery>, PipelineError> {
    let ids: Vec<&String> = db.scenes.keys().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = Vec::with_capacity(count);
    while picks.len() < count {
        let take = (count - picks.len()).min(ids.len());
        let mut round = sample(&mut rng, ids.len(), take).into_vec();
        round.sort_unstable();
        picks.extend(round);
    }
    picks
        .into_iter()
        .enumerate()
        .map(|(q, i)| {
            let scene = &db.scenes[ids[i]];
            let text = describe_scene(scene, perturbation, seed ^ (q as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))?;
            Ok(GeneratedQuery {
                query_id: format!("q{q:05}"),
                truth_scene_id: ids[i].clone(),
                sentences: text.sentences,
            })
        })
        .collect()
}

pub fn write_queries<W: Write>(queries: &[GeneratedQuery], mut out: W) -> Result<(), PipelineError> {
    for q in queries {
        let line = serde_json::to_string(q).map_err(|e| PipelineError::Format { line: 0, message: e.to_string() })?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_queries<R: Read>(input: R) -> Result<Vec<GeneratedQuery>, PipelineError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PipelineError::Format {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Matching and non-matching (text, map) pairs for training. Every scene
/// drawn contributes its own description as a positive and, paired with a
/// different scene, as a negative.
pub fn training_pairs(db: &SceneDatabase, count: usize, seed: u64) -> Result<Vec<TrainingPair>, PipelineError> {
    if db.len() < 2 {
        return Err(PipelineError::InvalidGrid("training pairs need at least two scenes".into()));
    }
    let queries = generate_queries(db, count.div_ceil(2), Perturbation::default(), seed)?;
    let ids: Vec<&String> = db.scenes.keys().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut pairs = Vec::with_capacity(count);
    for q in &queries {
        let text = text_graph(&q.description())?;
        let truth = &db.scenes[&q.truth_scene_id];
        pairs.push(TrainingPair {
            text: text.clone(),
            map: truth.clone(),
            is_match: true,
        });
        if pairs.len() == count {
            break;
        }
        let other = loop {
            let id = ids[rng.random_range(0..ids.len())];
            if *id != q.truth_scene_id {
                break id;
            }
        };
        pairs.push(TrainingPair {
            text,
            map: db.scenes[other].clone(),
            is_match: false,
        });
    }
    pairs.truncate(count);
    Ok(pairs)
}

/// Mean, median and population standard deviation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean_ms: f64,
    pub median_ms: f64,
    pub std_ms: f64,
    pub samples: usize,
}

impl Summary {
    pub fn of(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 {
            sorted[mid]
        } else {
            (sorted[mid - 1] + sorted[mid]) / 2.0
        };
        Self {
            mean_ms: mean,
            median_ms: median,
            std_ms: var.sqrt(),
            samples: samples.len(),
        }
    }
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ± {:.2} ms", self.mean_ms, self.std_ms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub truth_scene_id: String,
    pub ranked_ids: Vec<String>,
    /// `k -> truth within top k`.
    pub hits: BTreeMap<usize, bool>,
    /// Set when the query could not be evaluated.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: QueryMode,
    pub n: usize,
    pub ks: Vec<usize>,
    /// `k -> recall`, over queries without errors.
    pub recall: BTreeMap<usize, f64>,
    pub evaluated: usize,
    pub errors: usize,
    pub records: Vec<QueryRecord>,
    /// Per-stage timing summaries.
    pub timing: BTreeMap<String, Summary>,
    pub db_size_bytes: u64,
}

/// Run every query and score recall at each `k`.
pub fn evaluate(
    db: &SceneDatabase,
    index: &VectorIndex,
    queries: &[GeneratedQuery],
    ks: &[usize],
    opts: &QueryOptions<'_>,
) -> Result<EvalReport, PipelineError> {
    check_index(db, index)?;
    let mut ks: Vec<usize> = ks.iter().copied().filter(|&k| k > 0).collect();
    ks.sort_unstable();
    ks.dedup();
    if ks.is_empty() {
        return Err(PipelineError::InvalidGrid("at least one positive k is required".into()));
    }
    let run_opts = QueryOptions {
        k: *ks.last().expect("non-empty"),
        ..*opts
    };
    let results: Vec<(QueryRecord, Option<StageTimings>)> = queries
        .par_iter()
        .map(|q| {
            let mut record = QueryRecord {
                query_id: q.query_id.clone(),
                truth_scene_id: q.truth_scene_id.clone(),
                ranked_ids: Vec::new(),
                hits: BTreeMap::new(),
                error: None,
            };
            if db.get(&q.truth_scene_id).is_none() {
                record.error = Some(PipelineError::UnknownScene(q.truth_scene_id.clone()).to_string());
                return Ok((record, None));
            }
            match query(db, index, &q.description(), &run_opts) {
                Ok(out) => {
                    record.ranked_ids = out.ranked_ids();
                    for &k in &ks {
                        let hit = record.ranked_ids.iter().take(k).any(|id| *id == q.truth_scene_id);
                        record.hits.insert(k, hit);
                    }
                    Ok((record, Some(out.timings)))
                }
                Err(e @ (PipelineError::Text(_) | PipelineError::Scene(_))) => {
                    record.error = Some(e.to_string());
                    Ok((record, None))
                }
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_, PipelineError>>()?;
    let mut records: Vec<QueryRecord> = Vec::with_capacity(results.len());
    let mut stages: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (record, timing) in results {
        if let Some(t) = timing {
            for (name, v) in [
                ("parse", t.parse_ms),
                ("graph", t.graph_ms),
                ("embed", t.embed_ms),
                ("candidates", t.candidates_ms),
                ("rerank", t.rerank_ms),
                ("total", t.total_ms),
            ] {
                stages.entry(name.to_string()).or_default().push(v);
            }
        }
        records.push(record);
    }
    records.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    let scored: Vec<&QueryRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    let recall = ks
        .iter()
        .map(|&k| {
            let hits = scored.iter().filter(|r| r.hits.get(&k).copied().unwrap_or(false)).count();
            let ratio = if scored.is_empty() { 0.0 } else { hits as f64 / scored.len() as f64 };
            (k, ratio)
        })
        .collect();
    Ok(EvalReport {
        mode: opts.mode,
        n: opts.n,
        ks,
        recall,
        evaluated: scored.len(),
        errors: records.len() - scored.len(),
        records,
        timing: stages.into_iter().map(|(k, v)| (k, Summary::of(&v))).collect(),
        db_size_bytes: db.to_bytes().len() as u64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub repetitions: usize,
    pub queries: usize,
    pub candidates_only: Summary,
    pub rerank_only: Summary,
    pub candidates_rerank: Summary,
    /// Rerank stage alone within candidates + rerank.
    pub candidates_rerank_stage: Summary,
}

/// Time the three pipeline configurations, per query. With more than three
/// repetitions the first one is a warm-up and is discarded.
pub fn bench(
    db: &SceneDatabase,
    index: &VectorIndex,
    queries: &[GeneratedQuery],
    repetitions: usize,
    opts: &QueryOptions<'_>,
) -> Result<BenchReport, PipelineError> {
    check_index(db, index)?;
    if repetitions == 0 {
        return Err(PipelineError::InvalidGrid("repetitions must be at least 1".into()));
    }
    let rerank_mode = match opts.mode {
        QueryMode::None => QueryMode::Ged,
        m => m,
    };
    let with_rerank = QueryOptions { mode: rerank_mode, ..*opts };
    let without = QueryOptions { mode: QueryMode::None, ..*opts };
    let skip = usize::from(repetitions > 3);
    let mut samples: HashMap<&str, Vec<f64>> = HashMap::new();
    for rep in 0..repetitions {
        for q in queries {
            let text = q.description();
            let t = Instant::now();
            query(db, index, &text, &without)?;
            let candidates_only = ms_since(t);

            let t = Instant::now();
            let graph = text_graph(&text)?;
            rerank_all(db, &graph, &with_rerank)?;
            let rerank_only = ms_since(t);

            let t = Instant::now();
            let out = query(db, index, &text, &with_rerank)?;
            let combined = ms_since(t);

            if rep >= skip {
                for (name, v) in [
                    ("candidates_only", candidates_only),
                    ("rerank_only", rerank_only),
                    ("candidates_rerank", combined),
                    ("stage", out.timings.rerank_ms),
                ] {
                    samples.entry(name).or_default().push(v);
                }
            }
        }
    }
    let get = |name: &str| Summary::of(samples.get(name).map_or(&[][..], Vec::as_slice));
    Ok(BenchReport {
        repetitions,
        queries: queries.len(),
        candidates_only: get("candidates_only"),
        rerank_only: get("rerank_only"),
        candidates_rerank: get("candidates_rerank"),
        candidates_rerank_stage: get("stage"),
    })
}

/// Similarity of the query embedding to each of the given scenes, for
/// diagnostics.
pub fn embedding_scores(index: &VectorIndex, graph: &SceneGraph) -> Result<Vec<(String, f64)>, PipelineError> {
    let q = StructuralEmbedder { dim: index.dim() }.embed(graph)?;
    (0..index.len())
        .map(|row| Ok((index.ids()[row].clone(), cosine_similarity(&q, &index.vector(row))?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::osm::parse_osm_bytes;
    use crate::synth::{synthetic_osm_xml, SynthConfig};

    fn synthetic(cells: usize, seed: u64) -> (OsmElementSet, GridSpec) {
        let cfg = SynthConfig::for_grid(cells, 120.0, seed);
        let (set, _) = parse_osm_bytes(synthetic_osm_xml(&cfg).unwrap().as_bytes()).unwrap();
        let (sw, ne) = cfg.bbox().unwrap();
        (set, GridSpec::new(sw, ne, cells))
    }

    #[test]
    fn grid_shapes() {
        assert_eq!(grid_shape(1), (1, 1));
        assert_eq!(grid_shape(16), (4, 4));
        assert_eq!(grid_shape(500), (20, 25));
        assert_eq!(grid_shape(1000), (25, 40));
        assert_eq!(grid_shape(7), (2, 4));
        for cells in 1..300 {
            let (r, c) = grid_shape(cells);
            assert!(r * c >= cells && r * (c - 1) < cells + r, "{cells}: {r}x{c}");
        }
        let spec = GridSpec::new(GeoPoint::new(0.0, 0.0).unwrap(), GeoPoint::new(1.0, 1.0).unwrap(), 7);
        assert_eq!(grid_centers(&spec).unwrap().len(), 7);
        let bad = GridSpec { cells: 0, ..spec };
        assert!(grid_centers(&bad).is_err());
    }

    #[test]
    fn six_element_region_gives_one_scene() {
        let mut xml = String::from("<osm>");
        for (i, (dx, dy)) in [(0, 0), (10, 0), (0, 10), (-10, 5), (5, -12), (20, 20)].iter().enumerate() {
            let lat = 48.96 + *dy as f64 / 111_200.0;
            let lon = 8.47 + *dx as f64 / 73_000.0;
            xml.push_str(&format!(
                "<node id=\"{}\" lat=\"{lat}\" lon=\"{lon}\"><tag k=\"amenity\" v=\"bench\"/></node>",
                i + 1
            ));
        }
        xml.push_str("</osm>");
        let (set, _) = parse_osm_bytes(xml.as_bytes()).unwrap();
        let c = GeoPoint::new(48.96, 8.47).unwrap();
        let spec = GridSpec::new(c, c, 1);
        let db = build_database(&set, spec).unwrap();
        assert_eq!(db.len(), 1);
        let scene = db.get("cell_0_0").unwrap();
        assert_eq!(scene.nodes().len(), 6);
        let far = GeoPoint::new(10.0, 10.0).unwrap();
        assert!(matches!(build_database(&set, GridSpec::new(far, far, 1)), Err(PipelineError::EmptyDatabase)));
    }

    #[test]
    fn database_round_trip_and_determinism() {
        let (set, spec) = synthetic(16, 3);
        let db = build_database(&set, spec).unwrap();
        let again = build_database(&set, spec).unwrap();
        assert_eq!(db.to_bytes(), again.to_bytes());
        let loaded = SceneDatabase::load(db.to_bytes().as_slice()).unwrap();
        assert_eq!(loaded, db);
        assert!(db.scenes().all(|s| s.nodes().len() >= DEFAULT_MIN_NODES));

        assert!(SceneDatabase::load(&b""[..]).is_err());
        let bytes = db.to_bytes();
        let cut = bytes.iter().rposition(|&b| b == b'\n').unwrap();
        let cut = bytes[..cut].iter().rposition(|&b| b == b'\n').unwrap() + 1;
        assert!(matches!(SceneDatabase::load(&bytes[..cut]), Err(PipelineError::Truncated { .. })));
        let text = String::from_utf8(bytes).unwrap().replacen("\"version\":1", "\"version\":9", 1);
        assert!(matches!(SceneDatabase::load(text.as_bytes()), Err(PipelineError::Version(9))));
    }

    #[test]
    fn query_finds_its_scene() {
        let (set, spec) = synthetic(16, 4);
        let db = build_database(&set, spec).unwrap();
        let index = build_index(&db, &StructuralEmbedder::default()).unwrap();
        let queries = generate_queries(&db, 8, Perturbation::default(), 1).unwrap();
        for q in &queries {
            let out = query(&db, &index, &q.description(), &QueryOptions::default()).unwrap();
            assert_eq!(out.ranked[0].scene_id, q.truth_scene_id);
            assert_eq!(out.ranked[0].score, 0.0);
            assert!(out.timings.total_ms >= out.timings.rerank_ms);
        }
        // Truncation floor.
        let sub = SceneDatabase::new(spec, db.scenes().take(3).cloned()).unwrap();
        let sub_index = build_index(&sub, &StructuralEmbedder::default()).unwrap();
        let out = query(&sub, &sub_index, &queries[0].description(), &QueryOptions::default()).unwrap();
        assert_eq!(out.ranked.len(), 3);
        // Plumbing mode returns the embedding ranking.
        let opts = QueryOptions { n: db.len(), mode: QueryMode::None, ..QueryOptions::default() };
        let out = query(&db, &index, &queries[0].description(), &opts).unwrap();
        let graph = text_graph(&queries[0].description()).unwrap();
        let scores = embedding_scores(&index, &graph).unwrap();
        let best = scores
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .unwrap();
        assert_eq!(out.ranked[0].scene_id, best.0);
    }

    #[test]
    fn evaluation_report_shape() {
        let (set, spec) = synthetic(16, 5);
        let db = build_database(&set, spec).unwrap();
        let index = build_index(&db, &StructuralEmbedder::default()).unwrap();
        let mut queries = generate_queries(&db, 10, Perturbation::default(), 2).unwrap();
        queries.push(GeneratedQuery {
            query_id: "zz".into(),
            truth_scene_id: "missing".into(),
            sentences: vec!["There is a Bench.".into()],
        });
        let report = evaluate(&db, &index, &queries, &DEFAULT_KS, &QueryOptions::default()).unwrap();
        assert_eq!(report.errors, 1);
        assert_eq!(report.evaluated, 10);
        assert!(report.recall[&1] <= report.recall[&3] && report.recall[&3] <= report.recall[&5]);
        assert!(report.records.windows(2).all(|w| w[0].query_id < w[1].query_id));
        let json = serde_json::to_string(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.recall, report.recall);
        let again = evaluate(&db, &index, &queries, &DEFAULT_KS, &QueryOptions::default()).unwrap();
        assert_eq!(again.records, report.records);
    }

    #[test]
    fn queries_file_round_trip() {
        let (set, spec) = synthetic(9, 6);
        let db = build_database(&set, spec).unwrap();
        let p = Perturbation { drop_labels: 1, flip_relations: 1 };
        let queries = generate_queries(&db, 20, p, 3).unwrap();
        assert_eq!(queries.len(), 20);
        let mut buf = Vec::new();
        write_queries(&queries, &mut buf).unwrap();
        assert_eq!(read_queries(buf.as_slice()).unwrap(), queries);
        assert_eq!(generate_queries(&db, 20, p, 3).unwrap(), queries);
    }

    #[test]
    fn summary_statistics() {
        let s = Summary::of(&[4.0]);
        assert_eq!((s.mean_ms, s.std_ms, s.median_ms), (4.0, 0.0, 4.0));
        let s = Summary::of(&[1.0, 2.0, 3.0, 6.0]);
        assert_eq!(s.mean_ms, 3.0);
        assert_eq!(s.median_ms, 2.5);
        assert!((s.std_ms - (14.0f64 / 4.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn training_pairs_balanced() {
        let (set, spec) = synthetic(9, 7);
        let db = build_database(&set, spec).unwrap();
        let pairs = training_pairs(&db, 10, 1).unwrap();
        assert_eq!(pairs.len(), 10);
        assert_eq!(pairs.iter().filter(|p| p.is_match).count(), 5);
        for w in pairs.chunks(2) {
            assert!(w[0].is_match && !w[1].is_match);
            assert_eq!(w[0].text, w[1].text);
            assert_ne!(w[0].map.scene_id(), w[1].map.scene_id());
        }
    }
}
