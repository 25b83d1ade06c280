//! `textplace` command-line tool.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use textplace::embed_index::{StructuralEmbedder, VectorIndex, DEFAULT_DIM};
use textplace::osm::{parse_osm, OsmElementSet, STORE_MAGIC};
use textplace::pipeline::{
    self, GridSpec, Perturbation, QueryMode, QueryOptions, SceneDatabase, DEFAULT_CANDIDATES, DEFAULT_MIN_NODES,
    DEFAULT_RADIUS,
};
use textplace::retrieval::{JointModel, ModelConfig, Pooling};
use textplace::synth::{synthetic_osm_xml, SynthConfig};
use textplace::textio::Description;
use textplace::GeoPoint;

#[derive(Parser)]
#[command(name = "textplace", version, about = "Place recognition from text descriptions over OSM scene graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse an OSM XML extract into a binary element store.
    Ingest {
        osm: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cut a grid of scene graphs out of a map.
    BuildDb(BuildDb),
    /// Embed every database scene into a vector index.
    Index {
        #[arg(long)]
        db: PathBuf,
        #[arg(long, default_value_t = DEFAULT_DIM)]
        dim: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate text queries from database scenes.
    GenQueries {
        #[arg(long)]
        db: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        drop_labels: usize,
        #[arg(long, default_value_t = 0)]
        flip_relations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Localize one text description.
    Query {
        #[command(flatten)]
        data: DataArgs,
        /// File with one sentence per line.
        #[arg(long)]
        text: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[command(flatten)]
        search: SearchArgs,
    },
    /// Score recall@k over a query batch.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
        ks: Vec<usize>,
        #[command(flatten)]
        search: SearchArgs,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Time candidates-only, rerank-only and candidates+rerank per query.
    Bench {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[command(flatten)]
        search: SearchArgs,
    },
    /// Train the joint text/map model on pairs drawn from a database.
    Train(Train),
    /// Write a seeded synthetic OSM extract.
    SynthOsm {
        /// Number of grid cells the extract should cover.
        #[arg(long, default_value_t = 100)]
        cells: usize,
        #[arg(long, default_value_t = 120.0)]
        spacing: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct BuildDb {
    /// OSM XML extract or element store written by `ingest`.
    #[arg(long)]
    osm: PathBuf,
    /// lat1,lon1,lat2,lon2 (any two opposite corners).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    bbox: Vec<f64>,
    #[arg(long)]
    cells: usize,
    #[arg(long, default_value_t = DEFAULT_RADIUS)]
    radius: f64,
    #[arg(long, default_value_t = DEFAULT_MIN_NODES)]
    min_nodes: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    db: PathBuf,
    /// Number of (text, map) pairs; half match, half do not.
    #[arg(long, default_value_t = 50)]
    pairs: usize,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long)]
    max_pooling: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    db: PathBuf,
    #[arg(long)]
    index: PathBuf,
}

#[derive(Args)]
struct SearchArgs {
    /// Candidates kept after the embedding stage.
    #[arg(long, default_value_t = DEFAULT_CANDIDATES)]
    n: usize,
    /// ged, net or none.
    #[arg(long, default_value = "ged")]
    mode: QueryMode,
    /// Checkpoint for `--mode net`.
    #[arg(long)]
    model: Option<PathBuf>,
}

impl SearchArgs {
    fn load_model(&self) -> Result<Option<JointModel>> {
        match (&self.model, self.mode) {
            (Some(path), _) => Ok(Some(JointModel::read_checkpoint(open(path)?).with_context(|| path_context(path))?)),
            (None, QueryMode::Net) => bail!("--mode net requires --model"),
            (None, _) => Ok(None),
        }
    }

    fn options<'m>(&self, model: Option<&'m JointModel>) -> QueryOptions<'m> {
        QueryOptions {
            n: self.n,
            mode: self.mode,
            model,
            ..QueryOptions::default()
        }
    }
}

fn path_context(path: &Path) -> String {
    format!("reading {}", path.display())
}

fn open(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn load_db(path: &Path) -> Result<SceneDatabase> {
    SceneDatabase::load(open(path)?).with_context(|| path_context(path))
}

fn load_index(path: &Path) -> Result<VectorIndex> {
    VectorIndex::read_store(open(path)?).with_context(|| path_context(path))
}

fn load_elements(path: &Path) -> Result<OsmElementSet> {
    let mut bytes = Vec::new();
    open(path)?.read_to_end(&mut bytes).with_context(|| path_context(path))?;
    if bytes.starts_with(STORE_MAGIC) {
        return OsmElementSet::read_store(bytes.as_slice()).with_context(|| path_context(path));
    }
    let (set, _) = parse_osm(bytes.as_slice()).with_context(|| path_context(path))?;
    Ok(set)
}

fn skipped_json(r: &textplace::osm::ParseReport) -> serde_json::Value {
    json!({
        "ways_missing_nodes": r.ways_missing_nodes,
        "degenerate_ways": r.degenerate_ways,
        "unlabeled": r.unlabeled,
        "relations": r.relations_skipped,
    })
}

fn print(value: &serde_json::Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { osm, out } => {
            let (set, report) = parse_osm(open(&osm)?).with_context(|| path_context(&osm))?;
            let mut w = create(&out)?;
            set.write_store(&mut w)?;
            w.flush()?;
            print(&json!({ "elements": set.len(), "skipped": skipped_json(&report), "out": out }))
        }
        Command::BuildDb(args) => {
            let [lat1, lon1, lat2, lon2] = args.bbox[..] else {
                bail!("--bbox takes exactly four numbers");
            };
            let sw = GeoPoint::new(lat1.min(lat2), lon1.min(lon2))?;
            let ne = GeoPoint::new(lat1.max(lat2), lon1.max(lon2))?;
            let elements = load_elements(&args.osm)?;
            let spec = GridSpec {
                radius: args.radius,
                min_nodes: args.min_nodes,
                ..GridSpec::new(sw, ne, args.cells)
            };
            let db = pipeline::build_database(&elements, spec)?;
            let mut w = create(&args.out)?;
            db.save(&mut w)?;
            let bytes = std::fs::metadata(&args.out).map(|m| m.len()).unwrap_or(0);
            print(&json!({ "scenes": db.len(), "cells": args.cells, "bytes": bytes, "out": args.out }))
        }
        Command::Index { db, dim, out } => {
            let db = load_db(&db)?;
            let index = pipeline::build_index(&db, &StructuralEmbedder { dim })?;
            let mut w = create(&out)?;
            index.write_store(&mut w)?;
            w.flush()?;
            print(&json!({ "vectors": index.len(), "dim": index.dim(), "out": out }))
        }
        Command::GenQueries {
            db,
            count,
            drop_labels,
            flip_relations,
            seed,
            out,
        } => {
            let db = load_db(&db)?;
            let perturbation = Perturbation {
                drop_labels,
                flip_relations,
            };
            let queries = pipeline::generate_queries(&db, count, perturbation, seed)?;
            pipeline::write_queries(&queries, create(&out)?)?;
            print(&json!({ "queries": queries.len(), "out": out }))
        }
        Command::Query { data, text, k, search } => {
            let db = load_db(&data.db)?;
            let index = load_index(&data.index)?;
            let model = search.load_model()?;
            let mut raw = String::new();
            open(&text)?.read_to_string(&mut raw).with_context(|| path_context(&text))?;
            let opts = QueryOptions {
                k,
                ..search.options(model.as_ref())
            };
            let out = pipeline::query(&db, &index, &Description::from_lines(&raw), &opts)?;
            let ranked: Vec<_> = out
                .ranked
                .iter()
                .map(|r| json!({ "scene_id": r.scene_id, "score": r.score }))
                .collect();
            let candidates: Vec<_> = out
                .candidates
                .ranked
                .iter()
                .map(|c| json!({ "scene_id": c.scene_id, "similarity": c.score }))
                .collect();
            print(&json!({
                "mode": out.mode,
                "ranked": ranked,
                "candidates": candidates,
                "timings": out.timings,
            }))
        }
        Command::Eval {
            data,
            queries,
            ks,
            search,
            report,
        } => {
            let db = load_db(&data.db)?;
            let index = load_index(&data.index)?;
            let model = search.load_model()?;
            let queries = pipeline::read_queries(open(&queries)?).with_context(|| path_context(&queries))?;
            let result = pipeline::evaluate(&db, &index, &queries, &ks, &search.options(model.as_ref()))?;
            if let Some(path) = &report {
                let mut w = create(path)?;
                serde_json::to_writer_pretty(&mut w, &result)?;
                w.flush()?;
            }
            let recall: serde_json::Map<String, serde_json::Value> =
                result.recall.iter().map(|(k, r)| (format!("recall@{k}"), json!(r))).collect();
            print(&json!({
                "mode": result.mode,
                "n": result.n,
                "evaluated": result.evaluated,
                "errors": result.errors,
                "recall": recall,
                "total_ms": result.timing.get("total"),
                "db_size_bytes": result.db_size_bytes,
            }))
        }
        Command::Bench {
            data,
            queries,
            reps,
            search,
        } => {
            let db = load_db(&data.db)?;
            let index = load_index(&data.index)?;
            let model = search.load_model()?;
            let queries = pipeline::read_queries(open(&queries)?).with_context(|| path_context(&queries))?;
            let report = pipeline::bench(&db, &index, &queries, reps, &search.options(model.as_ref()))?;
            print(&serde_json::to_value(&report)?)
        }
        Command::Train(args) => {
            let db = load_db(&args.db)?;
            let pairs = pipeline::training_pairs(&db, args.pairs, args.seed)?;
            let config = ModelConfig {
                hidden: args.hidden,
                layers: args.layers,
                heads: args.heads,
                pooling: if args.max_pooling { Pooling::Max } else { Pooling::Mean },
                ..ModelConfig::default()
            };
            let (model, trace) = textplace::retrieval::train(config, &pairs, args.epochs, args.lr, args.seed)?;
            let mut w = create(&args.out)?;
            model.write_checkpoint(&mut w)?;
            w.flush()?;
            print(&json!({
                "pairs": pairs.len(),
                "epochs": args.epochs,
                "initial_loss": trace.first(),
                "final_loss": trace.last(),
                "out": args.out,
            }))
        }
        Command::SynthOsm {
            cells,
            spacing,
            seed,
            out,
        } => {
            if !(spacing.is_finite() && spacing > 0.0) || cells == 0 {
                bail!("--cells and --spacing must be positive");
            }
            let cfg = SynthConfig::for_grid(cells, spacing, seed);
            let xml = synthetic_osm_xml(&cfg)?;
            let mut w = create(&out)?;
            w.write_all(xml.as_bytes())?;
            w.flush()?;
            let (sw, ne) = cfg.bbox()?;
            print(&json!({
                "features": cfg.feature_count(),
                "bbox": format!("{:.7},{:.7},{:.7},{:.7}", sw.lat(), sw.lon(), ne.lat(), ne.lon()),
                "out": out,
            }))
        }
    }
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    use textplace::{embed_index::IndexError, osm::OsmError, pipeline::PipelineError, retrieval::RetrievalError};
    for cause in err.chain() {
        if cause.is::<std::io::Error>() {
            return "io";
        }
        if cause.is::<OsmError>() {
            return "osm";
        }
        if cause.is::<PipelineError>() {
            return "pipeline";
        }
        if cause.is::<IndexError>() {
            return "index";
        }
        if cause.is::<RetrievalError>() {
            return "retrieval";
        }
    }
    "invalid_input"
}

fn report_error(kind: &str, message: &str) {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message } }));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) if !err.use_stderr() => {
            let _ = err.print();
            return ExitCode::SUCCESS;
        }
        Err(err) => {
            report_error("usage", err.render().to_string().trim());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            report_error(error_kind(&err), &format!("{err:#}"));
            ExitCode::FAILURE
        }
    }
}
