//! End-to-end runs through files on disk.

mod common;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};

use common::synthetic_region;
use textplace::embed_index::{StructuralEmbedder, VectorIndex};
use textplace::osm::OsmElementSet;
use textplace::pipeline::{
    build_database, build_index, evaluate, generate_queries, read_queries, write_queries, EvalReport, Perturbation,
    QueryMode, QueryOptions, SceneDatabase,
};

fn strip_timing(mut r: EvalReport) -> EvalReport {
    r.timing.clear();
    r
}

#[test]
fn artifacts_survive_the_disk() {
    let dir = tempfile::tempdir().unwrap();
    let (elements, grid) = synthetic_region(25, 11);

    let store = dir.path().join("elements.bin");
    elements.write_store(BufWriter::new(File::create(&store).unwrap())).unwrap();
    let elements_back = OsmElementSet::read_store(BufReader::new(File::open(&store).unwrap())).unwrap();
    assert_eq!(elements_back.elements(), elements.elements());

    let db = build_database(&elements_back, grid).unwrap();
    let db_path = dir.path().join("db.jsonl");
    db.save(BufWriter::new(File::create(&db_path).unwrap())).unwrap();
    let db_back = SceneDatabase::load(BufReader::new(File::open(&db_path).unwrap())).unwrap();
    assert_eq!(db_back, db);

    let index = build_index(&db, &StructuralEmbedder { dim: 256 }).unwrap();
    let index_path = dir.path().join("emb.gprv");
    let mut w = BufWriter::new(File::create(&index_path).unwrap());
    index.write_store(&mut w).unwrap();
    w.flush().unwrap();
    drop(w);
    let index_back = VectorIndex::read_store(BufReader::new(File::open(&index_path).unwrap())).unwrap();
    assert_eq!(index_back.ids(), index.ids());

    let queries = generate_queries(&db, 10, Perturbation::default(), 4).unwrap();
    let q_path = dir.path().join("queries.jsonl");
    write_queries(&queries, File::create(&q_path).unwrap()).unwrap();
    assert_eq!(read_queries(File::open(&q_path).unwrap()).unwrap(), queries);

    // A file cut mid-way is rejected rather than loaded short.
    let bytes = std::fs::read(&db_path).unwrap();
    let cut = bytes.len() / 2;
    let end = bytes[..cut].iter().rposition(|b| *b == b'\n').unwrap() + 1;
    assert!(SceneDatabase::load(&bytes[..end]).is_err());
    assert!(SceneDatabase::load(&b""[..]).is_err());
}

#[test]
fn evaluation_is_deterministic_and_monotone() {
    let (elements, grid) = synthetic_region(36, 21);
    let db = build_database(&elements, grid).unwrap();
    let index = build_index(&db, &StructuralEmbedder { dim: 256 }).unwrap();
    let perturbed = Perturbation {
        drop_labels: 1,
        flip_relations: 1,
    };
    for perturbation in [Perturbation::default(), perturbed] {
        let queries = generate_queries(&db, 30, perturbation, 8).unwrap();
        assert_eq!(queries, generate_queries(&db, 30, perturbation, 8).unwrap());
        for mode in [QueryMode::Ged, QueryMode::None] {
            let opts = QueryOptions {
                mode,
                ..QueryOptions::default()
            };
            let a = evaluate(&db, &index, &queries, &[5, 1, 3], &opts).unwrap();
            let b = evaluate(&db, &index, &queries, &[1, 3, 5], &opts).unwrap();
            assert_eq!(a.ks, vec![1, 3, 5]);
            assert!(a.recall[&1] <= a.recall[&3] && a.recall[&3] <= a.recall[&5]);
            assert!(a.records.windows(2).all(|w| w[0].query_id < w[1].query_id));
            assert_eq!(a.timing.len(), 6);
            assert_eq!(strip_timing(a), strip_timing(b));
        }
    }
}

#[test]
fn every_scene_as_candidate_finds_unperturbed_queries() {
    let (elements, grid) = synthetic_region(30, 5);
    let db = build_database(&elements, grid).unwrap();
    let index = build_index(&db, &StructuralEmbedder { dim: 256 }).unwrap();
    let queries = generate_queries(&db, 20, Perturbation::default(), 2).unwrap();
    let opts = QueryOptions {
        n: db.len(),
        ..QueryOptions::default()
    };
    let report = evaluate(&db, &index, &queries, &[1], &opts).unwrap();
    assert_eq!(report.errors, 0);
    assert_eq!(report.recall[&1], 1.0);
}
