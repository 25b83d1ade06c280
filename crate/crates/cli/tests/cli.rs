use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn textplace(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_textplace"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok_json(out: Output) -> Value {
    assert!(
        out.status.success(),
        "status {:?}, stderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn error_line(out: &Output) -> Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error line");
    serde_json::from_str(line).expect("error line is JSON")
}

/// Synthetic map through database, index and queries.
fn prepare(dir: &Path, cells: &str) {
    let synth = ok_json(textplace(dir, &["synth-osm", "--cells", cells, "--seed", "5", "--out", "map.osm"]));
    let bbox = synth["bbox"].as_str().unwrap().to_string();
    let ingest = ok_json(textplace(dir, &["ingest", "map.osm", "--out", "elements.bin"]));
    assert_eq!(ingest["elements"], synth["features"]);
    let db = ok_json(textplace(
        dir,
        &["build-db", "--osm", "elements.bin", "--bbox", &bbox, "--cells", cells, "--out", "db.jsonl"],
    ));
    let scenes = db["scenes"].as_u64().unwrap();
    assert!(scenes > 0 && scenes <= cells.parse::<u64>().unwrap());
    let index = ok_json(textplace(dir, &["index", "--db", "db.jsonl", "--dim", "256", "--out", "emb.gprv"]));
    assert_eq!(index["vectors"], db["scenes"]);
    ok_json(textplace(
        dir,
        &["gen-queries", "--db", "db.jsonl", "--count", "12", "--seed", "2", "--out", "queries.jsonl"],
    ));
}

#[test]
fn end_to_end_eval_and_query() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir, "36");

    let summary = ok_json(textplace(
        dir,
        &[
            "eval", "--db", "db.jsonl", "--index", "emb.gprv", "--queries", "queries.jsonl", "--ks", "1,3,5",
            "--n", "36", "--report", "report.json",
        ],
    ));
    assert_eq!(summary["evaluated"], 12);
    let report: Value = serde_json::from_slice(&std::fs::read(dir.join("report.json")).unwrap()).unwrap();
    for field in ["mode", "n", "ks", "recall", "evaluated", "errors", "records", "timing", "db_size_bytes"] {
        assert!(report.get(field).is_some(), "missing {field}");
    }
    let r1 = report["recall"]["1"].as_f64().unwrap();
    let r5 = report["recall"]["5"].as_f64().unwrap();
    assert!(r1 <= r5);
    // With every scene a candidate, unperturbed queries find a zero-cost match.
    assert_eq!(r1, 1.0);

    let first: Value = serde_json::from_str(
        std::fs::read_to_string(dir.join("queries.jsonl")).unwrap().lines().next().unwrap(),
    )
    .unwrap();
    let text: Vec<&str> = first["sentences"].as_array().unwrap().iter().map(|s| s.as_str().unwrap()).collect();
    std::fs::write(dir.join("text.txt"), text.join("\n")).unwrap();
    let result = ok_json(textplace(
        dir,
        &["query", "--db", "db.jsonl", "--index", "emb.gprv", "--text", "text.txt", "--n", "36", "--k", "3"],
    ));
    assert_eq!(result["ranked"][0]["scene_id"], first["truth_scene_id"]);
    assert_eq!(result["ranked"].as_array().unwrap().len(), 3);
}

#[test]
fn bench_and_train_produce_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir, "16");
    let bench = ok_json(textplace(
        dir,
        &["bench", "--db", "db.jsonl", "--index", "emb.gprv", "--queries", "queries.jsonl", "--reps", "1"],
    ));
    for config in ["candidates_only", "rerank_only", "candidates_rerank"] {
        assert_eq!(bench[config]["samples"], 12, "{config}");
        assert!(bench[config]["mean_ms"].as_f64().unwrap() > 0.0);
    }

    let train = ok_json(textplace(
        dir,
        &[
            "train", "--db", "db.jsonl", "--pairs", "8", "--epochs", "3", "--hidden", "16", "--heads", "2",
            "--out", "model.gprm",
        ],
    ));
    assert!(train["final_loss"].as_f64().unwrap() <= train["initial_loss"].as_f64().unwrap());
    std::fs::write(dir.join("text.txt"), "The Bench is north of the Tree.\n").unwrap();
    let out = textplace(
        dir,
        &["query", "--db", "db.jsonl", "--index", "emb.gprv", "--text", "text.txt", "--mode", "net", "--model", "model.gprm"],
    );
    let result = ok_json(out);
    assert_eq!(result["mode"], "net");
}

#[test]
fn failures_emit_one_json_error_line() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    let out = textplace(dir, &["index", "--db", "missing.jsonl", "--out", "x.gprv"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"]["kind"], "io");

    std::fs::write(dir.join("bad.jsonl"), "not json\n").unwrap();
    let out = textplace(dir, &["index", "--db", "bad.jsonl", "--out", "x.gprv"]);
    assert_eq!(error_line(&out)["error"]["kind"], "pipeline");

    let out = textplace(dir, &["query", "--db", "a", "--index", "b", "--text", "c", "--mode", "fuzzy"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"]["kind"], "usage");

    std::fs::write(dir.join("map.osm"), "<osm><node id=\"1\" lat=\"91\" lon=\"0\"/></osm>").unwrap();
    let out = textplace(dir, &["ingest", "map.osm", "--out", "e.bin"]);
    assert_eq!(error_line(&out)["error"]["kind"], "osm");

    let out = textplace(
        dir,
        &["build-db", "--osm", "map.osm", "--bbox", "1,2,3", "--cells", "4", "--out", "db.jsonl"],
    );
    assert_eq!(error_line(&out)["error"]["message"], "--bbox takes exactly four numbers");
}
