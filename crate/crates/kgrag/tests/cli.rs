mod common;

use std::path::Path;

use common::{cli, cli_with_input, fixture};
use kgrag::runner::{REPORT_JSON, REPORT_TEXT};

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Ingests and builds the fixture store under `dir` through the CLI.
fn build_store(dir: &Path) {
    let corpus = fixture("corpus.jsonl");
    let gazetteer = fixture("gazetteer.txt");
    let intents = fixture("intents.jsonl");
    let (code, out, err) = cli(&["ingest", "--corpus", p(&corpus), "--store", p(dir)]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(out.trim(), "ingested 12 documents into 13 chunks");
    let (code, out, err) =
        cli(&["build", "--store", p(dir), "--gazetteer", p(&gazetteer), "--intents", p(&intents), "--threads", "3"]);
    assert_eq!(code, 0, "{err}");
    assert!(out.starts_with("built 13 chunks, 17 entities, 9 relations"), "{out}");
}

#[test]
fn no_arguments_prints_usage_and_exits_1() {
    let (code, out, err) = cli(&[]);
    assert_eq!(code, 1);
    assert!(out.is_empty());
    assert!(err.contains("Usage: kgrag"), "{err}");
}

#[test]
fn unknown_subcommand_and_flag_exit_1() {
    assert_eq!(cli(&["frobnicate"]).0, 1);
    let (code, _, err) = cli(&["query", "--store", "x", "--nope", "q"]);
    assert_eq!(code, 1);
    assert!(err.contains("--nope"));
}

#[test]
fn help_exits_0() {
    let (code, out, _) = cli(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("ingest") && out.contains("serve"));
}

#[test]
fn ingest_missing_file_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no-such-corpus.jsonl");
    let (code, _, err) = cli(&["ingest", "--corpus", p(&missing), "--store", p(&dir.path().join("s"))]);
    assert_eq!(code, 1);
    assert!(err.contains(p(&missing)), "{err}");
}

#[test]
fn malformed_corpus_line_is_reported_with_its_number() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    std::fs::write(&corpus, "{\"doc_id\":\"a\",\"text\":\"x\"}\nnot json\n").unwrap();
    let (code, _, err) = cli(&["ingest", "--corpus", p(&corpus), "--store", p(&dir.path().join("s"))]);
    assert_eq!(code, 1);
    assert!(err.contains("c.jsonl:2:"), "{err}");
}

#[test]
fn query_before_build_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = cli(&["query", "--store", p(dir.path()), "hello"]);
    assert_eq!(code, 1, "{err}");
}

#[test]
fn query_chat_and_eval_on_the_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    build_store(&store);

    let (code, out, err) = cli(&["query", "--store", p(&store), "--json", "How do I pay my bill?"]);
    assert_eq!(code, 0, "{err}");
    let resp: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(resp["answer"].as_str().unwrap().starts_with("ECHO: "));
    assert!(resp["contexts"].as_array().unwrap().iter().any(|c| c == "billing-payment#0"));
    assert_eq!(resp["trace_id"].as_str().unwrap().len(), 64);

    let (code, _, _) = cli(&["query", "--store", p(&store), "--preset", "nope", "q"]);
    assert_eq!(code, 1);
    let (code, _, _) = cli(&["query", "--store", p(&store), "   "]);
    assert_eq!(code, 1);

    let traces = dir.path().join("traces");
    let (code, out, err) = cli_with_input(
        &["chat", "--store", p(&store), "--preset", "baseline-hybrid", "--trace-dir", p(&traces)],
        "How do I pay my bill?\nPower outage in my area\n",
    );
    assert_eq!(code, 0, "{err}");
    assert_eq!(out.lines().filter(|l| l.starts_with("ECHO: ")).count(), 2);
    assert_eq!(std::fs::read_dir(&traces).unwrap().count(), 2);

    let dataset = fixture("questions.jsonl");
    let run = |out_dir: &Path| {
        let (code, table, err) =
            cli(&["eval", "--store", p(&store), "--dataset", p(&dataset), "--out", p(out_dir), "--threads", "4"]);
        assert_eq!(code, 0, "{err}");
        table
    };
    let (a, b) = (dir.path().join("eval-a"), dir.path().join("eval-b"));
    let table = run(&a);
    run(&b);
    for name in ["baseline-dense", "baseline-hybrid", "baseline-graph", "optimized"] {
        assert!(table.contains(name), "{table}");
    }
    for file in [REPORT_JSON, REPORT_TEXT] {
        assert_eq!(std::fs::read(a.join(file)).unwrap(), std::fs::read(b.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn eval_rejects_unknown_gold_ids() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    build_store(&store);
    let dataset = dir.path().join("d.jsonl");
    std::fs::write(&dataset, "{\"question\":\"q\",\"gold_chunk_ids\":[\"missing#0\"]}\n").unwrap();
    let (code, _, err) = cli(&["eval", "--store", p(&store), "--dataset", p(&dataset), "--out", p(dir.path())]);
    assert_eq!(code, 1);
    assert!(err.contains("missing#0"), "{err}");
}
