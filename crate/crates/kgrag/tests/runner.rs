mod common;

use kgrag::runner::{self, EvalConfig, EvalOptions};
use kgrag::{BackendSet, Error};
use kgrag_core::pipeline::Preset;
use kgrag_core::{PromptSet, StubEmbedder};

fn eval_into(dir: &std::path::Path) -> runner::EvalRun {
    let dataset = kgrag::io::load_dataset(&common::fixture("questions.jsonl")).unwrap();
    let configs =
        vec![EvalConfig { name: "optimized".into(), config: Preset::Optimized.config(), backends: BackendSet::stub() }];
    let opts = EvalOptions { recall_k: 20, threads: 2, trace_dir: Some(dir.to_path_buf()) };
    runner::run_eval(common::workspace(), &PromptSet::default(), &dataset, &configs, &opts).unwrap()
}

#[test]
fn tampered_trace_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let run = eval_into(dir.path());
    let id = &run.traces[0].trace_id;
    let path = dir.path().join(format!("{id}.json"));
    let text = std::fs::read_to_string(&path).unwrap().replacen("\"answer\":\"", "\"answer\":\"X", 1);
    std::fs::write(&path, text).unwrap();
    let dataset = kgrag::io::load_dataset(&common::fixture("questions.jsonl")).unwrap();
    match runner::report_from_traces(dir.path(), &dataset, &StubEmbedder::default(), 20) {
        Err(Error::Format { message, .. }) => assert!(message.contains("does not match")),
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn duplicate_config_names_are_rejected() {
    let dataset = kgrag::io::load_dataset(&common::fixture("questions.jsonl")).unwrap();
    let cfg = || EvalConfig { name: "x".into(), config: Preset::BaselineDense.config(), backends: BackendSet::stub() };
    let opts = EvalOptions { recall_k: 20, threads: 1, trace_dir: None };
    let err = runner::run_eval(common::workspace(), &PromptSet::default(), &dataset, &[cfg(), cfg()], &opts);
    assert!(matches!(err, Err(Error::Usage(_))));
}

#[test]
fn trace_index_lists_every_record_once() {
    let dir = tempfile::tempdir().unwrap();
    let run = eval_into(dir.path());
    let index: Vec<runner::TraceIndexLine> = kgrag::io::read_jsonl(&dir.path().join(runner::TRACE_INDEX)).unwrap();
    assert_eq!(index, run.traces);
    assert_eq!(index.iter().map(|l| l.record_index).collect::<Vec<_>>(), (0..40).collect::<Vec<_>>());
}
