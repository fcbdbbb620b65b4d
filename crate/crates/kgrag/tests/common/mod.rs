#![allow(dead_code)]

pub mod http;

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use kgrag::io;
use kgrag::store::{BuildOptions, Workspace};
use kgrag_core::corpus::{ChunkStore, SplitterConfig};
use kgrag_core::kg::Extractor;
use kgrag_core::retrieval::Bm25Params;
use kgrag_core::StubEmbedder;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

/// The bundled 12-document workspace built with the gazetteer extractor
/// and the stub embedder.
pub fn build_workspace(threads: usize) -> Workspace {
    let docs = io::load_corpus(&fixture("corpus.jsonl")).unwrap();
    let mut chunks = ChunkStore::new(SplitterConfig::default()).unwrap();
    kgrag_core::ingest(&docs, &mut chunks).unwrap();
    let gazetteer = io::load_gazetteer(&fixture("gazetteer.txt")).unwrap();
    let opts = BuildOptions {
        extractor: Extractor::Gazetteer(&gazetteer),
        intents: io::load_intents(&fixture("intents.jsonl")).unwrap(),
        bm25: Bm25Params::default(),
        threads,
    };
    Workspace::build(chunks, &StubEmbedder::default(), &opts).unwrap()
}

pub fn workspace() -> &'static Workspace {
    static WS: OnceLock<Workspace> = OnceLock::new();
    WS.get_or_init(|| build_workspace(4))
}

/// Writes the fixture store to `dir` through the same files the CLI uses.
pub fn save_workspace(dir: &Path) {
    workspace().save(dir).unwrap();
}

/// Runs the CLI in-process and returns (exit code, stdout, stderr).
pub fn cli(args: &[&str]) -> (i32, String, String) {
    cli_with_input(args, "")
}

pub fn cli_with_input(args: &[&str], input: &str) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("kgrag").chain(args.iter().copied());
    let code = kgrag::cli::run(argv, &mut input.as_bytes(), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}
