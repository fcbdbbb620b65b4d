use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use kgrag_core::corpus::SplitterConfig;
use kgrag_core::eval::DEFAULT_RECALL_K;
use kgrag_core::kg::Extractor;
use kgrag_core::pipeline::{Engine, FrozenClock, PipelineConfig, Preset};
use kgrag_core::retrieval::Bm25Params;
use kgrag_core::PromptSet;

use crate::error::{Error, Result};
use crate::gateway::{connect_chat, connect_embedder, BackendSet};
use crate::io;
use crate::runner::{self, EvalConfig, EvalOptions};
use crate::service::{self, AppState, QueryResponse, ServiceConfig};
use crate::store::{self, BuildOptions, Workspace};

#[derive(Debug, Parser)]
#[command(name = "kgrag", version, about = "Graph-based retrieval-augmented QA for customer support")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split a corpus (JSON Lines) into the chunk store.
    Ingest(IngestArgs),
    /// Embed chunks and build the dense, sparse, graph and intent indices.
    Build(BuildArgs),
    /// Answer one question.
    Query(QueryArgs),
    /// Answer questions read from stdin, one per line. Each turn is independent.
    Chat(PipelineArgs),
    /// Run an ablation over configs and write a report.
    Eval(EvalArgs),
    /// Start the HTTP query service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct IngestArgs {
    /// Corpus file, one {"doc_id", "text", "lang"?, "meta"?} per line.
    #[arg(long)]
    corpus: PathBuf,
    /// Store directory; created when missing.
    #[arg(long)]
    store: PathBuf,
    #[arg(long, default_value_t = 800)]
    max_chars: usize,
    #[arg(long, default_value_t = 80)]
    overlap: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ExtractorKind {
    Gazetteer,
    Llm,
}

#[derive(Debug, Args)]
struct BuildArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long, value_enum, default_value_t = ExtractorKind::Gazetteer)]
    extractor: ExtractorKind,
    /// Term list, one `term|type|description` per line.
    #[arg(long, required_if_eq("extractor", "gazetteer"))]
    gazetteer: Option<PathBuf>,
    /// Intent examples, one {"label", "examples"} per line.
    #[arg(long)]
    intents: Option<PathBuf>,
    /// Pipeline config whose backends are used for embedding and extraction.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of prompt template overrides.
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Args)]
struct PipelineArgs {
    #[arg(long)]
    store: PathBuf,
    /// baseline-dense, baseline-hybrid, baseline-graph or optimized.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Pipeline config file (.toml or .json).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Write one trace file per query here.
    #[arg(long)]
    trace_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct QueryArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Print {"answer", "contexts", "trace_id"} instead of the bare answer.
    #[arg(long)]
    json: bool,
    question: String,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    store: PathBuf,
    /// Dataset, one {"question", "gold_chunk_ids", "reference_answer"?, "lang"?} per line.
    #[arg(long)]
    dataset: PathBuf,
    /// Comma-separated config specs: a preset name optionally followed by
    /// stage toggles, e.g. `optimized:-intent` or `baseline-graph:+keywords`.
    #[arg(long, value_delimiter = ',')]
    configs: Vec<String>,
    /// Extra named config file, `NAME=PATH`. Repeatable.
    #[arg(long = "config-file")]
    config_files: Vec<String>,
    /// Report directory (report.json and report.txt).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_RECALL_K)]
    recall_k: usize,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[arg(long)]
    trace_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    #[arg(long, default_value_t = 8)]
    max_concurrent: usize,
    #[arg(long, default_value_t = 60_000)]
    timeout_ms: u64,
}

/// Parses `preset[:±stage...]`, e.g. `optimized:-intent:+keywords`.
pub fn parse_config_spec(spec: &str) -> Result<PipelineConfig> {
    let mut parts = spec.split(':');
    let mut cfg = kgrag_core::preset(parts.next().unwrap_or_default())?;
    for toggle in parts {
        let (on, stage) = match toggle.split_at_checked(1) {
            Some(("+", s)) => (true, s),
            Some(("-", s)) => (false, s),
            _ => return Err(Error::Usage(format!("bad stage toggle {toggle:?} in {spec:?}; use +stage or -stage"))),
        };
        let slot = match stage {
            "rewrite" => &mut cfg.stages.rewrite,
            "keywords" => &mut cfg.stages.keywords,
            "fusion" => &mut cfg.stages.fusion,
            "rerank" => &mut cfg.stages.rerank,
            "intent" => &mut cfg.stages.intent,
            _ => {
                return Err(Error::Usage(format!(
                    "unknown stage {stage:?} in {spec:?}; stages are rewrite, keywords, fusion, rerank, intent"
                )))
            }
        };
        *slot = on;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn threads(requested: Option<usize>) -> usize {
    requested.unwrap_or_else(|| std::thread::available_parallelism().map_or(4, |n| n.get())).max(1)
}

fn prompts(dir: Option<&Path>) -> Result<PromptSet> {
    dir.map_or_else(|| Ok(PromptSet::default()), io::load_prompts)
}

fn pipeline_config(args: &PipelineArgs) -> Result<PipelineConfig> {
    match (&args.preset, &args.config) {
        (_, Some(path)) => io::load_config(path),
        (Some(name), None) => Ok(kgrag_core::preset(name)?),
        (None, None) => Ok(Preset::Optimized.config()),
    }
}

struct Loaded {
    ws: Workspace,
    cfg: PipelineConfig,
    backends: BackendSet,
    prompts: PromptSet,
}

fn load_pipeline(args: &PipelineArgs) -> Result<Loaded> {
    let cfg = pipeline_config(args)?;
    let backends = BackendSet::connect(&cfg.backends)?;
    let ws = Workspace::load(&args.store)?;
    ws.check_embedder(backends.embedder.as_ref())?;
    Ok(Loaded { ws, cfg, backends, prompts: prompts(args.prompts.as_deref())? })
}

/// Runs one query and returns the same shape the HTTP service answers with.
fn query_once(l: &Loaded, question: &str, trace_dir: Option<&Path>) -> Result<QueryResponse> {
    let engine =
        Engine { indices: l.ws.indices(), backends: l.backends.as_core(), prompts: &l.prompts, clock: &FrozenClock };
    let result = engine.answer(question, &l.cfg);
    let trace = match &result {
        Ok(a) => &a.trace,
        Err(f) => &f.trace,
    };
    let trace_id = match trace_dir {
        Some(dir) => runner::persist_trace(dir, trace)?,
        None => runner::trace_id(trace),
    };
    match result {
        Ok(a) => Ok(QueryResponse { contexts: a.trace.context_ids(), answer: a.answer, trace_id }),
        Err(f) => Err(f.error.into()),
    }
}

fn ingest(args: &IngestArgs, out: &mut dyn Write) -> Result<()> {
    let splitter =
        SplitterConfig { max_chars: args.max_chars, overlap_chars: args.overlap, ..SplitterConfig::default() };
    splitter.validate()?;
    let docs = io::load_corpus(&args.corpus)?;
    let summary = store::ingest_into_dir(&args.store, &docs, splitter)?;
    let _ = writeln!(out, "ingested {} documents into {} chunks", summary.documents, summary.chunks);
    Ok(())
}

fn build(args: &BuildArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = match &args.config {
        Some(path) => io::load_config(path)?,
        None => PipelineConfig::default(),
    };
    let prompts = prompts(args.prompts.as_deref())?;
    let embedder = connect_embedder(&cfg.backends.embed)?;
    let chunk_store = store::load_chunk_store(&args.store)?;
    let intents = match &args.intents {
        Some(path) => io::load_intents(path)?,
        None => Vec::new(),
    };
    let gazetteer;
    let chat;
    let extractor = match args.extractor {
        ExtractorKind::Gazetteer => {
            let path = args.gazetteer.as_deref().ok_or_else(|| Error::Usage("--gazetteer is required".into()))?;
            gazetteer = io::load_gazetteer(path)?;
            Extractor::Gazetteer(&gazetteer)
        }
        ExtractorKind::Llm => {
            chat = connect_chat(&cfg.backends.chat)?;
            Extractor::Llm { chat: chat.as_ref(), system: &prompts.extract_system, template: &prompts.extract_user }
        }
    };
    let opts = BuildOptions { extractor, intents, bm25: Bm25Params::default(), threads: threads(args.threads) };
    let ws = Workspace::build(chunk_store, embedder.as_ref(), &opts)?;
    ws.save(&args.store)?;
    let c = ws.counts();
    let stats = ws.graph_manifest.stats;
    let _ = writeln!(
        out,
        "built {} chunks, {} entities, {} relations ({} records, {} skipped lines, {} skipped records), {} intent examples",
        c.chunks,
        c.entities,
        c.relations,
        stats.records,
        stats.skipped_lines,
        stats.skipped_records,
        ws.intents.examples.len()
    );
    Ok(())
}

fn query(args: &QueryArgs, out: &mut dyn Write) -> Result<()> {
    let loaded = load_pipeline(&args.pipeline)?;
    let resp = query_once(&loaded, &args.question, args.pipeline.trace_dir.as_deref())?;
    if args.json {
        let _ = writeln!(out, "{}", serde_json::to_string(&resp).expect("responses serialize"));
    } else {
        let _ = writeln!(out, "{}", resp.answer);
    }
    Ok(())
}

fn chat(args: &PipelineArgs, input: &mut dyn BufRead, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let loaded = load_pipeline(args)?;
    let _ = writeln!(err, "Ask a question per line; `:q`, an empty line or end of input quits.");
    let mut line = String::new();
    loop {
        let _ = write!(err, "> ");
        let _ = err.flush();
        line.clear();
        if input.read_line(&mut line).map_err(|e| Error::io(Path::new("<stdin>"), e))? == 0 {
            break;
        }
        let question = line.trim();
        if question.is_empty() || question == ":q" {
            break;
        }
        match query_once(&loaded, question, args.trace_dir.as_deref()) {
            Ok(resp) => {
                let _ = writeln!(out, "{}", resp.answer);
            }
            Err(e) => {
                let _ = writeln!(err, "error: {e}");
            }
        }
    }
    Ok(())
}

fn eval(args: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let dataset = io::load_dataset(&args.dataset)?;
    let ws = Workspace::load(&args.store)?;
    io::check_gold_ids(&args.dataset, &dataset, |id| ws.store.contains(id))?;
    let prompts = prompts(args.prompts.as_deref())?;

    let mut named: Vec<(String, PipelineConfig)> = Vec::new();
    for spec in &args.configs {
        named.push((spec.clone(), parse_config_spec(spec)?));
    }
    for item in &args.config_files {
        let (name, path) = item
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--config-file expects NAME=PATH, got {item:?}")))?;
        named.push((name.to_string(), io::load_config(Path::new(path))?));
    }
    if named.is_empty() {
        named = Preset::ALL.iter().map(|p| (p.name().to_string(), p.config())).collect();
    }
    let configs = named
        .into_iter()
        .map(|(name, config)| Ok(EvalConfig { backends: BackendSet::connect(&config.backends)?, name, config }))
        .collect::<Result<Vec<_>>>()?;
    let opts =
        EvalOptions { recall_k: args.recall_k, threads: threads(args.threads), trace_dir: args.trace_dir.clone() };
    let run = runner::run_eval(&ws, &prompts, &dataset, &configs, &opts)?;
    runner::write_report(&args.out, &run.report)?;
    let _ = write!(out, "{}", run.report.render_table());
    Ok(())
}

fn serve(args: &ServeArgs, err: &mut dyn Write) -> Result<()> {
    let cfg = pipeline_config(&args.pipeline)?;
    let backends = BackendSet::connect(&cfg.backends)?;
    let service_cfg = ServiceConfig {
        bind: args.bind,
        default_config: cfg,
        max_concurrent: args.max_concurrent,
        timeout_ms: args.timeout_ms,
        trace_dir: args.pipeline.trace_dir.clone(),
    };
    service_cfg.validate()?;
    let state = AppState::new(service_cfg, backends, prompts(args.pipeline.prompts.as_deref())?);
    let store_dir = args.pipeline.store.clone();
    let _ = writeln!(err, "listening on http://{}", args.bind);
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Error::Internal(format!("cannot start runtime: {e}")))?;
    runtime.block_on(service::serve(state, move || Workspace::load(&store_dir)))
}

/// Entry point: returns the process exit code (0 ok, 1 user error,
/// 2 internal error).
pub fn run<I, T>(args: I, input: &mut dyn BufRead, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    0
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    1
                }
            };
        }
    };
    let result = match &cli.command {
        Command::Ingest(a) => ingest(a, out),
        Command::Build(a) => build(a, out),
        Command::Query(a) => query(a, out),
        Command::Chat(a) => chat(a, input, out, err),
        Command::Eval(a) => eval(a, out),
        Command::Serve(a) => serve(a, err),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_user_error() {
                1
            } else {
                2
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_specs_toggle_stages() {
        let cfg = parse_config_spec("optimized:-intent").unwrap();
        assert!(!cfg.stages.intent && cfg.stages.fusion);
        let cfg = parse_config_spec("baseline-graph:+keywords:+rerank").unwrap();
        assert!(cfg.stages.keywords && cfg.stages.rerank && !cfg.stages.rewrite);
        assert!(matches!(parse_config_spec("nope"), Err(Error::Config(_))));
        assert!(matches!(parse_config_spec("optimized:intent"), Err(Error::Usage(_))));
        assert!(matches!(parse_config_spec("optimized:-bogus"), Err(Error::Usage(_))));
        // Keywords need graph retrieval.
        assert!(matches!(parse_config_spec("baseline-dense:+keywords"), Err(Error::Config(_))));
    }
}
