//! Parallel query execution, trace persistence and ablation reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use kgrag_core::backend::{sha256_hex, Embedder};
use kgrag_core::eval::{aggregate, AblationReport, EvalRecord, QueryOutcome};
use kgrag_core::pipeline::{Engine, FrozenClock};
use kgrag_core::{PipelineConfig, PromptSet, QueryTrace};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::BackendSet;
use crate::io;
use crate::store::Workspace;

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const TRACE_INDEX: &str = "traces.jsonl";

/// Canonical trace serialization; the trace id is its SHA-256.
pub fn trace_json(trace: &QueryTrace) -> String {
    serde_json::to_string(trace).expect("traces serialize")
}

pub fn trace_id(trace: &QueryTrace) -> String {
    sha256_hex(trace_json(trace).as_bytes())
}

/// Writes `<dir>/<trace_id>.json` and returns the id.
pub fn persist_trace(dir: &Path, trace: &QueryTrace) -> Result<String> {
    let json = trace_json(trace);
    let id = sha256_hex(json.as_bytes());
    let path = dir.join(format!("{id}.json"));
    if !path.exists() {
        io::write_bytes(&path, json.as_bytes())?;
    }
    Ok(id)
}

/// Reads `<dir>/<id>.json`, checking the file content hashes to `id`.
pub fn load_trace(dir: &Path, id: &str) -> Result<QueryTrace> {
    let path = dir.join(format!("{id}.json"));
    let text = io::read_to_string(&path)?;
    if sha256_hex(text.as_bytes()) != id {
        return Err(Error::format(&path, "content does not match its id"));
    }
    serde_json::from_str(&text).map_err(|e| Error::format(&path, format!("invalid trace: {e}")))
}

/// Runs `f` over `0..n` on up to `threads` workers, returning results in
/// index order whatever the completion order.
pub fn par_map<T: Send>(n: usize, threads: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    thread::scope(|s| {
        for _ in 0..threads.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let out = f(i);
                slots.lock().unwrap()[i] = Some(out);
            });
        }
    });
    slots.into_inner().unwrap().into_iter().map(|t| t.expect("every slot filled")).collect()
}

/// Answers every question, keeping the trace whether or not the query
/// failed. Uses a frozen clock so traces are reproducible.
pub fn answer_all(
    ws: &Workspace,
    backends: &BackendSet,
    prompts: &PromptSet,
    cfg: &PipelineConfig,
    questions: &[String],
    threads: usize,
) -> Vec<QueryTrace> {
    let engine = Engine { indices: ws.indices(), backends: backends.as_core(), prompts, clock: &FrozenClock };
    par_map(questions.len(), threads, |i| match engine.answer(&questions[i], cfg) {
        Ok(a) => a.trace,
        Err(f) => f.trace,
    })
}

pub struct EvalConfig {
    pub name: String,
    pub config: PipelineConfig,
    pub backends: BackendSet,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub recall_k: usize,
    pub threads: usize,
    pub trace_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceIndexLine {
    pub config: String,
    pub record_index: usize,
    pub trace_id: String,
}

#[derive(Debug, Clone)]
pub struct EvalRun {
    pub report: AblationReport,
    /// Per config name, outcomes in record order.
    pub outcomes: BTreeMap<String, Vec<QueryOutcome>>,
    pub traces: Vec<TraceIndexLine>,
}

/// Evaluates every config over the dataset. Config names must be unique.
pub fn run_eval(
    ws: &Workspace,
    prompts: &PromptSet,
    dataset: &[EvalRecord],
    configs: &[EvalConfig],
    opts: &EvalOptions,
) -> Result<EvalRun> {
    if dataset.is_empty() {
        return Err(Error::Usage("dataset is empty".into()));
    }
    if opts.recall_k == 0 {
        return Err(Error::Usage("recall k must be at least 1".into()));
    }
    let mut outcomes = BTreeMap::new();
    let mut traces = Vec::new();
    let questions: Vec<String> = dataset.iter().map(|r| r.question.clone()).collect();
    for c in configs {
        if outcomes.contains_key(&c.name) {
            return Err(Error::Usage(format!("config name {:?} listed twice", c.name)));
        }
        c.config.validate()?;
        ws.check_embedder(c.backends.embedder.as_ref())?;
        let run = answer_all(ws, &c.backends, prompts, &c.config, &questions, opts.threads);
        let mut per_config = Vec::with_capacity(run.len());
        for (i, trace) in run.iter().enumerate() {
            per_config.push(QueryOutcome::from_trace(
                i,
                &dataset[i],
                trace,
                c.backends.embedder.as_ref(),
                opts.recall_k,
            ));
            let id = match &opts.trace_dir {
                Some(dir) => persist_trace(dir, trace)?,
                None => trace_id(trace),
            };
            traces.push(TraceIndexLine { config: c.name.clone(), record_index: i, trace_id: id });
        }
        outcomes.insert(c.name.clone(), per_config);
    }
    traces.sort_by(|a, b| (&a.config, a.record_index).cmp(&(&b.config, b.record_index)));
    if let Some(dir) = &opts.trace_dir {
        io::write_jsonl(&dir.join(TRACE_INDEX), &traces)?;
    }
    let rows = outcomes.iter().map(|(name, o)| aggregate(name, o)).collect();
    Ok(EvalRun { report: AblationReport::new(opts.recall_k, rows), outcomes, traces })
}

/// Rebuilds the report from the trace files listed in `<dir>/traces.jsonl`.
pub fn report_from_traces(
    dir: &Path,
    dataset: &[EvalRecord],
    embedder: &dyn Embedder,
    recall_k: usize,
) -> Result<AblationReport> {
    let index: Vec<TraceIndexLine> = io::read_jsonl(&dir.join(TRACE_INDEX))?;
    let mut outcomes: BTreeMap<String, Vec<QueryOutcome>> = BTreeMap::new();
    for line in &index {
        let record = dataset.get(line.record_index).ok_or_else(|| {
            Error::format(&dir.join(TRACE_INDEX), format!("record index {} outside the dataset", line.record_index))
        })?;
        let trace = load_trace(dir, &line.trace_id)?;
        outcomes.entry(line.config.clone()).or_default().push(QueryOutcome::from_trace(
            line.record_index,
            record,
            &trace,
            embedder,
            recall_k,
        ));
    }
    let rows = outcomes.iter().map(|(name, o)| aggregate(name, o)).collect();
    Ok(AblationReport::new(recall_k, rows))
}

pub fn report_json(report: &AblationReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("reports serialize");
    s.push('\n');
    s
}

pub fn write_report(dir: &Path, report: &AblationReport) -> Result<()> {
    io::write_bytes(&dir.join(REPORT_JSON), report_json(report).as_bytes())?;
    io::write_bytes(&dir.join(REPORT_TEXT), report.render_table().as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_keeps_index_order() {
        let out = par_map(100, 8, |i| {
            if i % 7 == 0 {
                thread::sleep(std::time::Duration::from_millis(2));
            }
            i * 2
        });
        assert_eq!(out, (0..100).map(|i| i * 2).collect::<Vec<_>>());
        assert!(par_map(0, 4, |i| i).is_empty());
    }
}
