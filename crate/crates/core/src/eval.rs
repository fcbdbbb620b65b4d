//! Evaluation metrics and ablation aggregation.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backend::Embedder;
use crate::error::BackendError;
use crate::pipeline::{Engine, PipelineConfig, QueryTrace};
use crate::retrieval::{cosine, RankedList};
use crate::text::LanguageTag;

pub const DEFAULT_RECALL_K: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub question: String,
    pub gold_chunk_ids: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lang: Option<LanguageTag>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub fractional: f64,
    pub full: u8,
}

/// `|top-k ∩ gold| / |gold|`, plus whether every gold id was found.
pub fn recall_at_k(retrieved: &RankedList, gold: &BTreeSet<String>, k: usize) -> Recall {
    if gold.is_empty() {
        return Recall { fractional: 0.0, full: 0 };
    }
    let top: BTreeSet<&str> = retrieved.ids().take(k.max(1)).collect();
    let hits = gold.iter().filter(|g| top.contains(g.as_str())).count();
    let fractional = hits as f64 / gold.len() as f64;
    Recall { fractional, full: u8::from(hits == gold.len()) }
}

/// Embedding cosine between answer and reference, clamped to `[0, 1]`.
/// An empty side scores 0.
pub fn answer_similarity(answer: &str, reference: &str, embedder: &dyn Embedder) -> Result<f64, BackendError> {
    if answer.trim().is_empty() || reference.trim().is_empty() {
        return Ok(0.0);
    }
    let resp = embedder.embed(&[answer.to_string(), reference.to_string()])?;
    match &resp.vectors[..] {
        [a, b] => Ok(cosine(a, b).clamp(0.0, 1.0)),
        _ => Err(BackendError::Malformed("expected two vectors".into())),
    }
}

pub const BUCKET_LABELS: [&str; 5] = ["0%-20%", "20%-40%", "40%-60%", "60%-80%", "80%-100%"];

pub fn bucket_index(score: f64) -> usize {
    if score < 0.2 {
        0
    } else if score < 0.4 {
        1
    } else if score < 0.6 {
        2
    } else if score < 0.8 {
        3
    } else {
        4
    }
}

fn round1(x: f64) -> f64 {
    libm::round(x * 10.0) / 10.0
}

/// Percentage of scores per closed-left bucket, one decimal. Empty input
/// yields all zeros.
pub fn bucketize(scores: &[f64]) -> [f64; 5] {
    let mut counts = [0usize; 5];
    for &s in scores {
        counts[bucket_index(s)] += 1;
    }
    if scores.is_empty() {
        return [0.0; 5];
    }
    counts.map(|c| round1(100.0 * c as f64 / scores.len() as f64))
}

/// Metrics for one (record, config) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub record_index: usize,
    pub similarity: Option<f64>,
    pub recall: Recall,
    pub sub_queries: usize,
    pub contexts: usize,
    pub failed: bool,
}

impl QueryOutcome {
    /// Recomputes metrics from a trace; `answer` is the final answer text.
    pub fn from_trace(
        record_index: usize,
        record: &EvalRecord,
        trace: &QueryTrace,
        embedder: &dyn Embedder,
        recall_k: usize,
    ) -> Self {
        let failed = trace.error.is_some();
        let similarity = record.reference_answer.as_deref().map(|reference| {
            if failed {
                0.0
            } else {
                answer_similarity(&trace.answer, reference, embedder).unwrap_or(0.0)
            }
        });
        let recall = if failed {
            Recall { fractional: 0.0, full: 0 }
        } else {
            recall_at_k(&trace.fused, &record.gold_chunk_ids, recall_k)
        };
        QueryOutcome {
            record_index,
            similarity,
            recall,
            sub_queries: trace.plan.sub_queries.len(),
            contexts: trace.fused.len(),
            failed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub queries: usize,
    pub failures: usize,
    /// Mean answer similarity over records with a reference answer.
    pub mean_similarity: Option<f64>,
    pub similarity_buckets: [f64; 5],
    /// Share of scored answers in the top bucket, percent.
    pub top_bucket_share: Option<f64>,
    pub full_recall_rate: f64,
    pub mean_fractional_recall: f64,
    pub mean_sub_queries: f64,
    pub mean_contexts: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub recall_k: usize,
    pub rows: Vec<AblationRow>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Aggregates outcomes for one config. Outcomes are sorted by record index
/// first, so the result does not depend on completion order.
pub fn aggregate(config: &str, outcomes: &[QueryOutcome]) -> AblationRow {
    let mut sorted: Vec<&QueryOutcome> = outcomes.iter().collect();
    sorted.sort_by_key(|o| o.record_index);
    let sims: Vec<f64> = sorted.iter().filter_map(|o| o.similarity).collect();
    let buckets = bucketize(&sims);
    AblationRow {
        config: config.to_string(),
        queries: sorted.len(),
        failures: sorted.iter().filter(|o| o.failed).count(),
        mean_similarity: (!sims.is_empty()).then(|| mean(sims.iter().copied())),
        similarity_buckets: buckets,
        top_bucket_share: (!sims.is_empty()).then_some(buckets[4]),
        full_recall_rate: mean(sorted.iter().map(|o| f64::from(o.recall.full))),
        mean_fractional_recall: mean(sorted.iter().map(|o| o.recall.fractional)),
        mean_sub_queries: mean(sorted.iter().map(|o| o.sub_queries as f64)),
        mean_contexts: mean(sorted.iter().map(|o| o.contexts as f64)),
    }
}

impl AblationReport {
    /// Rows ordered by config name.
    pub fn new(recall_k: usize, mut rows: Vec<AblationRow>) -> Self {
        rows.sort_by(|a, b| a.config.cmp(&b.config));
        AblationReport { recall_k, rows }
    }

    pub fn row(&self, config: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.config == config)
    }

    /// Aligned text table: one metric per row, one config per column.
    pub fn render_table(&self) -> String {
        let pct = |x: f64| format!("{:.1}%", x * 100.0);
        let opt_pct = |x: Option<f64>| x.map_or_else(|| "n/a".to_string(), pct);
        let mut lines: Vec<(String, Vec<String>)> = Vec::new();
        let col = |f: &dyn Fn(&AblationRow) -> String| self.rows.iter().map(f).collect::<Vec<_>>();
        lines.push(("% score".into(), col(&|r| r.config.clone())));
        lines.push(("Answer accuracy (mean similarity)".into(), col(&|r| opt_pct(r.mean_similarity))));
        lines.push((
            "Answer accuracy (80%-100% share)".into(),
            col(&|r| r.top_bucket_share.map_or_else(|| "n/a".into(), |x| format!("{x:.1}%"))),
        ));
        for b in (0..5).rev() {
            lines.push((
                format!("Answer {}", BUCKET_LABELS[b]),
                col(&|r| {
                    if r.mean_similarity.is_some() {
                        format!("{:.1}%", r.similarity_buckets[b])
                    } else {
                        "n/a".into()
                    }
                }),
            ));
        }
        lines.push((format!("Recall@{} (full)", self.recall_k), col(&|r| pct(r.full_recall_rate))));
        lines.push((format!("Recall@{} (fractional)", self.recall_k), col(&|r| pct(r.mean_fractional_recall))));
        lines.push(("Mean sub-queries".into(), col(&|r| format!("{:.2}", r.mean_sub_queries))));
        lines.push(("Mean retrieved contexts".into(), col(&|r| format!("{:.2}", r.mean_contexts))));
        lines.push(("Queries / failures".into(), col(&|r| format!("{}/{}", r.queries, r.failures))));

        let label_w = lines.iter().map(|(l, _)| l.chars().count()).max().unwrap_or(0);
        let widths: Vec<usize> = (0..self.rows.len())
            .map(|i| lines.iter().map(|(_, cells)| cells[i].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (label, cells) in &lines {
            let _ = write!(out, "{label:<label_w$}");
            for (cell, w) in cells.iter().zip(&widths) {
                let _ = write!(out, "  {cell:>w$}");
            }
            out.push('\n');
        }
        out
    }
}

/// Runs every record through one config and returns outcomes plus traces.
pub fn evaluate_config(
    engine: &Engine<'_>,
    dataset: &[EvalRecord],
    cfg: &PipelineConfig,
    recall_k: usize,
) -> Vec<(QueryOutcome, QueryTrace)> {
    dataset
        .iter()
        .enumerate()
        .map(|(i, record)| {
            let trace = match engine.answer(&record.question, cfg) {
                Ok(a) => a.trace,
                Err(f) => f.trace,
            };
            (QueryOutcome::from_trace(i, record, &trace, engine.backends.embedder, recall_k), trace)
        })
        .collect()
}

/// Sequential ablation over named configs.
pub fn run_ablation(
    engine: &Engine<'_>,
    dataset: &[EvalRecord],
    configs: &[(String, PipelineConfig)],
    recall_k: usize,
) -> AblationReport {
    let rows = configs
        .iter()
        .map(|(name, cfg)| {
            let outcomes: Vec<QueryOutcome> =
                evaluate_config(engine, dataset, cfg, recall_k).into_iter().map(|(o, _)| o).collect();
            aggregate(name, &outcomes)
        })
        .collect();
    AblationReport::new(recall_k, rows)
}
