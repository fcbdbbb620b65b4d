//! End-to-end query answering with per-stage toggles and a full trace.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backend::{BackendConfig, ChatBackend, ChatRequest, Embedder, Message, Purpose};
use crate::corpus::ChunkStore;
use crate::error::{ConfigError, PipelineError};
use crate::kg::KnowledgeGraph;
use crate::prompts::PromptSet;
use crate::retrieval::{
    bm25_topk, dense_topk, graph_retrieve, rrf_fuse, DenseIndex, GraphParams, RankedList, SparseIndex,
};
use crate::stages::{
    augment_keywords, backend_attempts, classify_intent, generate_subqueries, render_context, rerank, rewrite_query,
    truncate_without_rerank, ContextSources, Cutoffs, IntentStore, QueryPlan, RerankOutput,
};
use crate::text::tokenize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageToggles {
    pub rewrite: bool,
    pub keywords: bool,
    pub fusion: bool,
    pub rerank: bool,
    pub intent: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        StageToggles { rewrite: true, keywords: false, fusion: true, rerank: true, intent: true }
    }
}

impl StageToggles {
    pub const OFF: StageToggles =
        StageToggles { rewrite: false, keywords: false, fusion: false, rerank: false, intent: false };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalMode {
    Dense,
    Hybrid,
    Graph,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub mode: RetrievalMode,
    pub depth_per_query: usize,
    pub fusion_k_rrf: usize,
    pub graph: GraphParams,
    /// Entity names added by keyword augmentation.
    pub keyword_m: usize,
    pub keyword_tau: f64,
    /// Dense hits must score strictly above this to count as context.
    pub min_dense_score: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            mode: RetrievalMode::Graph,
            depth_per_query: 20,
            fusion_k_rrf: 60,
            graph: GraphParams::default(),
            keyword_m: 5,
            keyword_tau: 0.35,
            min_dense_score: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendPair {
    pub chat: BackendConfig,
    pub embed: BackendConfig,
}

pub const DEFAULT_CANNOT_ANSWER: &str =
    "I'm sorry, I could not find information about that in our knowledge base. Please contact customer service for further help.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub stages: StageToggles,
    pub retrieval: RetrievalConfig,
    pub cutoffs: Cutoffs,
    pub subquery_n_max: usize,
    pub cannot_answer: String,
    pub backends: BackendPair,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            stages: StageToggles::default(),
            retrieval: RetrievalConfig::default(),
            cutoffs: Cutoffs::default(),
            subquery_n_max: 4,
            cannot_answer: DEFAULT_CANNOT_ANSWER.to_string(),
            backends: BackendPair::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.stages.keywords && self.retrieval.mode != RetrievalMode::Graph {
            return invalid("keyword augmentation requires retrieval mode graph");
        }
        let c = self.cutoffs;
        if c.docs == 0 || c.entities == 0 || c.relations == 0 {
            return invalid("rerank cutoffs must be at least 1");
        }
        if self.retrieval.depth_per_query == 0 || self.retrieval.fusion_k_rrf == 0 || self.retrieval.graph.m_ent == 0 {
            return invalid("retrieval depth, k_rrf and m_ent must be at least 1");
        }
        if self.subquery_n_max == 0 {
            return invalid("subquery_n_max must be at least 1");
        }
        if self.cannot_answer.trim().is_empty() {
            return invalid("cannot_answer message must be non-empty");
        }
        for b in [&self.backends.chat, &self.backends.embed] {
            b.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "baseline-dense")]
    BaselineDense,
    #[serde(rename = "baseline-hybrid")]
    BaselineHybrid,
    #[serde(rename = "baseline-graph")]
    BaselineGraph,
    #[serde(rename = "optimized")]
    Optimized,
}

pub const PRESET_NAMES: &str = "baseline-dense, baseline-hybrid, baseline-graph, optimized";

impl Preset {
    pub const ALL: [Preset; 4] =
        [Preset::BaselineDense, Preset::BaselineHybrid, Preset::BaselineGraph, Preset::Optimized];

    pub fn name(self) -> &'static str {
        match self {
            Preset::BaselineDense => "baseline-dense",
            Preset::BaselineHybrid => "baseline-hybrid",
            Preset::BaselineGraph => "baseline-graph",
            Preset::Optimized => "optimized",
        }
    }

    pub fn config(self) -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        let (stages, mode) = match self {
            Preset::BaselineDense => (StageToggles::OFF, RetrievalMode::Dense),
            Preset::BaselineHybrid => (StageToggles::OFF, RetrievalMode::Hybrid),
            Preset::BaselineGraph => (StageToggles::OFF, RetrievalMode::Graph),
            Preset::Optimized => (
                StageToggles { rewrite: true, keywords: false, fusion: true, rerank: true, intent: true },
                RetrievalMode::Graph,
            ),
        };
        cfg.stages = stages;
        cfg.retrieval.mode = mode;
        cfg
    }
}

impl FromStr for Preset {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| ConfigError::UnknownPreset { name: s.to_string(), valid: PRESET_NAMES })
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn preset(name: &str) -> Result<PipelineConfig, ConfigError> {
    Ok(name.parse::<Preset>()?.config())
}

/// Source of stage timestamps.
pub trait Clock: Sync {
    fn now_micros(&self) -> u64;
}

/// Always reads zero, so traces are reproducible byte-for-byte.
#[derive(Debug, Clone, Copy, Default)]
pub struct FrozenClock;

impl Clock for FrozenClock {
    fn now_micros(&self) -> u64 {
        0
    }
}

/// Immutable stores a query runs against.
#[derive(Clone, Copy)]
pub struct Indices<'a> {
    pub store: &'a ChunkStore,
    pub dense: &'a DenseIndex,
    pub sparse: &'a SparseIndex,
    pub graph: &'a KnowledgeGraph,
    pub intents: &'a IntentStore,
}

#[derive(Clone, Copy)]
pub struct Backends<'a> {
    pub chat: &'a dyn ChatBackend,
    pub embedder: &'a dyn Embedder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubQueryRetrieval {
    pub query: String,
    /// Text actually embedded and searched (sub-query plus augmentation keywords).
    pub search_text: String,
    pub chunks: RankedList,
    pub entities: RankedList,
    pub relations: RankedList,
    /// Graph mode found no seed entity and used dense retrieval instead.
    pub graph_fallback: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceFlags {
    pub rewrite_fallback: bool,
    pub subquery_fallback: bool,
    pub graph_fallback: bool,
    pub no_context: bool,
    pub generation_failed: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceCounters {
    pub chat_calls: u32,
    pub embed_calls: u32,
    pub retries: u32,
    pub dropped_items: usize,
    pub skipped_records: usize,
    pub empty_embeddings: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub micros: u64,
}

/// Complete record of one `answer` call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryTrace {
    pub query: String,
    pub plan: QueryPlan,
    pub rewrite_fallback_reason: Option<String>,
    pub retrievals: Vec<SubQueryRetrieval>,
    pub fused: RankedList,
    pub fused_entities: RankedList,
    pub fused_relations: RankedList,
    pub context: Option<RerankOutput>,
    pub prompt: String,
    pub answer: String,
    pub flags: TraceFlags,
    pub counters: TraceCounters,
    pub timings: Vec<StageTiming>,
    pub error: Option<String>,
}

impl QueryTrace {
    fn new(query: &str) -> Self {
        QueryTrace {
            query: query.to_string(),
            plan: QueryPlan::new(query),
            rewrite_fallback_reason: None,
            retrievals: Vec::new(),
            fused: RankedList::empty(0),
            fused_entities: RankedList::empty(0),
            fused_relations: RankedList::empty(0),
            context: None,
            prompt: String::new(),
            answer: String::new(),
            flags: TraceFlags::default(),
            counters: TraceCounters::default(),
            timings: Vec::new(),
            error: None,
        }
    }

    /// Chunk ids handed to the generator, in assembly order.
    pub fn context_ids(&self) -> Vec<String> {
        self.context
            .as_ref()
            .map(|c| c.bundle.documents.iter().map(|d| d.chunk_id.clone()).collect())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Answer {
    pub answer: String,
    pub trace: QueryTrace,
}

/// Error with the trace recorded up to the failure.
#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub error: PipelineError,
    pub trace: QueryTrace,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.error.fmt(f)
    }
}

struct Timer<'c> {
    clock: &'c dyn Clock,
    last: u64,
}

impl Timer<'_> {
    fn lap(&mut self, trace: &mut QueryTrace, stage: &str) {
        let now = self.clock.now_micros();
        trace.timings.push(StageTiming { stage: stage.to_string(), micros: now.saturating_sub(self.last) });
        self.last = now;
    }
}

/// Everything `answer` needs besides the query and config.
#[derive(Clone, Copy)]
pub struct Engine<'a> {
    pub indices: Indices<'a>,
    pub backends: Backends<'a>,
    pub prompts: &'a PromptSet,
    pub clock: &'a dyn Clock,
}

impl Engine<'_> {
    /// Runs the configured pipeline: intent → rewrite → keywords →
    /// sub-queries → per-sub-query retrieval → fusion → rerank/assemble →
    /// render → generate.
    #[allow(clippy::result_large_err)]
    pub fn answer(&self, query: &str, cfg: &PipelineConfig) -> Result<Answer, Failure> {
        let mut trace = QueryTrace::new(query);
        match self.run(query, cfg, &mut trace) {
            Ok(answer) => {
                trace.answer = answer.clone();
                Ok(Answer { answer, trace })
            }
            Err(error) => {
                trace.error = Some(error.to_string());
                Err(Failure { error, trace })
            }
        }
    }

    fn embed(&self, texts: &[String], trace: &mut QueryTrace) -> Result<Vec<Vec<f32>>, PipelineError> {
        let resp = self.backends.embedder.embed(texts).map_err(|e| {
            trace.counters.embed_calls += 1;
            trace.counters.retries += backend_attempts(&e).saturating_sub(1);
            PipelineError::Embedding(e)
        })?;
        trace.counters.embed_calls += 1;
        trace.counters.retries += resp.attempts.saturating_sub(1);
        trace.counters.empty_embeddings += resp.empty_inputs;
        if resp.vectors.len() != texts.len() {
            return Err(PipelineError::Embedding(crate::error::BackendError::Malformed(
                "vector count differs from input count".into(),
            )));
        }
        Ok(resp.vectors)
    }

    fn run(&self, query: &str, cfg: &PipelineConfig, trace: &mut QueryTrace) -> Result<String, PipelineError> {
        cfg.validate()?;
        if query.trim().is_empty() {
            return Err(PipelineError::EmptyQuery);
        }
        let idx = self.indices;
        let mut timer = Timer { clock: self.clock, last: self.clock.now_micros() };
        let mut plan = QueryPlan::new(query);

        let original_vec = self.embed(&[query.to_string()], trace)?.remove(0);
        if cfg.stages.intent && !idx.intents.is_empty() {
            plan.intents = classify_intent(&original_vec, idx.intents);
        }
        timer.lap(trace, "intent");

        if cfg.stages.rewrite {
            let out = rewrite_query(query, self.backends.chat, self.prompts);
            trace.counters.chat_calls += 1;
            trace.counters.retries += out.attempts.saturating_sub(1);
            trace.flags.rewrite_fallback = out.fallback;
            trace.rewrite_fallback_reason = out.fallback_reason;
            plan.rewritten = out.text;
        }
        let query_vec = if plan.rewritten == query {
            original_vec
        } else {
            self.embed(&[plan.rewritten.clone()], trace)?.remove(0)
        };
        timer.lap(trace, "rewrite");

        if cfg.stages.keywords {
            plan.keywords = augment_keywords(
                &plan.rewritten,
                &query_vec,
                idx.graph,
                cfg.retrieval.keyword_m,
                cfg.retrieval.keyword_tau,
            );
        }
        timer.lap(trace, "keywords");

        if cfg.stages.fusion {
            let out = generate_subqueries(&plan, self.backends.chat, self.prompts, cfg.subquery_n_max);
            trace.counters.chat_calls += out.prompts_sent as u32;
            trace.counters.retries += out.attempts.saturating_sub(out.prompts_sent as u32);
            trace.flags.subquery_fallback = out.fallback;
            plan.sub_queries = out.sub_queries;
        } else {
            plan.sub_queries = vec![plan.rewritten.clone()];
        }
        trace.plan = plan.clone();
        timer.lap(trace, "subqueries");

        self.retrieve_all(&plan, &query_vec, cfg, trace)?;
        timer.lap(trace, "retrieval");

        let depth = cfg.retrieval.depth_per_query;
        let k_rrf = cfg.retrieval.fusion_k_rrf;
        let chunk_lists: Vec<RankedList> = trace.retrievals.iter().map(|r| r.chunks.clone()).collect();
        let total: usize = chunk_lists.iter().map(RankedList::len).sum();
        trace.fused = rrf_fuse(&chunk_lists, k_rrf, total.max(depth));
        let entity_lists: Vec<RankedList> = trace.retrievals.iter().map(|r| r.entities.clone()).collect();
        let total: usize = entity_lists.iter().map(RankedList::len).sum();
        trace.fused_entities = rrf_fuse(&entity_lists, k_rrf, total.max(1));
        let relation_lists: Vec<RankedList> = trace.retrievals.iter().map(|r| r.relations.clone()).collect();
        let total: usize = relation_lists.iter().map(RankedList::len).sum();
        trace.fused_relations = rrf_fuse(&relation_lists, k_rrf, total.max(1));
        timer.lap(trace, "fusion");

        let sources = ContextSources { store: idx.store, chunk_vectors: idx.dense, graph: idx.graph };
        let context = if cfg.stages.rerank {
            rerank(&query_vec, &trace.fused, &trace.fused_entities, &trace.fused_relations, sources, cfg.cutoffs)
        } else {
            truncate_without_rerank(&trace.fused, &trace.fused_entities, &trace.fused_relations, sources, cfg.cutoffs)
        };
        trace.counters.dropped_items += context.dropped;
        let no_context = context.bundle.documents.is_empty()
            && context.bundle.entities.is_empty()
            && context.bundle.relations.is_empty();
        let rendered = render_context(&context.bundle, &plan);
        trace.context = Some(context);
        timer.lap(trace, "rerank");

        if no_context {
            trace.flags.no_context = true;
            return Ok(cfg.cannot_answer.clone());
        }

        let req = ChatRequest::new(
            Purpose::Generate,
            vec![Message::system(self.prompts.generate_system.clone()), Message::user(rendered)],
        );
        trace.prompt = req.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n\n");
        trace.counters.chat_calls += 1;
        let resp = self.backends.chat.chat(&req);
        timer.lap(trace, "generate");
        match resp {
            Ok(resp) => {
                trace.counters.retries += resp.usage.attempts.saturating_sub(1);
                Ok(resp.content.trim().to_string())
            }
            Err(e) => {
                trace.counters.retries += backend_attempts(&e).saturating_sub(1);
                trace.flags.generation_failed = true;
                Err(PipelineError::Generation(e))
            }
        }
    }

    fn retrieve_all(
        &self,
        plan: &QueryPlan,
        query_vec: &[f32],
        cfg: &PipelineConfig,
        trace: &mut QueryTrace,
    ) -> Result<(), PipelineError> {
        let idx = self.indices;
        let depth = cfg.retrieval.depth_per_query;
        let search_texts: Vec<String> =
            plan.sub_queries
                .iter()
                .map(|q| {
                    if plan.keywords.is_empty() {
                        q.clone()
                    } else {
                        alloc::format!("{q} {}", plan.keywords.join(" "))
                    }
                })
                .collect();
        let vectors = if search_texts.len() == 1 && search_texts[0] == plan.rewritten {
            vec![query_vec.to_vec()]
        } else {
            self.embed(&search_texts, trace)?
        };

        for ((query, text), vec) in plan.sub_queries.iter().zip(&search_texts).zip(&vectors) {
            let dense = || -> Result<RankedList, PipelineError> {
                if idx.dense.is_empty() {
                    return Ok(RankedList::empty(depth));
                }
                let mut list = dense_topk(vec, idx.dense, depth)?;
                list.items.retain(|s| s.score > cfg.retrieval.min_dense_score);
                Ok(list)
            };
            let mut retrieval = SubQueryRetrieval {
                query: query.clone(),
                search_text: text.clone(),
                chunks: RankedList::empty(depth),
                entities: RankedList::empty(cfg.retrieval.graph.m_ent),
                relations: RankedList::empty(depth),
                graph_fallback: false,
            };
            match cfg.retrieval.mode {
                RetrievalMode::Dense => retrieval.chunks = dense()?,
                RetrievalMode::Hybrid => {
                    let sparse = bm25_topk(&tokenize(text), idx.sparse, depth)?;
                    retrieval.chunks = rrf_fuse(&[dense()?, sparse], cfg.retrieval.fusion_k_rrf, depth);
                }
                RetrievalMode::Graph => {
                    let mut keywords = vec![text.clone()];
                    keywords.extend(plan.keywords.iter().cloned());
                    let hits = if idx.graph.is_empty() || idx.dense.is_empty() {
                        None
                    } else {
                        Some(graph_retrieve(&keywords, vec, idx.graph, idx.dense, depth, cfg.retrieval.graph)?)
                    };
                    match hits {
                        Some(hits) if !hits.is_miss() => {
                            trace.counters.dropped_items += hits.dropped_chunks;
                            retrieval.chunks = hits.chunks;
                            retrieval.entities = hits.entities;
                            retrieval.relations = hits.relations;
                        }
                        _ => {
                            retrieval.graph_fallback = true;
                            trace.flags.graph_fallback = true;
                            retrieval.chunks = dense()?;
                        }
                    }
                }
            }
            trace.retrievals.push(retrieval);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_definitions() {
        let opt = preset("optimized").unwrap();
        assert!(!opt.stages.keywords);
        assert!(opt.stages.rewrite && opt.stages.fusion && opt.stages.rerank && opt.stages.intent);
        assert_eq!(opt.retrieval.mode, RetrievalMode::Graph);
        assert_eq!(opt.cutoffs, Cutoffs { docs: 10, entities: 15, relations: 15 });

        assert_eq!(preset("baseline-dense").unwrap().stages, StageToggles::OFF);
        assert_eq!(preset("baseline-hybrid").unwrap().retrieval.mode, RetrievalMode::Hybrid);
        assert_eq!(preset("baseline-graph").unwrap().retrieval.mode, RetrievalMode::Graph);
        for p in Preset::ALL {
            p.config().validate().unwrap();
        }
    }

    #[test]
    fn unknown_preset_lists_valid_names() {
        let err = preset("fancy").unwrap_err();
        assert!(matches!(&err, ConfigError::UnknownPreset { name, .. } if name == "fancy"));
        assert!(err.to_string().contains("baseline-hybrid"));
    }

    #[test]
    fn keywords_require_graph_mode() {
        let mut cfg = preset("baseline-dense").unwrap();
        cfg.stages.keywords = true;
        assert!(cfg.validate().is_err());
        cfg.retrieval.mode = RetrievalMode::Graph;
        assert!(cfg.validate().is_ok());
        cfg.cutoffs.docs = 0;
        assert!(cfg.validate().is_err());
    }
}
