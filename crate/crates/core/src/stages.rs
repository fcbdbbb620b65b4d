//! Query-side and post-retrieval stages: intent classification, rewriting,
//! keyword augmentation, sub-query generation, reranking and context
//! rendering. Every LLM-backed stage fails open.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backend::{ChatBackend, ChatRequest, Embedder, Message, Purpose, ResponseSource};
use crate::corpus::ChunkStore;
use crate::error::BackendError;
use crate::kg::KnowledgeGraph;
use crate::prompts::{fill_template, PromptSet};
use crate::retrieval::{cosine, score_entities, DenseIndex, RankedList, Scored};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentExample {
    pub label: String,
    pub question: String,
    pub embedding: Vec<f32>,
}

/// Annotated example questions for KNN intent classification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentStore {
    pub examples: Vec<IntentExample>,
    pub k_neighbors: usize,
}

impl Default for IntentStore {
    fn default() -> Self {
        IntentStore { examples: Vec::new(), k_neighbors: 5 }
    }
}

impl IntentStore {
    /// Embeds `(label, questions)` groups in one batch.
    pub fn build(groups: &[(String, Vec<String>)], embedder: &dyn Embedder) -> Result<Self, BackendError> {
        let texts: Vec<String> = groups.iter().flat_map(|(_, qs)| qs.iter().cloned()).collect();
        if texts.is_empty() {
            return Ok(IntentStore::default());
        }
        let mut vectors = embedder.embed(&texts)?.vectors.into_iter();
        let mut examples = Vec::with_capacity(texts.len());
        for (label, questions) in groups {
            for q in questions {
                let embedding = vectors.next().ok_or_else(|| BackendError::Malformed("too few vectors".into()))?;
                examples.push(IntentExample { label: label.clone(), question: q.clone(), embedding });
            }
        }
        Ok(IntentStore { examples, k_neighbors: 5 })
    }

    pub fn labels(&self) -> BTreeSet<&str> {
        self.examples.iter().map(|e| e.label.as_str()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentScore {
    pub label: String,
    pub score: f64,
}

pub fn classify_intent(query_vec: &[f32], store: &IntentStore) -> Vec<IntentScore> {
    classify_intent_excluding(query_vec, store, None)
}

/// Vote-based KNN. Neighbors are the `k_neighbors` examples with highest
/// cosine (ties by label, then position). Labels rank by vote count, then
/// best neighbor similarity, then label; the top two are returned with their
/// vote fractions. `exclude` removes one example from the neighbor pool.
pub fn classify_intent_excluding(query_vec: &[f32], store: &IntentStore, exclude: Option<usize>) -> Vec<IntentScore> {
    let mut sims: Vec<(f64, &str, usize)> = store
        .examples
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, e)| (cosine(query_vec, &e.embedding), e.label.as_str(), i))
        .collect();
    if sims.is_empty() || store.k_neighbors == 0 {
        return Vec::new();
    }
    sims.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)).then_with(|| a.2.cmp(&b.2)));
    sims.truncate(store.k_neighbors);

    let mut votes: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for &(sim, label, _) in &sims {
        let entry = votes.entry(label).or_insert((0, f64::NEG_INFINITY));
        entry.0 += 1;
        entry.1 = entry.1.max(sim);
    }
    let mut ranked: Vec<(&str, usize, f64)> = votes.into_iter().map(|(l, (v, s))| (l, v, s)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| b.2.total_cmp(&a.2)).then_with(|| a.0.cmp(b.0)));
    let total = sims.len() as f64;
    ranked
        .into_iter()
        .take(2)
        .map(|(label, v, _)| IntentScore { label: label.to_string(), score: v as f64 / total })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct QueryPlan {
    pub original: String,
    pub intents: Vec<IntentScore>,
    pub rewritten: String,
    pub keywords: Vec<String>,
    pub sub_queries: Vec<String>,
}

impl QueryPlan {
    pub fn new(original: impl Into<String>) -> Self {
        let original = original.into();
        QueryPlan { rewritten: original.clone(), sub_queries: vec![original.clone()], original, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteOutcome {
    pub text: String,
    pub fallback: bool,
    pub fallback_reason: Option<String>,
    pub attempts: u32,
}

fn first_line(s: &str) -> &str {
    s.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("")
}

/// Rewrites the query through the chat backend. Errors, echo replies and
/// empty output all return the original query unchanged.
pub fn rewrite_query(query: &str, chat: &dyn ChatBackend, prompts: &PromptSet) -> RewriteOutcome {
    let mut vars = BTreeMap::new();
    vars.insert("query", query);
    let req = ChatRequest::new(
        Purpose::Rewrite,
        vec![
            Message::system(prompts.rewrite_system.clone()),
            Message::user(fill_template(&prompts.rewrite_user, &vars)),
        ],
    );
    let fallback = |reason: String, attempts: u32| RewriteOutcome {
        text: query.to_string(),
        fallback: true,
        fallback_reason: Some(reason),
        attempts,
    };
    match chat.chat(&req) {
        Err(e) => fallback(e.to_string(), backend_attempts(&e)),
        Ok(resp) if resp.source == ResponseSource::Echo => fallback("no rewrite available".into(), resp.usage.attempts),
        Ok(resp) => {
            let line = first_line(&resp.content);
            if line.is_empty() {
                fallback("empty rewrite".into(), resp.usage.attempts)
            } else {
                RewriteOutcome {
                    text: line.to_string(),
                    fallback: false,
                    fallback_reason: None,
                    attempts: resp.usage.attempts,
                }
            }
        }
    }
}

pub(crate) fn backend_attempts(e: &BackendError) -> u32 {
    e.attempts()
}

/// Entity names matched against the rewritten query: exact normalized
/// substring matches score 1.0, others their cosine when at least `tau`.
pub fn augment_keywords(rewritten: &str, query_vec: &[f32], graph: &KnowledgeGraph, m: usize, tau: f64) -> Vec<String> {
    if m == 0 || graph.is_empty() {
        return Vec::new();
    }
    score_entities(&[rewritten.to_string()], query_vec, graph, tau, m)
        .ids()
        .map(|id| graph.entities()[id].name.clone())
        .collect()
}

pub const MAX_SUBQUERY_CHARS: usize = 300;
pub const SUBQUERIES_PER_INTENT: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubQueryOutcome {
    pub sub_queries: Vec<String>,
    /// True when no prompt produced usable sub-queries.
    pub fallback: bool,
    pub prompts_sent: usize,
    pub attempts: u32,
}

fn strip_list_marker(line: &str) -> &str {
    let line = line.trim_start_matches(['-', '*', '•']).trim_start();
    let digits = line.chars().take_while(char::is_ascii_digit).count();
    if digits > 0 {
        if let Some(rest) = line[digits..].strip_prefix(['.', ')']) {
            return rest.trim_start();
        }
    }
    line
}

/// One sub-query per non-blank line, list markers removed, clipped to
/// [`MAX_SUBQUERY_CHARS`].
pub fn parse_subqueries(raw: &str) -> Vec<String> {
    raw.lines()
        .map(|l| strip_list_marker(l.trim()).trim())
        .filter(|l| !l.is_empty())
        .map(|l| l.chars().take(MAX_SUBQUERY_CHARS).collect::<String>().trim_end().to_string())
        .collect()
}

/// RAG-Fusion sub-queries. Without intents one prompt asks for `n_max`;
/// with intents each of the (at most two) intents gets its own prompt asking
/// for two. The rewritten query is always sub-query 0 and duplicates are
/// dropped case-insensitively.
pub fn generate_subqueries(
    plan: &QueryPlan,
    chat: &dyn ChatBackend,
    prompts: &PromptSet,
    n_max: usize,
) -> SubQueryOutcome {
    let n_max = n_max.max(1);
    let mut vars = BTreeMap::new();
    vars.insert("query", plan.rewritten.as_str());
    let user = fill_template(&prompts.subqueries_user, &vars);

    let n_max_text = n_max.to_string();
    let per_intent_text = SUBQUERIES_PER_INTENT.to_string();
    let mut requests: Vec<(String, usize)> = Vec::new();
    if plan.intents.is_empty() {
        let mut vars = BTreeMap::new();
        vars.insert("n", n_max_text.as_str());
        vars.insert("query", plan.rewritten.as_str());
        requests.push((fill_template(&prompts.subqueries_system, &vars), n_max));
    } else {
        for intent in plan.intents.iter().take(2) {
            let mut vars = BTreeMap::new();
            vars.insert("n", per_intent_text.as_str());
            vars.insert("intents", intent.label.as_str());
            vars.insert("query", plan.rewritten.as_str());
            requests.push((fill_template(&prompts.subqueries_intent_system, &vars), SUBQUERIES_PER_INTENT));
        }
    }

    let mut out = vec![plan.rewritten.clone()];
    let mut seen: BTreeSet<String> = BTreeSet::from([plan.rewritten.to_lowercase()]);
    let mut attempts = 0;
    let mut produced = false;
    for (system, cap) in &requests {
        let req =
            ChatRequest::new(Purpose::SubQueries, vec![Message::system(system.clone()), Message::user(user.clone())]);
        let resp = match chat.chat(&req) {
            Ok(resp) => resp,
            Err(e) => {
                attempts += backend_attempts(&e);
                continue;
            }
        };
        attempts += resp.usage.attempts;
        if resp.source == ResponseSource::Echo {
            continue;
        }
        for q in parse_subqueries(&resp.content).into_iter().take(*cap) {
            produced = true;
            if seen.insert(q.to_lowercase()) {
                out.push(q);
            }
        }
    }
    SubQueryOutcome { sub_queries: out, fallback: !produced, prompts_sent: requests.len(), attempts }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cutoffs {
    pub docs: usize,
    pub entities: usize,
    pub relations: usize,
}

impl Default for Cutoffs {
    fn default() -> Self {
        Cutoffs { docs: 10, entities: 15, relations: 15 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextDoc {
    pub chunk_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextEntity {
    pub name: String,
    pub description: String,
}

pub const ASSEMBLY_ORDER_NOTE: &str =
    "documents are in reversed rank order: the highest-ranked document is last, adjacent to the question";

/// Context handed to the generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextBundle {
    /// Reversed rank order: rank 1 is the last element.
    pub documents: Vec<ContextDoc>,
    pub entities: Vec<ContextEntity>,
    pub relations: Vec<String>,
    pub assembly_order_note: String,
}

impl Default for ContextBundle {
    fn default() -> Self {
        ContextBundle {
            documents: Vec::new(),
            entities: Vec::new(),
            relations: Vec::new(),
            assembly_order_note: ASSEMBLY_ORDER_NOTE.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankOutput {
    pub bundle: ContextBundle,
    /// Descending-score lists the bundle was assembled from.
    pub documents: RankedList,
    pub entities: RankedList,
    pub relations: RankedList,
    /// Items dropped for lacking an embedding or stored text.
    pub dropped: usize,
}

/// Sources the reranker and assembler read from.
#[derive(Clone, Copy)]
pub struct ContextSources<'a> {
    pub store: &'a ChunkStore,
    pub chunk_vectors: &'a DenseIndex,
    pub graph: &'a KnowledgeGraph,
}

fn relation_line(graph: &KnowledgeGraph, id: &str) -> Option<String> {
    let r = graph.relation(id)?;
    let name = |eid: &str| graph.entity(eid).map(|e| e.name.clone()).unwrap_or_default();
    Some(format!("{} -> {}: {}", name(&r.src), name(&r.dst), r.description))
}

/// Re-scores candidates by cosine to the query, keeps the top
/// `cutoffs` of each kind and reverses the documents.
pub fn rerank(
    query_vec: &[f32],
    candidates: &RankedList,
    entities: &RankedList,
    relations: &RankedList,
    sources: ContextSources<'_>,
    cutoffs: Cutoffs,
) -> RerankOutput {
    let mut dropped = 0;
    let docs = rescore(query_vec, candidates, cutoffs.docs, &mut dropped, |id| {
        if sources.store.contains(id) {
            sources.chunk_vectors.vector(id)
        } else {
            None
        }
    });
    let ents = rescore(query_vec, entities, cutoffs.entities, &mut dropped, |id| {
        sources.graph.entity(id).map(|e| e.embedding.as_slice())
    });
    let rels = rescore(query_vec, relations, cutoffs.relations, &mut dropped, |id| {
        sources.graph.relation(id).map(|r| r.embedding.as_slice())
    });
    let bundle = assemble(&docs, &ents, &rels, sources);
    RerankOutput { bundle, documents: docs, entities: ents, relations: rels, dropped }
}

fn rescore<'s>(
    query_vec: &[f32],
    list: &RankedList,
    k: usize,
    dropped: &mut usize,
    lookup: impl Fn(&str) -> Option<&'s [f32]>,
) -> RankedList {
    let mut scored = Vec::with_capacity(list.len());
    for id in list.ids() {
        match lookup(id) {
            Some(v) if v.len() == query_vec.len() => {
                scored.push(Scored { id: id.to_string(), score: cosine(query_vec, v) })
            }
            _ => *dropped += 1,
        }
    }
    RankedList::from_scores(scored, k)
}

/// Takes the first `cutoffs` items in the given order without re-scoring.
/// Documents are still reversed.
pub fn truncate_without_rerank(
    candidates: &RankedList,
    entities: &RankedList,
    relations: &RankedList,
    sources: ContextSources<'_>,
    cutoffs: Cutoffs,
) -> RerankOutput {
    let take = |list: &RankedList, k: usize| RankedList { items: list.items.iter().take(k).cloned().collect(), k };
    let mut docs = take(candidates, cutoffs.docs);
    let before = docs.len();
    docs.items.retain(|s| sources.store.contains(&s.id));
    let dropped = before - docs.len();
    let ents = take(entities, cutoffs.entities);
    let rels = take(relations, cutoffs.relations);
    let bundle = assemble(&docs, &ents, &rels, sources);
    RerankOutput { bundle, documents: docs, entities: ents, relations: rels, dropped }
}

fn assemble(docs: &RankedList, ents: &RankedList, rels: &RankedList, sources: ContextSources<'_>) -> ContextBundle {
    let documents = docs
        .ids()
        .rev()
        .filter_map(|id| sources.store.get(id))
        .map(|c| ContextDoc { chunk_id: c.chunk_id.clone(), text: c.text.clone() })
        .collect();
    let entities = ents
        .ids()
        .filter_map(|id| sources.graph.entity(id))
        .map(|e| ContextEntity { name: e.name.clone(), description: e.description() })
        .collect();
    let relations = rels.ids().filter_map(|id| relation_line(sources.graph, id)).collect();
    ContextBundle { documents, entities, relations, assembly_order_note: ASSEMBLY_ORDER_NOTE.to_string() }
}

/// Deterministic generation context: entities, relations, documents (as
/// stored, i.e. reversed), intents when present, then the original question.
pub fn render_context(bundle: &ContextBundle, plan: &QueryPlan) -> String {
    let mut out = String::new();
    out.push_str("## Entities\n");
    for e in &bundle.entities {
        if e.description.is_empty() {
            let _ = writeln!(out, "- {}", e.name);
        } else {
            let _ = writeln!(out, "- {}: {}", e.name, e.description);
        }
    }
    out.push_str("\n## Relations\n");
    for r in &bundle.relations {
        let _ = writeln!(out, "- {r}");
    }
    out.push_str("\n## Documents\n");
    for d in &bundle.documents {
        let _ = writeln!(out, "[{}]\n{}\n", d.chunk_id, d.text.trim_end());
    }
    if !plan.intents.is_empty() {
        out.push_str("## Intents\n");
        for i in &plan.intents {
            let _ = writeln!(out, "- {}", i.label);
        }
        out.push('\n');
    } else if bundle.documents.is_empty() {
        out.push('\n');
    }
    out.push_str("## Question\n");
    out.push_str(&plan.original);
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ChatResponse, StubChat, StubEmbedder, Usage};

    struct Failing;
    impl ChatBackend for Failing {
        fn chat(&self, _: &ChatRequest) -> Result<ChatResponse, BackendError> {
            Err(BackendError::Unavailable { attempts: 4, message: "timeout".into() })
        }
    }

    struct Fixed(&'static str);
    impl ChatBackend for Fixed {
        fn chat(&self, _: &ChatRequest) -> Result<ChatResponse, BackendError> {
            Ok(ChatResponse {
                content: self.0.to_string(),
                usage: Usage { attempts: 1, ..Usage::default() },
                source: ResponseSource::Remote,
            })
        }
    }

    #[test]
    fn rewrite_echo_falls_back_to_original() {
        let out = rewrite_query("點樣交電費", &StubChat::new(), &PromptSet::default());
        assert_eq!(out.text, "點樣交電費");
        assert!(out.fallback);
    }

    #[test]
    fn rewrite_uses_fixture_mapping() {
        let prompts = PromptSet::default();
        let mut chat = StubChat::new();
        chat.insert(
            &[Message::system(prompts.rewrite_system.clone()), Message::user("點樣交電費")],
            "How do I pay my electricity bill\n",
        );
        let out = rewrite_query("點樣交電費", &chat, &prompts);
        assert_eq!(out.text, "How do I pay my electricity bill");
        assert!(!out.fallback);
    }

    #[test]
    fn rewrite_timeout_fails_open() {
        let out = rewrite_query("q", &Failing, &PromptSet::default());
        assert_eq!(out.text, "q");
        assert!(out.fallback);
        assert_eq!(out.attempts, 4);
        let out = rewrite_query("q", &Fixed("  \n "), &PromptSet::default());
        assert!(out.fallback);
    }

    #[test]
    fn subquery_failure_floor() {
        let mut plan = QueryPlan::new("orig");
        plan.rewritten = "rewritten".into();
        let out = generate_subqueries(&plan, &Failing, &PromptSet::default(), 4);
        assert_eq!(out.sub_queries, vec!["rewritten"]);
        assert!(out.fallback);
    }

    #[test]
    fn subquery_dedup_hand_applied() {
        let plan = QueryPlan::new("pay bill");
        let out =
            generate_subqueries(&plan, &Fixed("fees\n\nDeadlines\ndeadlines\nchannels"), &PromptSet::default(), 4);
        assert_eq!(out.sub_queries, vec!["pay bill", "fees", "Deadlines", "channels"]);
    }

    #[test]
    fn subqueries_per_intent_capped() {
        let mut plan = QueryPlan::new("q");
        plan.intents = vec![
            IntentScore { label: "billing".into(), score: 0.6 },
            IntentScore { label: "outage".into(), score: 0.4 },
        ];
        struct PerIntent;
        impl ChatBackend for PerIntent {
            fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
                let label = if req.messages[0].content.contains("billing") { "billing" } else { "outage" };
                Ok(ChatResponse {
                    content: format!("{label} a\n{label} b\n{label} c"),
                    usage: Usage { attempts: 1, ..Usage::default() },
                    source: ResponseSource::Remote,
                })
            }
        }
        let out = generate_subqueries(&plan, &PerIntent, &PromptSet::default(), 4);
        assert_eq!(out.sub_queries, vec!["q", "billing a", "billing b", "outage a", "outage b"]);
        assert_eq!(out.prompts_sent, 2);
    }

    #[test]
    fn list_markers_and_length_clip() {
        let long = "x".repeat(400);
        let parsed = parse_subqueries(&format!("1. alpha\n- beta\n2) gamma\n{long}"));
        assert_eq!(&parsed[..3], ["alpha", "beta", "gamma"]);
        assert_eq!(parsed[3].chars().count(), MAX_SUBQUERY_CHARS);
    }

    #[test]
    fn knn_exact_neighbor_and_degenerate_store() {
        let e = StubEmbedder::default();
        let groups = vec![
            ("billing".to_string(), vec!["pay my bill".to_string(), "invoice amount".to_string()]),
            ("outage".to_string(), vec!["power is out".to_string()]),
        ];
        let mut store = IntentStore::build(&groups, &e).unwrap();
        store.k_neighbors = 1;
        let q = e.vector("power is out");
        let out = classify_intent(&q, &store);
        assert_eq!(out, vec![IntentScore { label: "outage".into(), score: 1.0 }]);

        let single = IntentStore::build(&groups[..1], &e).unwrap();
        let out = classify_intent(&q, &single);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].label, "billing");
        assert!(classify_intent(&q, &IntentStore::default()).is_empty());
    }

    #[test]
    fn render_empty_bundle() {
        let plan = QueryPlan::new("How do I pay?");
        let out = render_context(&ContextBundle::default(), &plan);
        assert_eq!(out, "## Entities\n\n## Relations\n\n## Documents\n\n## Question\nHow do I pay?\n");
        assert_eq!(out, render_context(&ContextBundle::default(), &plan));
    }
}
