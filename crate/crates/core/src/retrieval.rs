//! Dense, sparse (BM25) and graph-mediated retrieval plus reciprocal rank
//! fusion. Every ranking breaks score ties by ascending id.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::RetrievalError;
use crate::kg::KnowledgeGraph;
use crate::text::{normalize_name, tokenize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub id: String,
    pub score: f64,
}

/// Ordered `(id, score)` results with the cutoff that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub items: Vec<Scored>,
    pub k: usize,
}

fn by_score_then_id(a: &Scored, b: &Scored) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id))
}

impl RankedList {
    pub fn empty(k: usize) -> Self {
        RankedList { items: Vec::new(), k }
    }

    /// Sorts descending by score (ties by ascending id), keeps the first
    /// occurrence of each id and truncates to `k`.
    pub fn from_scores(mut items: Vec<Scored>, k: usize) -> Self {
        items.sort_by(by_score_then_id);
        let mut seen = BTreeSet::new();
        items.retain(|s| seen.insert(s.id.clone()));
        items.truncate(k);
        RankedList { items, k }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn ids(&self) -> impl DoubleEndedIterator<Item = &str> {
        self.items.iter().map(|s| s.id.as_str())
    }

    /// Checks the list invariants: non-increasing scores, unique ids,
    /// length within k.
    pub fn is_well_formed(&self) -> bool {
        let mut seen = BTreeSet::new();
        self.items.len() <= self.k
            && self.items.windows(2).all(|w| w[0].score >= w[1].score)
            && self.items.iter().all(|s| seen.insert(s.id.as_str()))
    }
}

/// Cosine similarity. A zero vector on either side yields 0.0.
///
/// # Panics
/// When the vectors differ in length.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine of vectors with different dimensions");
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (libm::sqrt(na) * libm::sqrt(nb))).clamp(-1.0, 1.0)
}

pub fn is_unit(v: &[f32]) -> bool {
    let norm = libm::sqrt(v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>());
    (norm - 1.0).abs() <= 1e-6
}

/// Exact brute-force vector index over chunk ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DenseIndex {
    dimension: usize,
    ids: Vec<String>,
    vectors: Vec<Vec<f32>>,
    by_id: BTreeMap<String, usize>,
}

impl DenseIndex {
    pub fn new(dimension: usize) -> Self {
        DenseIndex { dimension, ..DenseIndex::default() }
    }

    pub fn insert(&mut self, id: impl Into<String>, vector: Vec<f32>) -> Result<(), RetrievalError> {
        let id = id.into();
        if vector.len() != self.dimension {
            return Err(RetrievalError::DimensionMismatch { expected: self.dimension, actual: vector.len() });
        }
        if !is_unit(&vector) {
            return Err(RetrievalError::InvalidVector { id, reason: "not unit norm".into() });
        }
        if self.by_id.contains_key(&id) {
            return Err(RetrievalError::InvalidVector { id, reason: "duplicate id".into() });
        }
        self.by_id.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.vectors.push(vector);
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, id: &str) -> Option<&[f32]> {
        self.by_id.get(id).map(|&i| self.vectors[i].as_slice())
    }

    pub fn rows(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids.iter().map(String::as_str).zip(self.vectors.iter().map(Vec::as_slice))
    }
}

pub fn dense_topk(query: &[f32], index: &DenseIndex, k: usize) -> Result<RankedList, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroCutoff);
    }
    if index.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    if query.len() != index.dimension {
        return Err(RetrievalError::DimensionMismatch { expected: index.dimension, actual: query.len() });
    }
    let scored = index.rows().map(|(id, v)| Scored { id: id.to_string(), score: cosine(query, v) }).collect();
    Ok(RankedList::from_scores(scored, k))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.5, b: 0.75 }
    }
}

/// Inverted index for Okapi BM25.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SparseIndex {
    pub postings: BTreeMap<String, Vec<(String, u32)>>,
    pub doc_lengths: BTreeMap<String, u32>,
    pub avg_len: f64,
    pub params: Bm25Params,
}

impl SparseIndex {
    pub fn build<'a, I>(docs: I, params: Bm25Params) -> Self
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut postings: BTreeMap<String, Vec<(String, u32)>> = BTreeMap::new();
        let mut doc_lengths = BTreeMap::new();
        for (id, text) in docs {
            let tokens = tokenize(text);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in &tokens {
                *tf.entry(t.clone()).or_default() += 1;
            }
            doc_lengths.insert(id.to_string(), tokens.len() as u32);
            for (token, count) in tf {
                postings.entry(token).or_default().push((id.to_string(), count));
            }
        }
        for list in postings.values_mut() {
            list.sort();
        }
        let avg_len = if doc_lengths.is_empty() {
            0.0
        } else {
            doc_lengths.values().map(|&l| f64::from(l)).sum::<f64>() / doc_lengths.len() as f64
        };
        SparseIndex { postings, doc_lengths, avg_len, params }
    }

    pub fn n(&self) -> usize {
        self.doc_lengths.len()
    }

    pub fn idf(&self, df: usize) -> f64 {
        let (n, df) = (self.n() as f64, df as f64);
        libm::log(1.0 + (n - df + 0.5) / (df + 0.5))
    }

    /// Validates the stored statistics against the postings.
    pub fn check(&self) -> Result<(), String> {
        let mean = if self.doc_lengths.is_empty() {
            0.0
        } else {
            self.doc_lengths.values().map(|&l| f64::from(l)).sum::<f64>() / self.doc_lengths.len() as f64
        };
        if (mean - self.avg_len).abs() > 1e-9 {
            return Err(format!("avg_len {} differs from mean {mean}", self.avg_len));
        }
        for (token, list) in &self.postings {
            if let Some((id, _)) = list.iter().find(|(id, _)| !self.doc_lengths.contains_key(id)) {
                return Err(format!("posting for {token:?} references unknown chunk {id}"));
            }
        }
        Ok(())
    }
}

/// Okapi BM25 over distinct query tokens; zero-score documents are omitted.
pub fn bm25_topk(query_tokens: &[String], index: &SparseIndex, k: usize) -> Result<RankedList, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroCutoff);
    }
    let distinct: BTreeSet<&str> = query_tokens.iter().map(String::as_str).collect();
    let Bm25Params { k1, b } = index.params;
    let mut scores: BTreeMap<&str, f64> = BTreeMap::new();
    for token in distinct {
        let Some(list) = index.postings.get(token) else { continue };
        let idf = index.idf(list.len());
        for (id, tf) in list {
            let tf = f64::from(*tf);
            let len = f64::from(index.doc_lengths[id]);
            let norm = if index.avg_len > 0.0 { len / index.avg_len } else { 0.0 };
            *scores.entry(id.as_str()).or_default() += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * norm));
        }
    }
    let scored =
        scores.into_iter().filter(|&(_, s)| s > 0.0).map(|(id, score)| Scored { id: id.to_string(), score }).collect();
    Ok(RankedList::from_scores(scored, k))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphParams {
    /// Minimum cosine for a semantic entity match.
    pub tau_ent: f64,
    /// Maximum number of seed entities.
    pub m_ent: usize,
}

impl Default for GraphParams {
    fn default() -> Self {
        GraphParams { tau_ent: 0.35, m_ent: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphHits {
    pub chunks: RankedList,
    pub entities: RankedList,
    pub relations: RankedList,
    /// Provenance chunks without a dense vector.
    pub dropped_chunks: usize,
}

impl GraphHits {
    pub fn empty(k: usize, m_ent: usize) -> Self {
        GraphHits {
            chunks: RankedList::empty(k),
            entities: RankedList::empty(m_ent),
            relations: RankedList::empty(k),
            dropped_chunks: 0,
        }
    }

    pub fn is_miss(&self) -> bool {
        self.entities.is_empty()
    }
}

/// Exact match in either direction between a normalized entity name and
/// any normalized keyword.
pub fn exact_entity_match(norm_name: &str, norm_keywords: &[String]) -> bool {
    norm_keywords.iter().any(|kw| !kw.is_empty() && (kw.contains(norm_name) || norm_name.contains(kw.as_str())))
}

/// Scores every entity: 1.0 for an exact keyword match, otherwise its cosine
/// to the query when at least `tau`. Returns the top `limit`.
pub fn score_entities(
    keywords: &[String],
    query_vec: &[f32],
    graph: &KnowledgeGraph,
    tau: f64,
    limit: usize,
) -> RankedList {
    let norm_keywords: Vec<String> = keywords.iter().map(|k| normalize_name(k)).collect();
    let scored = graph
        .entities()
        .values()
        .filter_map(|e| {
            let score = if exact_entity_match(&e.norm_name, &norm_keywords) {
                1.0
            } else {
                let c = cosine(query_vec, &e.embedding);
                if c < tau {
                    return None;
                }
                c
            };
            Some(Scored { id: e.entity_id.clone(), score })
        })
        .collect();
    RankedList::from_scores(scored, limit)
}

/// Graph-mediated retrieval: seed entities, their incident relations, and
/// the chunks those carry as provenance, each ranked against the query.
pub fn graph_retrieve(
    keywords: &[String],
    query_vec: &[f32],
    graph: &KnowledgeGraph,
    chunk_vectors: &DenseIndex,
    k: usize,
    params: GraphParams,
) -> Result<GraphHits, RetrievalError> {
    if k == 0 || params.m_ent == 0 {
        return Err(RetrievalError::ZeroCutoff);
    }
    if query_vec.len() != chunk_vectors.dimension() {
        return Err(RetrievalError::DimensionMismatch { expected: chunk_vectors.dimension(), actual: query_vec.len() });
    }
    let entities = score_entities(keywords, query_vec, graph, params.tau_ent, params.m_ent);
    if entities.is_empty() {
        return Ok(GraphHits::empty(k, params.m_ent));
    }

    let mut rel_ids = BTreeSet::new();
    for id in entities.ids() {
        rel_ids.extend(graph.incident(id).map(|r| r.relation_id.as_str()));
    }
    let relations = RankedList::from_scores(
        rel_ids
            .into_iter()
            .map(|id| Scored { id: id.to_string(), score: cosine(query_vec, &graph.relations()[id].embedding) })
            .collect(),
        k,
    );

    let mut candidates: BTreeSet<&str> = BTreeSet::new();
    for id in entities.ids() {
        candidates.extend(graph.entities()[id].source_chunks.iter().map(String::as_str));
    }
    for id in relations.ids() {
        candidates.extend(graph.relations()[id].source_chunks.iter().map(String::as_str));
    }
    let mut dropped_chunks = 0;
    let mut scored = Vec::with_capacity(candidates.len());
    for id in candidates {
        match chunk_vectors.vector(id) {
            Some(v) => scored.push(Scored { id: id.to_string(), score: cosine(query_vec, v) }),
            None => dropped_chunks += 1,
        }
    }
    Ok(GraphHits { chunks: RankedList::from_scores(scored, k), entities, relations, dropped_chunks })
}

/// Reciprocal rank fusion: `score(id) = Σ 1/(k_rrf + rank)` over the lists
/// containing `id`, ranks starting at 1.
pub fn rrf_fuse(lists: &[RankedList], k_rrf: usize, k: usize) -> RankedList {
    let mut ranks: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for list in lists {
        let mut seen = BTreeSet::new();
        for (i, id) in list.ids().enumerate() {
            if seen.insert(id) {
                ranks.entry(id).or_default().push(i + 1);
            }
        }
    }
    // Summing in rank order keeps the float result independent of list order.
    let scored = ranks
        .into_iter()
        .map(|(id, mut rs)| {
            rs.sort_unstable();
            let score = rs.iter().map(|&r| 1.0 / (k_rrf + r) as f64).sum();
            Scored { id: id.to_string(), score }
        })
        .collect();
    RankedList::from_scores(scored, k)
}
