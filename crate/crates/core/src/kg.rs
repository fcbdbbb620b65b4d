//! Knowledge graph: extraction records, the gazetteer and LLM extractors,
//! merge-on-upsert and invariant checks.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backend::{ChatBackend, ChatRequest, Embedder, Message, Purpose};
use crate::corpus::{Chunk, ChunkStore};
use crate::error::GraphError;
use crate::prompts::fill_template;
use crate::text::{fnv1a64, normalize_name};

pub const CO_OCCURS: &str = "co-occurs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub entity_id: String,
    pub name: String,
    pub norm_name: String,
    pub etype: String,
    /// Distinct description fragments in first-seen order.
    pub descriptions: Vec<String>,
    pub source_chunks: BTreeSet<String>,
    pub embedding: Vec<f32>,
}

impl Entity {
    pub fn description(&self) -> String {
        self.descriptions.join("; ")
    }

    /// Text the entity embedding is computed from.
    pub fn embedding_text(&self) -> String {
        if self.descriptions.is_empty() {
            self.name.clone()
        } else {
            format!("{} {}", self.name, self.description())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relation {
    pub relation_id: String,
    pub src: String,
    pub dst: String,
    pub description: String,
    pub keywords: Vec<String>,
    pub source_chunks: BTreeSet<String>,
    pub embedding: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ExtractionRecord {
    Entity { name: String, etype: String, description: String, origin_chunk: String },
    Relation { src: String, dst: String, description: String, keywords: Vec<String>, origin_chunk: String },
}

impl ExtractionRecord {
    pub fn origin_chunk(&self) -> &str {
        match self {
            ExtractionRecord::Entity { origin_chunk, .. } | ExtractionRecord::Relation { origin_chunk, .. } => {
                origin_chunk
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedExtraction {
    pub records: Vec<ExtractionRecord>,
    pub skipped: usize,
}

/// Parses pipe-delimited extractor output:
/// `E|name|type|description` and `R|src|dst|description|kw1;kw2`.
///
/// Blank lines are ignored; anything else that does not parse is skipped and
/// counted.
pub fn parse_extraction_output(raw: &str, origin_chunk: &str) -> ParsedExtraction {
    let mut out = ParsedExtraction::default();
    for line in raw.lines().map(str::trim).filter(|l| !l.is_empty()) {
        match parse_line(line, origin_chunk) {
            Some(record) => out.records.push(record),
            None => out.skipped += 1,
        }
    }
    out
}

fn parse_line(line: &str, origin_chunk: &str) -> Option<ExtractionRecord> {
    if let Some(rest) = line.strip_prefix("E|") {
        let fields: Vec<&str> = rest.splitn(3, '|').map(str::trim).collect();
        let [name, etype, description] = fields[..] else { return None };
        if name.is_empty() {
            return None;
        }
        Some(ExtractionRecord::Entity {
            name: name.to_string(),
            etype: etype.to_string(),
            description: description.to_string(),
            origin_chunk: origin_chunk.to_string(),
        })
    } else if let Some(rest) = line.strip_prefix("R|") {
        let fields: Vec<&str> = rest.splitn(4, '|').map(str::trim).collect();
        let [src, dst, description, keywords] = fields[..] else { return None };
        if src.is_empty() || dst.is_empty() {
            return None;
        }
        Some(ExtractionRecord::Relation {
            src: src.to_string(),
            dst: dst.to_string(),
            description: description.to_string(),
            keywords: keywords.split(';').map(str::trim).filter(|k| !k.is_empty()).map(String::from).collect(),
            origin_chunk: origin_chunk.to_string(),
        })
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GazetteerTerm {
    pub term: String,
    pub norm: String,
    pub etype: String,
    pub description: String,
}

/// Fixed term list matched case-insensitively after NFKC normalization.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Gazetteer {
    terms: Vec<GazetteerTerm>,
}

impl Gazetteer {
    pub fn new<I, S>(terms: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut g = Gazetteer::default();
        for t in terms {
            g.push(t.as_ref(), "term", "");
        }
        g
    }

    /// One term per line, optionally `term|type|description`. Blank lines and
    /// `#` comments are ignored.
    pub fn parse(text: &str) -> Self {
        let mut g = Gazetteer::default();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.splitn(3, '|').map(str::trim);
            let term = parts.next().unwrap_or("");
            let etype = parts.next().filter(|s| !s.is_empty()).unwrap_or("term");
            let description = parts.next().unwrap_or("");
            g.push(term, etype, description);
        }
        g
    }

    fn push(&mut self, term: &str, etype: &str, description: &str) {
        let norm = normalize_name(term);
        if norm.is_empty() || self.terms.iter().any(|t| t.norm == norm) {
            return;
        }
        self.terms.push(GazetteerTerm {
            term: term.trim().to_string(),
            norm,
            etype: etype.to_string(),
            description: description.to_string(),
        });
    }

    pub fn terms(&self) -> &[GazetteerTerm] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Entity records for every matched term, ordered by first occurrence,
    /// and one co-occurrence relation per unordered pair.
    pub fn extract(&self, chunk: &Chunk) -> Vec<ExtractionRecord> {
        let haystack = normalize_name(&chunk.text);
        let mut hits: Vec<(usize, &GazetteerTerm)> =
            self.terms.iter().filter_map(|t| haystack.find(&t.norm).map(|pos| (pos, t))).collect();
        hits.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.norm.cmp(&b.1.norm)));

        let mut records: Vec<ExtractionRecord> = hits
            .iter()
            .map(|(_, t)| ExtractionRecord::Entity {
                name: t.term.clone(),
                etype: t.etype.clone(),
                description: t.description.clone(),
                origin_chunk: chunk.chunk_id.clone(),
            })
            .collect();
        for (i, (_, a)) in hits.iter().enumerate() {
            for (_, b) in &hits[i + 1..] {
                records.push(ExtractionRecord::Relation {
                    src: a.term.clone(),
                    dst: b.term.clone(),
                    description: CO_OCCURS.to_string(),
                    keywords: Vec::new(),
                    origin_chunk: chunk.chunk_id.clone(),
                });
            }
        }
        records
    }
}

pub enum Extractor<'a> {
    Gazetteer(&'a Gazetteer),
    /// Prompts the chat backend with `template` (placeholder `{text}`) and
    /// parses the reply.
    Llm {
        chat: &'a dyn ChatBackend,
        system: &'a str,
        template: &'a str,
    },
}

impl Extractor<'_> {
    pub fn kind(&self) -> &'static str {
        match self {
            Extractor::Gazetteer(_) => "gazetteer",
            Extractor::Llm { .. } => "llm",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Extraction {
    pub records: Vec<ExtractionRecord>,
    pub skipped_lines: usize,
}

pub fn extract_graph(chunk: &Chunk, extractor: &Extractor<'_>) -> Result<Extraction, GraphError> {
    match extractor {
        Extractor::Gazetteer(g) => Ok(Extraction { records: g.extract(chunk), skipped_lines: 0 }),
        Extractor::Llm { chat, system, template } => {
            let mut vars = BTreeMap::new();
            vars.insert("text", chunk.text.as_str());
            let req = ChatRequest::new(
                Purpose::Extract,
                alloc::vec![Message::system(*system), Message::user(fill_template(template, &vars))],
            );
            let resp = chat
                .chat(&req)
                .map_err(|source| GraphError::Extraction { chunk_id: chunk.chunk_id.clone(), source })?;
            let parsed = parse_extraction_output(&resp.content, &chunk.chunk_id);
            Ok(Extraction { records: parsed.records, skipped_lines: parsed.skipped })
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpsertStats {
    pub entities_added: usize,
    pub entities_merged: usize,
    pub relations_added: usize,
    pub relations_merged: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeGraph {
    entities: BTreeMap<String, Entity>,
    relations: BTreeMap<String, Relation>,
    adjacency: BTreeMap<String, BTreeSet<String>>,
    by_norm: BTreeMap<String, String>,
}

fn derived_id(prefix: &str, key: &str) -> String {
    format!("{prefix}-{:016x}", fnv1a64(key.as_bytes()))
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds a graph from persisted entities and relations, recomputing
    /// adjacency and checking integrity.
    pub fn from_parts(entities: Vec<Entity>, relations: Vec<Relation>) -> Result<Self, GraphError> {
        let mut g = KnowledgeGraph::new();
        for e in entities {
            if g.by_norm.insert(e.norm_name.clone(), e.entity_id.clone()).is_some() {
                return Err(GraphError::Invariant(format!("duplicate norm_name {:?}", e.norm_name)));
            }
            if g.entities.insert(e.entity_id.clone(), e).is_some() {
                return Err(GraphError::Invariant("duplicate entity_id".into()));
            }
        }
        for r in relations {
            let id = r.relation_id.clone();
            g.link(&r);
            if g.relations.insert(id.clone(), r).is_some() {
                return Err(GraphError::Invariant(format!("duplicate relation_id {id}")));
            }
        }
        g.check_invariants()?;
        Ok(g)
    }

    pub fn entities(&self) -> &BTreeMap<String, Entity> {
        &self.entities
    }

    pub fn relations(&self) -> &BTreeMap<String, Relation> {
        &self.relations
    }

    pub fn adjacency(&self) -> &BTreeMap<String, BTreeSet<String>> {
        &self.adjacency
    }

    pub fn entity(&self, id: &str) -> Option<&Entity> {
        self.entities.get(id)
    }

    pub fn relation(&self, id: &str) -> Option<&Relation> {
        self.relations.get(id)
    }

    pub fn entity_by_norm(&self, norm: &str) -> Option<&Entity> {
        self.by_norm.get(norm).and_then(|id| self.entities.get(id))
    }

    /// Relations touching `entity_id`, in either direction.
    pub fn incident(&self, entity_id: &str) -> impl Iterator<Item = &Relation> {
        self.adjacency.get(entity_id).into_iter().flatten().filter_map(|id| self.relations.get(id))
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    fn link(&mut self, r: &Relation) {
        for end in [&r.src, &r.dst] {
            self.adjacency.entry(end.clone()).or_default().insert(r.relation_id.clone());
        }
    }

    fn fresh_entity_id(&self, norm: &str) -> String {
        let mut id = derived_id("ent", norm);
        let mut salt = 0u32;
        while self.entities.contains_key(&id) {
            salt += 1;
            id = derived_id("ent", &format!("{norm}\u{0}{salt}"));
        }
        id
    }

    /// Merges a record batch into the graph.
    ///
    /// Entities merge on normalized name; relations merge on
    /// `(src, dst, normalized description)`. Entity records are applied
    /// before relation records, so a relation may refer to an entity that
    /// appears later in the same batch. Relations whose endpoints cannot be
    /// resolved, or resolve to the same entity, are skipped.
    pub fn upsert_records(
        &mut self,
        records: &[ExtractionRecord],
        embedder: &dyn Embedder,
    ) -> Result<UpsertStats, GraphError> {
        let mut stats = UpsertStats::default();
        let mut touched_entities = BTreeSet::new();
        let mut touched_relations = BTreeSet::new();

        for record in records {
            let ExtractionRecord::Entity { name, etype, description, origin_chunk } = record else { continue };
            let norm = normalize_name(name);
            if norm.is_empty() {
                stats.skipped += 1;
                continue;
            }
            let id = match self.by_norm.get(&norm) {
                Some(id) => {
                    stats.entities_merged += 1;
                    id.clone()
                }
                None => {
                    let id = self.fresh_entity_id(&norm);
                    self.entities.insert(
                        id.clone(),
                        Entity {
                            entity_id: id.clone(),
                            name: name.trim().to_string(),
                            norm_name: norm.clone(),
                            etype: String::new(),
                            descriptions: Vec::new(),
                            source_chunks: BTreeSet::new(),
                            embedding: Vec::new(),
                        },
                    );
                    self.by_norm.insert(norm, id.clone());
                    stats.entities_added += 1;
                    id
                }
            };
            let entity = self.entities.get_mut(&id).expect("indexed entity exists");
            let before = (entity.descriptions.len(), entity.source_chunks.len(), entity.embedding.is_empty());
            if entity.etype.is_empty() && !etype.is_empty() {
                entity.etype = etype.clone();
            }
            let description = description.trim();
            if !description.is_empty() && !entity.descriptions.iter().any(|d| d == description) {
                entity.descriptions.push(description.to_string());
            }
            entity.source_chunks.insert(origin_chunk.clone());
            if before != (entity.descriptions.len(), entity.source_chunks.len(), entity.embedding.is_empty())
                || entity.embedding.is_empty()
            {
                touched_entities.insert(id);
            }
        }

        for record in records {
            let ExtractionRecord::Relation { src, dst, description, keywords, origin_chunk } = record else {
                continue;
            };
            let (Some(src_id), Some(dst_id)) =
                (self.by_norm.get(&normalize_name(src)).cloned(), self.by_norm.get(&normalize_name(dst)).cloned())
            else {
                stats.skipped += 1;
                continue;
            };
            if src_id == dst_id {
                stats.skipped += 1;
                continue;
            }
            let key = format!("{src_id}\u{0}{dst_id}\u{0}{}", normalize_name(description));
            let id = derived_id("rel", &key);
            match self.relations.get_mut(&id) {
                Some(rel) => {
                    stats.relations_merged += 1;
                    let before = (rel.keywords.len(), rel.source_chunks.len());
                    for kw in keywords {
                        if !rel.keywords.contains(kw) {
                            rel.keywords.push(kw.clone());
                        }
                    }
                    rel.source_chunks.insert(origin_chunk.clone());
                    if before != (rel.keywords.len(), rel.source_chunks.len()) {
                        touched_relations.insert(id);
                    }
                }
                None => {
                    let mut kws: Vec<String> = Vec::new();
                    for kw in keywords {
                        if !kws.contains(kw) {
                            kws.push(kw.clone());
                        }
                    }
                    let rel = Relation {
                        relation_id: id.clone(),
                        src: src_id,
                        dst: dst_id,
                        description: description.trim().to_string(),
                        keywords: kws,
                        source_chunks: BTreeSet::from([origin_chunk.clone()]),
                        embedding: Vec::new(),
                    };
                    self.link(&rel);
                    self.relations.insert(id.clone(), rel);
                    stats.relations_added += 1;
                    touched_relations.insert(id);
                }
            }
        }

        self.reembed(&touched_entities, &touched_relations, embedder)?;
        Ok(stats)
    }

    pub fn relation_text(&self, rel: &Relation) -> String {
        let name = |id: &str| self.entities.get(id).map(|e| e.name.as_str()).unwrap_or("");
        let mut text = format!("{} {} {}", name(&rel.src), name(&rel.dst), rel.description);
        for kw in &rel.keywords {
            text.push(' ');
            text.push_str(kw);
        }
        text
    }

    fn reembed(
        &mut self,
        entities: &BTreeSet<String>,
        relations: &BTreeSet<String>,
        embedder: &dyn Embedder,
    ) -> Result<(), GraphError> {
        let mut texts: Vec<String> = entities.iter().map(|id| self.entities[id].embedding_text()).collect();
        texts.extend(relations.iter().map(|id| self.relation_text(&self.relations[id])));
        if texts.is_empty() {
            return Ok(());
        }
        let vectors = embedder.embed(&texts).map_err(GraphError::Embedding)?.vectors;
        if vectors.len() != texts.len() {
            return Err(GraphError::Embedding(crate::error::BackendError::Malformed(format!(
                "expected {} vectors, got {}",
                texts.len(),
                vectors.len()
            ))));
        }
        let mut vectors = vectors.into_iter();
        for id in entities {
            self.entities.get_mut(id).expect("touched entity").embedding = vectors.next().expect("sized");
        }
        for id in relations {
            self.relations.get_mut(id).expect("touched relation").embedding = vectors.next().expect("sized");
        }
        Ok(())
    }

    /// Referential integrity, adjacency soundness and per-item invariants.
    pub fn check_invariants(&self) -> Result<(), GraphError> {
        let fail = |msg: String| Err(GraphError::Invariant(msg));
        for (id, e) in &self.entities {
            if id != &e.entity_id {
                return fail(format!("entity keyed {id} has id {}", e.entity_id));
            }
            if e.norm_name.is_empty() {
                return fail(format!("entity {id} has empty norm_name"));
            }
            if e.source_chunks.is_empty() {
                return fail(format!("entity {id} has no source chunks"));
            }
            if self.by_norm.get(&e.norm_name) != Some(id) {
                return fail(format!("entity {id} missing from name index"));
            }
            check_unit(id, &e.embedding)?;
        }
        if self.by_norm.len() != self.entities.len() {
            return fail("name index size differs from entity count".into());
        }
        let mut rebuilt: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (id, r) in &self.relations {
            if id != &r.relation_id {
                return fail(format!("relation keyed {id} has id {}", r.relation_id));
            }
            if !self.entities.contains_key(&r.src) || !self.entities.contains_key(&r.dst) {
                return fail(format!("relation {id} has a dangling endpoint"));
            }
            if r.src == r.dst {
                return fail(format!("relation {id} is a self-loop"));
            }
            if r.source_chunks.is_empty() {
                return fail(format!("relation {id} has no source chunks"));
            }
            check_unit(id, &r.embedding)?;
            for end in [&r.src, &r.dst] {
                rebuilt.entry(end.clone()).or_default().insert(id.clone());
            }
        }
        if rebuilt != self.adjacency {
            return fail("adjacency differs from relations".into());
        }
        Ok(())
    }

    /// Every source chunk of every entity and relation exists in `store`.
    pub fn check_provenance(&self, store: &ChunkStore) -> Result<(), GraphError> {
        let chunks = self
            .entities
            .values()
            .flat_map(|e| e.source_chunks.iter())
            .chain(self.relations.values().flat_map(|r| r.source_chunks.iter()));
        for c in chunks {
            if !store.contains(c) {
                return Err(GraphError::Invariant(format!("unknown source chunk {c}")));
            }
        }
        Ok(())
    }
}

fn check_unit(id: &str, v: &[f32]) -> Result<(), GraphError> {
    let norm = libm::sqrt(v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>());
    if (norm - 1.0).abs() > 1e-6 {
        return Err(GraphError::Invariant(format!("embedding of {id} has norm {norm}")));
    }
    Ok(())
}

/// Folds extraction and upsert over `chunks` in order.
pub fn build_graph(
    chunks: &[Chunk],
    extractor: &Extractor<'_>,
    embedder: &dyn Embedder,
) -> Result<(KnowledgeGraph, BuildStats), GraphError> {
    if chunks.is_empty() {
        return Err(GraphError::NoChunks);
    }
    let mut graph = KnowledgeGraph::new();
    let mut stats = BuildStats::default();
    for chunk in chunks {
        let extraction = extract_graph(chunk, extractor)?;
        stats.skipped_lines += extraction.skipped_lines;
        stats.records += extraction.records.len();
        let upsert = graph.upsert_records(&extraction.records, embedder)?;
        stats.skipped_records += upsert.skipped;
    }
    Ok((graph, stats))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildStats {
    pub records: usize,
    pub skipped_lines: usize,
    pub skipped_records: usize,
}
