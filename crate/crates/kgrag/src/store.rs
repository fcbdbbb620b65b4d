//! Persisted workspace: chunk store, dense and sparse indices, knowledge
//! graph and intent store, all in one directory.
//!
//! ```text
//! chunks.jsonl          one Chunk per line
//! chunks.manifest.json  splitter config and per-document entries
//! dense.json, dense.bin header (dimension, embedder, row ids) + f32 LE rows
//! sparse.json           BM25 parameters and document lengths
//! sparse.jsonl          {"token", "postings": [[chunk_id, tf], ...]}
//! entities.jsonl, relations.jsonl, graph.manifest.json
//! intents.json          embedded intent examples
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use kgrag_core::backend::Embedder;
use kgrag_core::corpus::{Chunk, ChunkStore, DocumentEntry, SplitterConfig};
use kgrag_core::kg::{extract_graph, BuildStats, Entity, Extraction, Extractor, KnowledgeGraph, Relation};
use kgrag_core::pipeline::Indices;
use kgrag_core::retrieval::{Bm25Params, DenseIndex, SparseIndex};
use kgrag_core::stages::IntentStore;
use kgrag_core::{Document, GraphError, IngestSummary};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

pub const CHUNKS: &str = "chunks.jsonl";
pub const CHUNKS_MANIFEST: &str = "chunks.manifest.json";
pub const DENSE_HEADER: &str = "dense.json";
pub const DENSE_DATA: &str = "dense.bin";
pub const SPARSE_HEADER: &str = "sparse.json";
pub const SPARSE_POSTINGS: &str = "sparse.jsonl";
pub const ENTITIES: &str = "entities.jsonl";
pub const RELATIONS: &str = "relations.jsonl";
pub const GRAPH_MANIFEST: &str = "graph.manifest.json";
pub const INTENTS: &str = "intents.json";

/// Texts per embedding request during builds.
const EMBED_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkManifest {
    pub splitter: SplitterConfig,
    pub documents: Vec<DocumentEntry>,
    pub chunk_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseHeader {
    pub dimension: usize,
    pub embedder: String,
    pub ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseHeader {
    pub params: Bm25Params,
    pub avg_len: f64,
    pub doc_lengths: BTreeMap<String, u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PostingLine {
    token: String,
    postings: Vec<(String, u32)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphManifest {
    pub extractor: String,
    pub embedder: String,
    pub dimension: usize,
    pub entities: usize,
    pub relations: usize,
    #[serde(default)]
    pub stats: BuildStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IntentFile {
    embedder: String,
    store: IntentStore,
}

pub fn load_chunk_store(dir: &Path) -> Result<ChunkStore> {
    let manifest_path = dir.join(CHUNKS_MANIFEST);
    let manifest: ChunkManifest = io::read_json(&manifest_path)?;
    let chunks: Vec<Chunk> = io::read_jsonl(&dir.join(CHUNKS))?;
    if chunks.len() != manifest.chunk_count {
        return Err(Error::format(
            &manifest_path,
            format!("manifest lists {} chunks, {} found", manifest.chunk_count, chunks.len()),
        ));
    }
    Ok(ChunkStore::from_parts(manifest.splitter, manifest.documents, chunks)?)
}

pub fn save_chunk_store(dir: &Path, store: &ChunkStore) -> Result<()> {
    io::write_jsonl(&dir.join(CHUNKS), store.chunks())?;
    io::write_json(
        &dir.join(CHUNKS_MANIFEST),
        &ChunkManifest {
            splitter: store.config().clone(),
            documents: store.documents().to_vec(),
            chunk_count: store.len(),
        },
    )
}

/// Ingests `docs` into the store at `dir`, creating it with `splitter` when
/// absent. An existing store keeps its own splitter config.
pub fn ingest_into_dir(dir: &Path, docs: &[Document], splitter: SplitterConfig) -> Result<IngestSummary> {
    let mut store = if dir.join(CHUNKS_MANIFEST).exists() {
        let store = load_chunk_store(dir)?;
        if *store.config() != splitter {
            return Err(Error::format(
                &dir.join(CHUNKS_MANIFEST),
                "existing store was split with a different splitter config",
            ));
        }
        store
    } else {
        ChunkStore::new(splitter)?
    };
    let summary = kgrag_core::ingest(docs, &mut store)?;
    save_chunk_store(dir, &store)?;
    Ok(summary)
}

/// Embeds `texts` in batches, returning one vector per text.
pub fn embed_all(embedder: &dyn Embedder, texts: &[String]) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(texts.len());
    for batch in texts.chunks(EMBED_BATCH) {
        let resp = embedder.embed(batch)?;
        if resp.vectors.len() != batch.len() {
            return Err(kgrag_core::BackendError::Malformed("vector count differs from input count".into()).into());
        }
        out.extend(resp.vectors);
    }
    Ok(out)
}

/// Runs extraction over `chunks` on up to `threads` workers and returns the
/// results in chunk order.
pub fn extract_parallel(chunks: &[Chunk], extractor: &Extractor<'_>, threads: usize) -> Result<Vec<Extraction>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<std::result::Result<Extraction, GraphError>>>> =
        Mutex::new((0..chunks.len()).map(|_| None).collect());
    thread::scope(|s| {
        for _ in 0..threads.clamp(1, chunks.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= chunks.len() {
                    break;
                }
                let result = extract_graph(&chunks[i], extractor);
                slots.lock().unwrap()[i] = Some(result);
            });
        }
    });
    slots.into_inner().unwrap().into_iter().map(|r| r.expect("every chunk extracted").map_err(Error::from)).collect()
}

/// Everything a query needs, loaded or freshly built.
#[derive(Debug, Clone, PartialEq)]
pub struct Workspace {
    pub store: ChunkStore,
    pub dense: DenseIndex,
    pub sparse: SparseIndex,
    pub graph: KnowledgeGraph,
    pub intents: IntentStore,
    pub embedder_id: String,
    pub graph_manifest: GraphManifest,
}

pub struct BuildOptions<'a> {
    pub extractor: Extractor<'a>,
    pub intents: Vec<(String, Vec<String>)>,
    pub bm25: Bm25Params,
    pub threads: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub chunks: usize,
    pub entities: usize,
    pub relations: usize,
}

impl Workspace {
    /// Builds every index over `store`. Extraction may run in parallel; the
    /// graph is folded in chunk order so the result does not depend on it.
    pub fn build(store: ChunkStore, embedder: &dyn Embedder, opts: &BuildOptions<'_>) -> Result<Self> {
        let texts: Vec<String> = store.chunks().iter().map(|c| c.text.clone()).collect();
        let vectors = embed_all(embedder, &texts)?;
        let mut dense = DenseIndex::new(embedder.dimension());
        for (chunk, v) in store.chunks().iter().zip(vectors) {
            dense.insert(chunk.chunk_id.clone(), v)?;
        }
        let sparse =
            SparseIndex::build(store.chunks().iter().map(|c| (c.chunk_id.as_str(), c.text.as_str())), opts.bm25);

        let mut graph = KnowledgeGraph::new();
        let mut stats = BuildStats::default();
        for extraction in extract_parallel(store.chunks(), &opts.extractor, opts.threads)? {
            stats.records += extraction.records.len();
            stats.skipped_lines += extraction.skipped_lines;
            stats.skipped_records += graph.upsert_records(&extraction.records, embedder)?.skipped;
        }
        graph.check_invariants()?;
        graph.check_provenance(&store)?;

        let intents =
            if opts.intents.is_empty() { IntentStore::default() } else { IntentStore::build(&opts.intents, embedder)? };
        let embedder_id = embedder.id();
        let graph_manifest = GraphManifest {
            extractor: opts.extractor.kind().to_string(),
            embedder: embedder_id.clone(),
            dimension: embedder.dimension(),
            entities: graph.entities().len(),
            relations: graph.relations().len(),
            stats,
        };
        Ok(Workspace { store, dense, sparse, graph, intents, embedder_id, graph_manifest })
    }

    pub fn indices(&self) -> Indices<'_> {
        Indices {
            store: &self.store,
            dense: &self.dense,
            sparse: &self.sparse,
            graph: &self.graph,
            intents: &self.intents,
        }
    }

    pub fn counts(&self) -> Counts {
        Counts {
            chunks: self.store.len(),
            entities: self.graph.entities().len(),
            relations: self.graph.relations().len(),
        }
    }

    /// Queries must be embedded by the model the indices were built with.
    pub fn check_embedder(&self, embedder: &dyn Embedder) -> Result<()> {
        if embedder.id() != self.embedder_id || embedder.dimension() != self.dense.dimension() {
            return Err(Error::Usage(format!(
                "indices were built with embedder {} (d={}), but the configured embedder is {} (d={})",
                self.embedder_id,
                self.dense.dimension(),
                embedder.id(),
                embedder.dimension()
            )));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_chunk_store(dir, &self.store)?;

        let header = DenseHeader {
            dimension: self.dense.dimension(),
            embedder: self.embedder_id.clone(),
            ids: self.dense.ids().to_vec(),
        };
        let mut bytes = Vec::with_capacity(self.dense.len() * self.dense.dimension() * 4);
        for (_, row) in self.dense.rows() {
            for x in row {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        io::write_json(&dir.join(DENSE_HEADER), &header)?;
        io::write_bytes(&dir.join(DENSE_DATA), &bytes)?;

        io::write_json(
            &dir.join(SPARSE_HEADER),
            &SparseHeader {
                params: self.sparse.params,
                avg_len: self.sparse.avg_len,
                doc_lengths: self.sparse.doc_lengths.clone(),
            },
        )?;
        io::write_jsonl(
            &dir.join(SPARSE_POSTINGS),
            self.sparse
                .postings
                .iter()
                .map(|(token, postings)| PostingLine { token: token.clone(), postings: postings.clone() }),
        )?;

        io::write_jsonl(&dir.join(ENTITIES), self.graph.entities().values())?;
        io::write_jsonl(&dir.join(RELATIONS), self.graph.relations().values())?;
        io::write_json(&dir.join(GRAPH_MANIFEST), &self.graph_manifest)?;
        io::write_json(
            &dir.join(INTENTS),
            &IntentFile { embedder: self.embedder_id.clone(), store: self.intents.clone() },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let store = load_chunk_store(dir)?;

        let header_path = dir.join(DENSE_HEADER);
        let header: DenseHeader = io::read_json(&header_path)?;
        let data_path = dir.join(DENSE_DATA);
        let bytes = std::fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
        if header.dimension == 0 || bytes.len() != header.ids.len() * header.dimension * 4 {
            return Err(Error::format(
                &data_path,
                format!(
                    "expected {} rows of dimension {}, found {} bytes",
                    header.ids.len(),
                    header.dimension,
                    bytes.len()
                ),
            ));
        }
        let mut dense = DenseIndex::new(header.dimension);
        for (id, row) in header.ids.iter().zip(bytes.chunks_exact(header.dimension * 4)) {
            let v = row.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            dense.insert(id.clone(), v).map_err(|e| Error::format(&data_path, e.to_string()))?;
        }
        if let Some(id) = store.chunks().iter().map(|c| &c.chunk_id).find(|id| dense.vector(id).is_none()) {
            return Err(Error::format(&data_path, format!("chunk {id} has no vector")));
        }

        let sparse_header: SparseHeader = io::read_json(&dir.join(SPARSE_HEADER))?;
        let postings: Vec<PostingLine> = io::read_jsonl(&dir.join(SPARSE_POSTINGS))?;
        let sparse = SparseIndex {
            postings: postings.into_iter().map(|p| (p.token, p.postings)).collect(),
            doc_lengths: sparse_header.doc_lengths,
            avg_len: sparse_header.avg_len,
            params: sparse_header.params,
        };
        sparse.check().map_err(|m| Error::format(&dir.join(SPARSE_POSTINGS), m))?;

        let manifest_path = dir.join(GRAPH_MANIFEST);
        let graph_manifest: GraphManifest = io::read_json(&manifest_path)?;
        let entities: Vec<Entity> = io::read_jsonl(&dir.join(ENTITIES))?;
        let relations: Vec<Relation> = io::read_jsonl(&dir.join(RELATIONS))?;
        let graph = KnowledgeGraph::from_parts(entities, relations)?;
        if graph.entities().len() != graph_manifest.entities || graph.relations().len() != graph_manifest.relations {
            return Err(Error::format(&manifest_path, "entity or relation count differs from the manifest"));
        }
        graph.check_provenance(&store)?;
        if graph_manifest.embedder != header.embedder {
            return Err(Error::format(&manifest_path, "graph and dense index were built with different embedders"));
        }

        let intents: IntentFile = io::read_json(&dir.join(INTENTS))?;
        if intents.embedder != header.embedder && !intents.store.is_empty() {
            return Err(Error::format(&dir.join(INTENTS), "intent store was built with a different embedder"));
        }
        Ok(Workspace {
            store,
            dense,
            sparse,
            graph,
            intents: intents.store,
            embedder_id: header.embedder,
            graph_manifest,
        })
    }
}
