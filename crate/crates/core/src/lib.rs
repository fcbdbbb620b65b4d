//! Core of a graph-based retrieval-augmented question answering engine for
//! customer support.
//!
//! The crate is `no_std` (it needs `alloc`): it holds the algorithms and
//! data model only. File formats, HTTP backends, the CLI and the query
//! service live in the `kgrag` crate.
//!
//! - [`corpus`]: documents, recursive splitting, the chunk store
//! - [`kg`]: extraction records, gazetteer/LLM extractors, the knowledge graph
//! - [`retrieval`]: dense, BM25 and graph retrieval, reciprocal rank fusion
//! - [`stages`]: intent KNN, rewriting, keyword augmentation, sub-queries,
//!   reranking and context rendering
//! - [`pipeline`]: configuration, presets and the traced `answer` orchestrator
//! - [`eval`]: recall, similarity buckets and ablation reports
//! - [`backend`]: chat/embedding traits and the deterministic stubs

#![no_std]

extern crate alloc;

pub mod backend;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod kg;
pub mod pipeline;
pub mod prompts;
pub mod retrieval;
pub mod stages;
pub mod text;

pub use backend::{
    BackendConfig, BackendKind, ChatBackend, ChatRequest, ChatResponse, Embedder, Message, Purpose, StubChat,
    StubEmbedder,
};
pub use corpus::{ingest, split_recursive, Chunk, ChunkStore, Document, IngestSummary, SplitterConfig};
pub use error::{BackendError, ConfigError, CorpusError, GraphError, PipelineError, RetrievalError};
pub use eval::{AblationReport, AblationRow, EvalRecord};
pub use kg::{build_graph, Entity, ExtractionRecord, Extractor, Gazetteer, KnowledgeGraph, Relation};
pub use pipeline::{preset, Answer, Engine, PipelineConfig, Preset, QueryTrace};
pub use prompts::PromptSet;
pub use retrieval::{DenseIndex, RankedList, Scored, SparseIndex};
pub use stages::{ContextBundle, IntentStore, QueryPlan};
pub use text::LanguageTag;
