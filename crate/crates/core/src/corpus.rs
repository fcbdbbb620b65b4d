//! Documents, recursive character splitting and the in-memory chunk store.
//!
//! All lengths and spans are measured in Unicode scalar values (chars), never
//! bytes.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::CorpusError;
use crate::text::{detect_language, fnv1a64, LanguageTag};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
    pub lang: LanguageTag,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl Document {
    /// Builds a document, tagging the language when none is given.
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>, lang: Option<LanguageTag>) -> Self {
        let text = text.into();
        let lang = lang.unwrap_or_else(|| detect_language(&text));
        Document { doc_id: doc_id.into(), text, lang, meta: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub ordinal: usize,
    pub text: String,
    pub lang: LanguageTag,
    /// Half-open `(start, end)` char offsets into the parent text.
    pub char_span: (usize, usize),
}

/// Chunk ids are derived, never random.
pub fn chunk_id(doc_id: &str, ordinal: usize) -> String {
    format!("{doc_id}#{ordinal}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitterConfig {
    pub separators: Vec<String>,
    pub max_chars: usize,
    pub overlap_chars: usize,
}

impl Default for SplitterConfig {
    fn default() -> Self {
        SplitterConfig {
            separators: ["\n\n", "\n", "。", ".", " "].iter().map(|s| s.to_string()).collect(),
            max_chars: 800,
            overlap_chars: 80,
        }
    }
}

impl SplitterConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.separators.is_empty() {
            return Err(CorpusError::InvalidConfig("separator list is empty".into()));
        }
        if self.separators.iter().any(String::is_empty) {
            return Err(CorpusError::InvalidConfig("separators must be non-empty strings".into()));
        }
        if self.max_chars == 0 {
            return Err(CorpusError::InvalidConfig("max_chars must be positive".into()));
        }
        if self.overlap_chars >= self.max_chars {
            return Err(CorpusError::InvalidConfig(format!(
                "overlap_chars ({}) must be smaller than max_chars ({})",
                self.overlap_chars, self.max_chars
            )));
        }
        Ok(())
    }
}

/// Splits `text` into char spans of at most `limit` chars. Spans are
/// contiguous and cover the whole input; separators stay attached to the end
/// of the piece they terminate.
fn split_spans(chars: &[char], separators: &[Vec<char>], limit: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    split_range(chars, 0, chars.len(), separators, limit, &mut out);
    out
}

fn split_range(
    chars: &[char],
    start: usize,
    end: usize,
    separators: &[Vec<char>],
    limit: usize,
    out: &mut Vec<(usize, usize)>,
) {
    if end - start <= limit {
        if end > start {
            out.push((start, end));
        }
        return;
    }
    let window = &chars[start..end];
    let Some(level) = separators.iter().position(|sep| find(window, sep, 0).is_some()) else {
        let mut at = start;
        while at < end {
            let stop = (at + limit).min(end);
            out.push((at, stop));
            at = stop;
        }
        return;
    };
    let sep = &separators[level];
    let rest = &separators[level + 1..];

    // Pieces ending just after each separator occurrence.
    let mut pieces = Vec::new();
    let mut piece_start = 0;
    let mut from = 0;
    while let Some(pos) = find(window, sep, from) {
        let piece_end = pos + sep.len();
        pieces.push((start + piece_start, start + piece_end));
        piece_start = piece_end;
        from = piece_end;
    }
    if piece_start < window.len() {
        pieces.push((start + piece_start, end));
    }

    let mut current: Option<(usize, usize)> = None;
    for (ps, pe) in pieces {
        if pe - ps > limit {
            if let Some(span) = current.take() {
                out.push(span);
            }
            split_range(chars, ps, pe, rest, limit, out);
            continue;
        }
        current = match current {
            Some((cs, _)) if pe - cs <= limit => Some((cs, pe)),
            Some(span) => {
                out.push(span);
                Some((ps, pe))
            }
            None => Some((ps, pe)),
        };
    }
    if let Some(span) = current {
        out.push(span);
    }
}

fn find(haystack: &[char], needle: &[char], from: usize) -> Option<usize> {
    if needle.is_empty() || haystack.len() < needle.len() {
        return None;
    }
    (from..=haystack.len() - needle.len()).find(|&i| haystack[i..i + needle.len()] == *needle)
}

/// Recursive character splitting of one text. Chunk ids are left empty; use
/// [`split_document`] to get fully-populated chunks.
pub fn split_recursive(text: &str, cfg: &SplitterConfig) -> Result<Vec<Chunk>, CorpusError> {
    split_with_ids("", text, LanguageTag::Other, cfg)
}

/// Splits a document into chunks with derived ids and inherited language.
pub fn split_document(doc: &Document, cfg: &SplitterConfig) -> Result<Vec<Chunk>, CorpusError> {
    split_with_ids(&doc.doc_id, &doc.text, doc.lang, cfg)
}

fn split_with_ids(
    doc_id: &str,
    text: &str,
    lang: LanguageTag,
    cfg: &SplitterConfig,
) -> Result<Vec<Chunk>, CorpusError> {
    cfg.validate()?;
    if text.is_empty() {
        return Ok(Vec::new());
    }
    let chars: Vec<char> = text.chars().collect();
    let separators: Vec<Vec<char>> = cfg.separators.iter().map(|s| s.chars().collect()).collect();
    let base = split_spans(&chars, &separators, cfg.max_chars - cfg.overlap_chars);

    Ok(base
        .into_iter()
        .enumerate()
        .map(|(ordinal, (start, end))| {
            // Later chunks reach back into their predecessor by the overlap width.
            let start = if ordinal == 0 { start } else { start.saturating_sub(cfg.overlap_chars) };
            Chunk {
                chunk_id: if doc_id.is_empty() { String::new() } else { chunk_id(doc_id, ordinal) },
                doc_id: doc_id.to_string(),
                ordinal,
                text: chars[start..end].iter().collect(),
                lang,
                char_span: (start, end),
            }
        })
        .collect())
}

/// Ingestion record for one document; the fingerprint lets identical
/// re-ingestion be a no-op.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentEntry {
    pub doc_id: String,
    pub lang: LanguageTag,
    pub fingerprint: u64,
    pub chunk_count: usize,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IngestSummary {
    pub documents: usize,
    pub chunks: usize,
}

/// Chunks in ingestion order plus an id index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkStore {
    config: SplitterConfig,
    documents: Vec<DocumentEntry>,
    chunks: Vec<Chunk>,
    by_id: BTreeMap<String, usize>,
}

impl ChunkStore {
    pub fn new(config: SplitterConfig) -> Result<Self, CorpusError> {
        config.validate()?;
        Ok(ChunkStore { config, documents: Vec::new(), chunks: Vec::new(), by_id: BTreeMap::new() })
    }

    /// Rebuilds a store from persisted parts.
    pub fn from_parts(
        config: SplitterConfig,
        documents: Vec<DocumentEntry>,
        chunks: Vec<Chunk>,
    ) -> Result<Self, CorpusError> {
        config.validate()?;
        let mut by_id = BTreeMap::new();
        for (i, chunk) in chunks.iter().enumerate() {
            if by_id.insert(chunk.chunk_id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateChunkId(chunk.chunk_id.clone()));
            }
        }
        Ok(ChunkStore { config, documents, chunks, by_id })
    }

    pub fn config(&self) -> &SplitterConfig {
        &self.config
    }

    pub fn documents(&self) -> &[DocumentEntry] {
        &self.documents
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn get(&self, chunk_id: &str) -> Option<&Chunk> {
        self.by_id.get(chunk_id).map(|&i| &self.chunks[i])
    }

    pub fn contains(&self, chunk_id: &str) -> bool {
        self.by_id.contains_key(chunk_id)
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    fn entry(&self, doc_id: &str) -> Option<&DocumentEntry> {
        self.documents.iter().find(|d| d.doc_id == doc_id)
    }
}

/// Splits and persists documents into `store`.
///
/// The whole batch is validated before anything is written. A document that
/// is byte-identical to one already stored is skipped, so re-ingesting the
/// same set is idempotent; any other doc_id collision rejects the batch.
pub fn ingest(documents: &[Document], store: &mut ChunkStore) -> Result<IngestSummary, CorpusError> {
    let mut seen = BTreeSet::new();
    let mut offenders = BTreeSet::new();
    let mut fresh = Vec::new();
    for doc in documents {
        if doc.doc_id.is_empty() {
            return Err(CorpusError::InvalidDocument { doc_id: String::new(), reason: "empty doc_id".into() });
        }
        if doc.text.is_empty() {
            return Err(CorpusError::InvalidDocument { doc_id: doc.doc_id.clone(), reason: "empty text".into() });
        }
        if !seen.insert(doc.doc_id.as_str()) {
            offenders.insert(doc.doc_id.clone());
            continue;
        }
        let fingerprint = fnv1a64(doc.text.as_bytes());
        match store.entry(&doc.doc_id) {
            Some(existing) if existing.fingerprint == fingerprint && existing.lang == doc.lang => {}
            Some(_) => {
                offenders.insert(doc.doc_id.clone());
            }
            None => fresh.push((doc, fingerprint)),
        }
    }
    if !offenders.is_empty() {
        return Err(CorpusError::DuplicateDocIds(offenders.into_iter().collect()));
    }

    let mut staged = Vec::with_capacity(fresh.len());
    for (doc, fingerprint) in fresh {
        staged.push((doc, fingerprint, split_document(doc, &store.config)?));
    }
    let mut summary = IngestSummary::default();
    for (doc, fingerprint, chunks) in staged {
        summary.documents += 1;
        summary.chunks += chunks.len();
        store.documents.push(DocumentEntry {
            doc_id: doc.doc_id.clone(),
            lang: doc.lang,
            fingerprint,
            chunk_count: chunks.len(),
            meta: doc.meta.clone(),
        });
        for chunk in chunks {
            store.by_id.insert(chunk.chunk_id.clone(), store.chunks.len());
            store.chunks.push(chunk);
        }
    }
    Ok(summary)
}
