//! Readers and writers for the on-disk formats: JSON Lines inputs, pipeline
//! configs and prompt directories.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use kgrag_core::corpus::Document;
use kgrag_core::eval::EvalRecord;
use kgrag_core::kg::Gazetteer;
use kgrag_core::prompts::PROMPT_FILES;
use kgrag_core::text::LanguageTag;
use kgrag_core::{PipelineConfig, PromptSet};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses one JSON value per non-blank line. Errors carry the 1-based line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = read_to_string(path)?;
    parse_jsonl(path, &text)
}

pub fn parse_jsonl<T: DeserializeOwned>(path: &Path, text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut w = BufWriter::new(&mut buf);
        for item in items {
            serde_json::to_writer(&mut w, &item).map_err(|e| Error::format(path, e.to_string()))?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
    }
    write_bytes(path, &buf)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusLine {
    doc_id: String,
    text: String,
    #[serde(default)]
    lang: Option<String>,
    #[serde(default)]
    meta: Option<serde_json::Map<String, serde_json::Value>>,
}

/// Corpus JSON Lines: `{"doc_id", "text", "lang"?, "meta"?}`. A missing
/// language is detected from the text; meta values that are not strings are
/// stored as their JSON text.
pub fn load_corpus(path: &Path) -> Result<Vec<Document>> {
    let text = read_to_string(path)?;
    let mut docs = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let parse_err = |message: String| Error::Parse { path: path.to_path_buf(), line: i + 1, message };
        let raw: CorpusLine = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let lang = match raw.lang.as_deref() {
            None => None,
            Some(tag) => {
                Some(LanguageTag::parse(tag).ok_or_else(|| parse_err(format!("unknown language tag {tag:?}")))?)
            }
        };
        let mut doc = Document::new(raw.doc_id, raw.text, lang);
        if let Some(meta) = raw.meta {
            doc.meta = meta
                .into_iter()
                .map(|(k, v)| match v {
                    serde_json::Value::String(s) => (k, s),
                    other => (k, other.to_string()),
                })
                .collect();
        }
        docs.push(doc);
    }
    Ok(docs)
}

/// Evaluation dataset; records without gold chunk ids are rejected.
pub fn load_dataset(path: &Path) -> Result<Vec<EvalRecord>> {
    let text = read_to_string(path)?;
    let records: Vec<EvalRecord> = parse_jsonl(path, &text)?;
    let lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).map(|(i, _)| i + 1);
    for (record, line) in records.iter().zip(lines) {
        if record.gold_chunk_ids.is_empty() {
            return Err(Error::Parse { path: path.to_path_buf(), line, message: "gold_chunk_ids is empty".into() });
        }
        if record.question.trim().is_empty() {
            return Err(Error::Parse { path: path.to_path_buf(), line, message: "question is empty".into() });
        }
    }
    if records.is_empty() {
        return Err(Error::format(path, "dataset has no records"));
    }
    Ok(records)
}

/// Fails when a gold id is not in `known`.
pub fn check_gold_ids(path: &Path, records: &[EvalRecord], known: impl Fn(&str) -> bool) -> Result<()> {
    let missing: BTreeSet<&str> =
        records.iter().flat_map(|r| r.gold_chunk_ids.iter()).map(String::as_str).filter(|id| !known(id)).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::format(path, format!("gold chunk ids not in the chunk store: {missing:?}")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntentLine {
    pub label: String,
    pub examples: Vec<String>,
}

pub fn load_intents(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let lines: Vec<IntentLine> = read_jsonl(path)?;
    Ok(lines.into_iter().map(|l| (l.label, l.examples)).collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureLine {
    pub prompt_sha256: String,
    pub response: String,
}

/// Stub chat fixtures keyed by prompt hash. Later lines win.
pub fn load_stub_fixtures(path: &Path) -> Result<BTreeMap<String, String>> {
    let lines: Vec<FixtureLine> = read_jsonl(path)?;
    Ok(lines.into_iter().map(|l| (l.prompt_sha256.to_ascii_lowercase(), l.response)).collect())
}

pub fn load_gazetteer(path: &Path) -> Result<Gazetteer> {
    let g = Gazetteer::parse(&read_to_string(path)?);
    if g.is_empty() {
        return Err(Error::format(path, "gazetteer has no terms"));
    }
    Ok(g)
}

/// Pipeline config from a `.toml` file, or JSON for any other extension.
pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = read_to_string(path)?;
    let cfg: PipelineConfig = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?
    } else {
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Default prompts overridden by any `<name>.txt` found in `dir`.
pub fn load_prompts(dir: &Path) -> Result<PromptSet> {
    if !dir.is_dir() {
        return Err(Error::format(dir, "prompt directory does not exist"));
    }
    let mut prompts = PromptSet::default();
    for name in PROMPT_FILES {
        let path = dir.join(format!("{name}.txt"));
        if path.exists() {
            prompts.set(name, &read_to_string(&path)?);
        }
    }
    Ok(prompts)
}
