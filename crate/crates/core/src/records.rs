//! Prompt corpus ingestion and metrics JSONL.
//!
//! Metrics schema, one JSON object per line, fields in this order:
//! `prompt_id` (string), `method` (string), `config` (object),
//! `output_tokens` (array of ids), `tau` (number), `model_calls` (integer),
//! `accepted_histogram` (object: accepted-draft-count -> number of calls),
//! `wall_nanos` (integer, the only nondeterministic field).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EspError, Result};
use crate::lm::TokenId;
use crate::tokenizer::encode;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptRecord {
    pub id: String,
    pub text: String,
    pub tokens: Vec<TokenId>,
}

impl PromptRecord {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = encode(&text);
        PromptRecord {
            id: id.into(),
            text,
            tokens,
        }
    }
}

#[derive(Deserialize)]
struct PromptLine {
    id: String,
    text: String,
}

/// Parse prompts from JSONL (`{"id": .., "text": ..}` per line) or plain
/// text (one prompt per line, id = 1-based line number). The format is
/// JSONL when the first non-empty line starts with `{`. Empty lines are
/// skipped.
pub fn parse_prompts(content: &str, origin: &Path) -> Result<Vec<PromptRecord>> {
    let jsonl = content
        .lines()
        .find(|l| !l.trim().is_empty())
        .is_some_and(|l| l.trim_start().starts_with('{'));
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if jsonl {
            let p: PromptLine = serde_json::from_str(line).map_err(|e| EspError::MalformedLine {
                path: origin.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            out.push(PromptRecord::new(p.id, p.text));
        } else {
            out.push(PromptRecord::new((i + 1).to_string(), line));
        }
    }
    Ok(out)
}

pub fn load_prompts(path: impl AsRef<Path>) -> Result<Vec<PromptRecord>> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| EspError::io(path, e))?;
    parse_prompts(&content, path)
}

const TOY_CORPUS: &str = include_str!("../../../data/prompts.jsonl");

/// The seeded 50-prompt corpus shipped with the repository.
pub fn toy_corpus() -> Vec<PromptRecord> {
    parse_prompts(TOY_CORPUS, Path::new("data/prompts.jsonl")).expect("bundled corpus parses")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub prompt_id: String,
    pub method: String,
    pub config: serde_json::Value,
    pub output_tokens: Vec<TokenId>,
    pub tau: f64,
    pub model_calls: u64,
    pub accepted_histogram: BTreeMap<usize, u64>,
    pub wall_nanos: u64,
}

impl RunRecord {
    pub fn emitted(&self) -> u64 {
        self.output_tokens.len() as u64
    }

    /// Copy with the wall-clock field zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> RunRecord {
        RunRecord {
            wall_nanos: 0,
            ..self.clone()
        }
    }
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(items: &[T], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_jsonl(items)?).map_err(|e| EspError::io(path, e))
}

/// Append records to `path`, creating it if needed.
pub fn append_jsonl<T: Serialize>(items: &[T], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| EspError::io(path, e))?;
    f.write_all(to_jsonl(items)?.as_bytes())
        .map_err(|e| EspError::io(path, e))
}

pub fn write_metrics(records: &[RunRecord], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(records, path)
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<RunRecord>> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| EspError::io(path, e))?;
    content
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| EspError::MalformedLine {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
