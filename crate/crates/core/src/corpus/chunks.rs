use std::collections::HashMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use super::CorpusError;
use crate::text::Tokenizer;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub id: String,
    pub title: String,
    pub text: String,
    pub token_count: usize,
}

/// On-disk chunk record: one JSON object per line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChunkRecord {
    pub id: String,
    pub title: String,
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChunkCorpus {
    chunks: Vec<Chunk>,
    by_id: HashMap<String, usize>,
}

impl ChunkCorpus {
    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Chunk> {
        self.by_id.get(id).map(|&i| &self.chunks[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    /// Chunks in ingestion order.
    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn push(
        &mut self,
        record: ChunkRecord,
        tokenizer: &dyn Tokenizer,
    ) -> Result<(), CorpusError> {
        if self.by_id.contains_key(&record.id) {
            return Err(CorpusError::DuplicateId {
                id: record.id,
                line: self.chunks.len() + 1,
            });
        }
        let token_count = tokenizer.count(&record.text);
        self.by_id.insert(record.id.clone(), self.chunks.len());
        self.chunks.push(Chunk {
            id: record.id,
            title: record.title,
            text: record.text,
            token_count,
        });
        Ok(())
    }

    pub fn from_records(
        records: impl IntoIterator<Item = ChunkRecord>,
        tokenizer: &dyn Tokenizer,
    ) -> Result<Self, CorpusError> {
        let mut corpus = Self::default();
        for r in records {
            corpus.push(r, tokenizer)?;
        }
        Ok(corpus)
    }
}

/// Reads line-delimited chunk records. Blank lines are skipped; line numbers
/// in errors are 1-based physical lines.
pub fn ingest_chunks<R: BufRead>(
    reader: R,
    tokenizer: &dyn Tokenizer,
) -> Result<ChunkCorpus, CorpusError> {
    let mut corpus = ChunkCorpus::default();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| CorpusError::Io {
            path: format!("<stream line {lineno}>"),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ChunkRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                line: lineno,
                reason: e.to_string(),
            })?;
        if record.id.is_empty() {
            return Err(CorpusError::Malformed {
                line: lineno,
                reason: "empty id".into(),
            });
        }
        if record.text.trim().is_empty() {
            return Err(CorpusError::Malformed {
                line: lineno,
                reason: format!("chunk {} has empty text", record.id),
            });
        }
        corpus.push(record, tokenizer).map_err(|e| match e {
            CorpusError::DuplicateId { id, .. } => CorpusError::DuplicateId { id, line: lineno },
            other => other,
        })?;
    }
    Ok(corpus)
}
