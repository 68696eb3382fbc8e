//! Chunk corpus and knowledge-graph store.

mod chunks;
pub mod extract;
mod graph;
pub mod store;

use thiserror::Error;

pub use chunks::{ingest_chunks, Chunk, ChunkCorpus, ChunkRecord};
pub use extract::{extract_triplets, Extraction, RuleExtractor, TripletExtractor};
pub use graph::{GraphStats, KgBuilder, KnowledgeGraphIndex, Triplet, TripletId};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("duplicate chunk id {id:?} at line {line}")]
    DuplicateId { id: String, line: usize },
    #[error("malformed record at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("invalid triplet: {0}")]
    InvalidTriplet(String),
    #[error("triplet references unknown chunk {0:?}")]
    UnknownSourceChunk(String),
    #[error("extraction failed for chunk {chunk_id:?}: {message}")]
    Extraction { chunk_id: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Extracts triplets from every chunk and builds the graph. Returns the index
/// and the total number of skipped extractor items.
pub fn build_knowledge_graph(
    corpus: &ChunkCorpus,
    extractor: &dyn TripletExtractor,
) -> Result<(KnowledgeGraphIndex, usize), CorpusError> {
    let mut builder = KgBuilder::default();
    let mut skipped = 0;
    for chunk in corpus.chunks() {
        let ex = extract_triplets(chunk, extractor)?;
        skipped += ex.skipped;
        for t in ex.triplets {
            builder.add(t, Some(corpus))?;
        }
    }
    Ok((builder.build(), skipped))
}
