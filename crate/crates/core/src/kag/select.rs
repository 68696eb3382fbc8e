use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::{Kag, KagError, NodeKind, PprConfig};
use crate::corpus::{Chunk, ChunkCorpus, KnowledgeGraphIndex, Triplet, TripletId};
use crate::retrieval::HitKind;
use crate::text::collapse_whitespace;

/// One selected piece of context, already rendered for the transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextItem {
    pub kind: HitKind,
    pub item_id: String,
    pub text: String,
    #[serde(default)]
    pub score: f64,
}

pub fn render_chunk(chunk: &Chunk) -> String {
    format!("Title: \"{}\" Text: {}", collapse_whitespace(&chunk.title), collapse_whitespace(&chunk.text))
}

pub fn render_triplet(t: &Triplet) -> String {
    format!("Triplet: {}", collapse_whitespace(&t.render()))
}

/// Top `k_f` chunk/triplet nodes by π. Ties: higher relevance-edge weight,
/// then chunks before triplets, then node key.
pub fn select_context(
    graph: &Kag,
    pi: &[f64],
    cfg: &PprConfig,
    corpus: &ChunkCorpus,
    kg: &KnowledgeGraphIndex,
) -> Result<Vec<ContextItem>, KagError> {
    if pi.len() != graph.nodes.len() {
        return Err(KagError::Misaligned {
            expected: graph.nodes.len(),
            got: pi.len(),
        });
    }
    let mut cands: Vec<(usize, f64)> = graph
        .nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| matches!(n.kind, NodeKind::Chunk | NodeKind::Triplet))
        .map(|(i, _)| (i, graph.relevance_weight(i)))
        .collect();
    cands.sort_by(|&(a, ra), &(b, rb)| {
        pi[b]
            .partial_cmp(&pi[a])
            .unwrap_or(Ordering::Equal)
            .then(rb.partial_cmp(&ra).unwrap_or(Ordering::Equal))
            .then(graph.nodes[a].kind.cmp(&graph.nodes[b].kind))
            .then(graph.nodes[a].key.cmp(&graph.nodes[b].key))
    });
    Ok(cands
        .into_iter()
        .take(cfg.k_f)
        .filter_map(|(i, _)| {
            let node = &graph.nodes[i];
            let (kind, text) = match node.kind {
                NodeKind::Chunk => (HitKind::Chunk, render_chunk(corpus.get(&node.payload_ref)?)),
                _ => {
                    let id: TripletId = node.payload_ref.parse().ok()?;
                    (HitKind::Triplet, render_triplet(kg.triplet(id)?))
                }
            };
            Some(ContextItem {
                kind,
                item_id: node.payload_ref.clone(),
                text,
                score: pi[i],
            })
        })
        .collect())
}
