//! On-disk layout of a built knowledge store:
//!
//! ```text
//! <dir>/chunks.jsonl     {"id","title","text"} per line
//! <dir>/triplets.jsonl   {"head","relation","tail","source_chunk_id"} per line
//! <dir>/adjacency.bin    "KAGADJ01" | sha256(triplets.jsonl) | u32 n | n × (u32 len, len × u32)
//! ```
//!
//! The adjacency snapshot is only trusted when its checksum matches the
//! triplets file and its lists are in range; otherwise it is rebuilt.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ingest_chunks, ChunkCorpus, ChunkRecord, CorpusError, KgBuilder, KnowledgeGraphIndex, Triplet, TripletId};
use crate::text::Tokenizer;

pub const CHUNKS_FILE: &str = "chunks.jsonl";
pub const TRIPLETS_FILE: &str = "triplets.jsonl";
pub const ADJACENCY_FILE: &str = "adjacency.bin";
const MAGIC: &[u8; 8] = b"KAGADJ01";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SnapshotStatus {
    Loaded,
    Rebuilt(String),
}

#[derive(Debug)]
pub struct Store {
    pub corpus: ChunkCorpus,
    pub kg: KnowledgeGraphIndex,
    pub snapshot: SnapshotStatus,
}

fn io_err(path: &Path, e: std::io::Error) -> CorpusError {
    CorpusError::Io {
        path: path.display().to_string(),
        source: e,
    }
}

/// Reads a triplets file; blank lines skipped, errors carry 1-based lines.
pub fn read_triplets<R: BufRead>(reader: R) -> Result<Vec<Triplet>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CorpusError::Io {
            path: format!("<triplets line {}>", i + 1),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

fn triplets_bytes(kg: &KnowledgeGraphIndex) -> Vec<u8> {
    let mut buf = Vec::new();
    for t in kg.triplets() {
        serde_json::to_writer(&mut buf, t).expect("triplet serializes");
        buf.push(b'\n');
    }
    buf
}

fn encode_adjacency(checksum: &[u8], adjacency: &[Vec<TripletId>]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(44 + adjacency.len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(checksum);
    buf.extend_from_slice(&(adjacency.len() as u32).to_le_bytes());
    for list in adjacency {
        buf.extend_from_slice(&(list.len() as u32).to_le_bytes());
        for id in list {
            buf.extend_from_slice(&id.0.to_le_bytes());
        }
    }
    buf
}

fn decode_adjacency(
    bytes: &[u8],
    checksum: &[u8],
    entities: usize,
    triplets: usize,
) -> Result<Vec<Vec<TripletId>>, String> {
    let mut rest = bytes
        .strip_prefix(MAGIC.as_slice())
        .ok_or("bad magic")?;
    let (sum, tail) = rest.split_at_checked(32).ok_or("truncated header")?;
    if sum != checksum {
        return Err("checksum mismatch".into());
    }
    rest = tail;
    let mut next = || -> Result<u32, String> {
        let (n, tail) = rest.split_at_checked(4).ok_or("truncated")?;
        rest = tail;
        Ok(u32::from_le_bytes(n.try_into().unwrap()))
    };
    let n = next()? as usize;
    if n != entities {
        return Err(format!("entity count {n}, expected {entities}"));
    }
    let mut adj = Vec::with_capacity(n);
    for _ in 0..n {
        let len = next()? as usize;
        let mut list = Vec::with_capacity(len.min(triplets));
        for _ in 0..len {
            let id = next()?;
            if id as usize >= triplets {
                return Err(format!("triplet id {id} out of range"));
            }
            list.push(TripletId(id));
        }
        adj.push(list);
    }
    Ok(adj)
}

pub fn save(dir: &Path, corpus: &ChunkCorpus, kg: &KnowledgeGraphIndex) -> Result<(), CorpusError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let chunks_path = dir.join(CHUNKS_FILE);
    let mut w = BufWriter::new(File::create(&chunks_path).map_err(|e| io_err(&chunks_path, e))?);
    for c in corpus.chunks() {
        let rec = ChunkRecord {
            id: c.id.clone(),
            title: c.title.clone(),
            text: c.text.clone(),
        };
        serde_json::to_writer(&mut w, &rec).expect("chunk serializes");
        w.write_all(b"\n").map_err(|e| io_err(&chunks_path, e))?;
    }
    w.flush().map_err(|e| io_err(&chunks_path, e))?;

    let trip = triplets_bytes(kg);
    let trip_path = dir.join(TRIPLETS_FILE);
    fs::write(&trip_path, &trip).map_err(|e| io_err(&trip_path, e))?;

    let adj_path = dir.join(ADJACENCY_FILE);
    let checksum = Sha256::digest(&trip);
    fs::write(&adj_path, encode_adjacency(&checksum, kg.adjacency())).map_err(|e| io_err(&adj_path, e))?;
    Ok(())
}

pub fn load(dir: &Path, tokenizer: &dyn Tokenizer) -> Result<Store, CorpusError> {
    let chunks_path = dir.join(CHUNKS_FILE);
    let corpus = ingest_chunks(
        BufReader::new(File::open(&chunks_path).map_err(|e| io_err(&chunks_path, e))?),
        tokenizer,
    )?;
    let trip_path = dir.join(TRIPLETS_FILE);
    let trip_bytes = fs::read(&trip_path).map_err(|e| io_err(&trip_path, e))?;
    let triplets = read_triplets(trip_bytes.as_slice())?;
    let mut builder = KgBuilder::default();
    for t in triplets {
        builder.add(t, Some(&corpus))?;
    }
    let mut kg = builder.build();

    let checksum = Sha256::digest(&trip_bytes);
    let snapshot = match fs::read(dir.join(ADJACENCY_FILE)) {
        Ok(bytes) => match decode_adjacency(&bytes, &checksum, kg.entity_count(), kg.triplets().len()) {
            Ok(adj) => {
                kg.replace_adjacency(adj);
                SnapshotStatus::Loaded
            }
            Err(reason) => SnapshotStatus::Rebuilt(reason),
        },
        Err(e) => SnapshotStatus::Rebuilt(e.to_string()),
    };
    if let SnapshotStatus::Rebuilt(reason) = &snapshot {
        log::warn!("adjacency snapshot rebuilt: {reason}");
    }
    Ok(Store { corpus, kg, snapshot })
}
