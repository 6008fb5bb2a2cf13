//! Full-fidelity binary snapshot.
//!
//! `TMSNAP01` followed by four sections, each `[tag 4][len u64 LE][crc32 u32 LE][bytes]`:
//!
//! * `META`: JSON [`SnapshotMeta`]
//! * `NODS`: JSON array of every non-root node, tombstones included, without embeddings
//! * `EMBD`: the embeddings of `NODS` in order, `dim` little-endian f64 each
//! * `EDGE`: `(parent, child)` u32 LE pairs; 0 is the root, `i + 1` is `NODS[i]`

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::StorageError;
use crate::graph::{GraphConfig, MemoryGraph};
use crate::index::Embedding;
use crate::model::{Edge, MemoryNode, NodeId};

pub const MAGIC: &[u8; 8] = b"TMSNAP01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub dim: usize,
    /// Last log sequence number folded into this snapshot.
    pub lsn: u64,
    pub node_count: usize,
    pub edge_count: usize,
}

fn section(out: &mut Vec<u8>, tag: &[u8; 4], body: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(body).to_le_bytes());
    out.extend_from_slice(body);
}

pub fn encode(graph: &MemoryGraph, lsn: u64) -> Vec<u8> {
    let nodes: Vec<&MemoryNode> = graph.nodes_by_time().filter(|n| !n.is_root()).collect();
    let mut slot: HashMap<&NodeId, u32> = HashMap::new();
    slot.insert(graph.root_id(), 0);
    for (i, n) in nodes.iter().enumerate() {
        slot.insert(&n.id, i as u32 + 1);
    }
    let edges = graph.edges();
    let meta = SnapshotMeta { dim: graph.dim(), lsn, node_count: nodes.len(), edge_count: edges.len() };

    let bare: Vec<serde_json::Value> = nodes
        .iter()
        .map(|n| {
            let mut v = serde_json::to_value(n).expect("node serializes");
            v.as_object_mut().expect("node is an object").remove("embedding");
            v
        })
        .collect();
    let mut embd = Vec::with_capacity(nodes.len() * graph.dim() * 8);
    for n in &nodes {
        for x in n.embedding.values() {
            embd.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut edge_bytes = Vec::with_capacity(edges.len() * 8);
    for e in &edges {
        edge_bytes.extend_from_slice(&slot[&e.parent].to_le_bytes());
        edge_bytes.extend_from_slice(&slot[&e.child].to_le_bytes());
    }

    let mut out = MAGIC.to_vec();
    section(&mut out, b"META", &serde_json::to_vec(&meta).expect("meta serializes"));
    section(&mut out, b"NODS", &serde_json::to_vec(&bare).expect("nodes serialize"));
    section(&mut out, b"EMBD", &embd);
    section(&mut out, b"EDGE", &edge_bytes);
    out
}

fn take_section<'a>(bytes: &'a [u8], pos: &mut usize, tag: &[u8; 4]) -> Result<&'a [u8], StorageError> {
    let name = String::from_utf8_lossy(tag).into_owned();
    if bytes.len() < *pos + 16 {
        return Err(StorageError::Corrupt(format!("snapshot truncated before section {name}")));
    }
    if &bytes[*pos..*pos + 4] != tag {
        return Err(StorageError::Corrupt(format!("snapshot expected section {name} at byte {pos}")));
    }
    let len = u64::from_le_bytes(bytes[*pos + 4..*pos + 12].try_into().unwrap()) as usize;
    let crc = u32::from_le_bytes(bytes[*pos + 12..*pos + 16].try_into().unwrap());
    let start = *pos + 16;
    if bytes.len() - start < len {
        return Err(StorageError::Corrupt(format!("snapshot section {name} truncated")));
    }
    let body = &bytes[start..start + len];
    if crc32fast::hash(body) != crc {
        return Err(StorageError::Checksum { what: format!("snapshot section {name}"), offset: *pos as u64 });
    }
    *pos = start + len;
    Ok(body)
}

pub fn decode(bytes: &[u8], config: GraphConfig) -> Result<(MemoryGraph, SnapshotMeta), StorageError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(StorageError::Corrupt("not a snapshot file (bad magic)".into()));
    }
    let mut pos = MAGIC.len();
    let corrupt = |what: &str, e: serde_json::Error| StorageError::Corrupt(format!("snapshot {what}: {e}"));
    let meta: SnapshotMeta =
        serde_json::from_slice(take_section(bytes, &mut pos, b"META")?).map_err(|e| corrupt("META", e))?;
    let bare: Vec<serde_json::Value> =
        serde_json::from_slice(take_section(bytes, &mut pos, b"NODS")?).map_err(|e| corrupt("NODS", e))?;
    let embd = take_section(bytes, &mut pos, b"EMBD")?;
    let edge_bytes = take_section(bytes, &mut pos, b"EDGE")?;
    if bare.len() != meta.node_count || embd.len() != meta.node_count * meta.dim * 8 || edge_bytes.len() != meta.edge_count * 8 {
        return Err(StorageError::Corrupt("snapshot section sizes disagree with META".into()));
    }

    let mut nodes = Vec::with_capacity(bare.len());
    for (i, mut v) in bare.into_iter().enumerate() {
        let values: Vec<f64> = embd[i * meta.dim * 8..(i + 1) * meta.dim * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        v.as_object_mut()
            .ok_or_else(|| StorageError::Corrupt(format!("snapshot node {i} is not an object")))?
            .insert("embedding".into(), serde_json::to_value(&values).expect("floats serialize"));
        let node: MemoryNode = serde_json::from_value(v).map_err(|e| corrupt("node", e))?;
        debug_assert_eq!(node.embedding, Embedding::from_vec(values));
        nodes.push(node);
    }
    let id_at = |s: u32| -> Result<NodeId, StorageError> {
        match s {
            0 => Ok(NodeId::root()),
            s => nodes
                .get(s as usize - 1)
                .map(|n| n.id.clone())
                .ok_or_else(|| StorageError::Corrupt(format!("snapshot edge endpoint {s} out of range"))),
        }
    };
    let mut edges = Vec::with_capacity(meta.edge_count);
    for c in edge_bytes.chunks_exact(8) {
        let p = u32::from_le_bytes(c[..4].try_into().unwrap());
        let ch = u32::from_le_bytes(c[4..].try_into().unwrap());
        edges.push(Edge { parent: id_at(p)?, child: id_at(ch)? });
    }
    let graph = MemoryGraph::from_parts(meta.dim, config, nodes, &edges)?;
    Ok((graph, meta))
}

/// Writes atomically via a temporary file and rename.
pub fn write(path: &Path, graph: &MemoryGraph, lsn: u64) -> Result<SnapshotMeta, StorageError> {
    let bytes = encode(graph, lsn);
    let tmp = path.with_extension("tmp");
    {
        use std::io::Write;
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(SnapshotMeta { dim: graph.dim(), lsn, node_count: graph.nodes().count() - 1, edge_count: graph.edge_count() })
}

pub fn read(path: &Path, config: GraphConfig) -> Result<(MemoryGraph, SnapshotMeta), StorageError> {
    decode(&std::fs::read(path)?, config)
}
