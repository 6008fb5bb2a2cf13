//! Portable JSONL records, one memory per line.
//!
//! Edges are not part of a record; they are rebuilt on import. See
//! `docs/corpus.md` for the field reference.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::StorageError;
use crate::graph::{GraphConfig, MemoryGraph};
use crate::index::Embedding;
use crate::model::{
    validate_node, ClipRange, EffectiveTime, MemoryKind, MemoryNode, NodeId, Provenance, ATTR_FIRST_OBSERVED,
    ATTR_IDENTITY, ATTR_SUBJECT,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Profile,
    Event,
    VideoEvent,
    Object,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordProvenance {
    pub session_id: String,
    #[serde(default)]
    pub turn_ids: Vec<String>,
    #[serde(default)]
    pub roles: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub clip_refs: Vec<ClipRange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asset: Option<String>,
}

/// Inline vector, or a reserved pointer into a sidecar file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EmbeddingRef {
    Inline(Vec<f64>),
    External { file: String, offset: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryRecord {
    pub id: String,
    pub kind: RecordKind,
    pub content: String,
    pub effective_time: EffectiveTime,
    pub provenance: RecordProvenance,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attributes: BTreeMap<String, String>,
    pub embedding_ref: EmbeddingRef,
    #[serde(default)]
    pub tombstone: bool,
}

impl MemoryRecord {
    pub fn from_node(node: &MemoryNode) -> MemoryRecord {
        let kind = match node.kind {
            MemoryKind::Profile => RecordKind::Profile,
            MemoryKind::EntityObject => RecordKind::Object,
            MemoryKind::Event if node.provenance.has_clips() => RecordKind::VideoEvent,
            MemoryKind::Event | MemoryKind::Root => RecordKind::Event,
        };
        let p = &node.provenance;
        MemoryRecord {
            id: node.id.to_string(),
            kind,
            content: node.content.clone(),
            effective_time: node.effective_time,
            provenance: RecordProvenance {
                session_id: p.session_id.clone(),
                turn_ids: p.source_turn_ids.clone(),
                roles: p.roles.clone(),
                clip_refs: p.clip_refs.clone(),
                asset: p.asset.clone(),
            },
            attributes: node.attributes.clone(),
            embedding_ref: EmbeddingRef::Inline(node.embedding.values().to_vec()),
            tombstone: node.tombstone,
        }
    }

    /// Kind-specific required fields.
    pub fn check_kind(&self) -> Result<(), String> {
        let p = &self.provenance;
        let need_attr = |k: &str| {
            if self.attributes.get(k).is_some_and(|v| !v.is_empty()) {
                Ok(())
            } else {
                Err(format!("{:?} record needs attributes.{k}", self.kind))
            }
        };
        match self.kind {
            RecordKind::Profile => need_attr(ATTR_SUBJECT),
            RecordKind::Event => {
                if p.turn_ids.is_empty() || p.roles.is_empty() {
                    return Err("event record needs provenance.turn_ids and provenance.roles".into());
                }
                Ok(())
            }
            RecordKind::VideoEvent => {
                if p.asset.as_deref().is_none_or(str::is_empty) || p.clip_refs.is_empty() {
                    return Err("video_event record needs provenance.asset and provenance.clip_refs".into());
                }
                Ok(())
            }
            RecordKind::Object => {
                need_attr(ATTR_IDENTITY)?;
                need_attr(ATTR_FIRST_OBSERVED)?;
                self.attributes[ATTR_FIRST_OBSERVED]
                    .parse::<f64>()
                    .map(|_| ())
                    .map_err(|_| "attributes.first_observed_s must be a number of seconds".into())
            }
        }
    }

    pub fn into_node(self, dim: usize) -> Result<MemoryNode, String> {
        self.check_kind()?;
        let values = match self.embedding_ref {
            EmbeddingRef::Inline(v) => v,
            EmbeddingRef::External { .. } => return Err("external embedding files are not supported".into()),
        };
        if values.len() != dim {
            return Err(format!("embedding has dimension {}, store uses {dim}", values.len()));
        }
        let embedding = Embedding::from_vec(values);
        if !embedding.is_unit() {
            return Err(format!("embedding is not unit norm (|v| = {})", embedding.norm()));
        }
        let kind = match self.kind {
            RecordKind::Profile => MemoryKind::Profile,
            RecordKind::Event | RecordKind::VideoEvent => MemoryKind::Event,
            RecordKind::Object => MemoryKind::EntityObject,
        };
        if self.id == NodeId::root().as_str() {
            return Err("records cannot use the root id".into());
        }
        let mut node = MemoryNode::new(NodeId::new(&self.id), kind, self.content, embedding, self.effective_time)
            .with_provenance(Provenance {
                source_turn_ids: self.provenance.turn_ids,
                roles: self.provenance.roles,
                session_id: self.provenance.session_id,
                asset: self.provenance.asset,
                clip_refs: self.provenance.clip_refs,
            });
        node.attributes = self.attributes;
        node.tombstone = self.tombstone;
        validate_node(&node).map_err(|v| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; "))?;
        Ok(node)
    }
}

/// Writes every non-root node, tombstones included, in effective-time order.
pub fn export(graph: &MemoryGraph, mut out: impl Write) -> Result<usize, StorageError> {
    let mut n = 0;
    for node in graph.nodes_by_time().filter(|n| !n.is_root()) {
        serde_json::to_writer(&mut out, &MemoryRecord::from_node(node)).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
        n += 1;
    }
    out.flush()?;
    Ok(n)
}

pub fn export_string(graph: &MemoryGraph) -> String {
    let mut buf = Vec::new();
    export(graph, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("json is utf-8")
}

/// Parses and validates records. Blank lines are skipped; line numbers
/// in errors are 1-based.
pub fn parse(input: impl BufRead, dim: usize) -> Result<Vec<MemoryNode>, StorageError> {
    let mut nodes = Vec::new();
    let mut ids = HashSet::new();
    let mut times = HashSet::new();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| StorageError::Record { line: line_no, message };
        let record: MemoryRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let node = record.into_node(dim).map_err(bad)?;
        if !ids.insert(node.id.clone()) {
            return Err(bad(format!("duplicate id {}", node.id)));
        }
        if !times.insert(node.effective_time) {
            return Err(bad(format!("duplicate effective_time {:?}", node.effective_time)));
        }
        nodes.push(node);
    }
    Ok(nodes)
}

/// Parses records and rebuilds their edges from scratch.
pub fn import(input: impl BufRead, dim: usize, config: GraphConfig) -> Result<MemoryGraph, StorageError> {
    let nodes = parse(input, dim)?;
    Ok(MemoryGraph::offline_build(nodes, dim, config)?)
}
