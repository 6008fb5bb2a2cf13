//! Node and edge data model shared by every other module.
//!
//! Nodes are ordered by [`EffectiveTime`], a `(wall_ms, seq)` pair compared
//! lexicographically. The store hands out a fresh `seq` on every write, so no
//! two stored nodes ever compare equal and every edge can point strictly
//! forward in time.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::index::Embedding;

/// Opaque node identifier.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(Arc<str>);

impl NodeId {
    pub fn new(id: impl AsRef<str>) -> Self {
        NodeId(Arc::from(id.as_ref()))
    }

    /// The id reserved for the virtual root (the nil UUID).
    pub fn root() -> Self {
        NodeId::new(uuid::Uuid::nil().to_string())
    }

    /// Deterministic UUID-format id derived from an effective time.
    pub fn for_time(time: EffectiveTime) -> Self {
        let name = format!("{}:{}", time.wall_ms, time.seq);
        NodeId::new(uuid::Uuid::new_v5(&uuid::Uuid::NAMESPACE_OID, name.as_bytes()).to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", &*self.0)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId::new(s)
    }
}

/// Semantic-validity order key of a node.
///
/// The derived `Ord` is lexicographic on `(wall_ms, seq)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EffectiveTime {
    pub wall_ms: i64,
    pub seq: u64,
}

impl EffectiveTime {
    /// Sentinel held by the virtual root; precedes every real node.
    pub const ROOT: EffectiveTime = EffectiveTime { wall_ms: 0, seq: 0 };

    pub const fn new(wall_ms: i64, seq: u64) -> Self {
        EffectiveTime { wall_ms, seq }
    }
}

/// Strict lexicographic order on `(wall_ms, seq)`.
pub fn time_less(a: EffectiveTime, b: EffectiveTime) -> bool {
    a < b
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryKind {
    Profile,
    Event,
    EntityObject,
    Root,
}

/// A `[start_s, end_s]` second range inside a media asset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipRange {
    pub start_s: f64,
    pub end_s: f64,
}

impl ClipRange {
    pub fn new(start_s: f64, end_s: f64) -> Self {
        ClipRange { start_s, end_s }
    }

    pub fn is_valid(&self) -> bool {
        self.start_s.is_finite() && self.end_s.is_finite() && self.start_s >= 0.0 && self.start_s <= self.end_s
    }
}

/// Where a memory came from: turns, speaker roles, session and clips.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default)]
    pub source_turn_ids: Vec<String>,
    #[serde(default)]
    pub roles: Vec<String>,
    #[serde(default)]
    pub session_id: String,
    /// Media asset the clip ranges point into.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asset: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub clip_refs: Vec<ClipRange>,
}

impl Provenance {
    pub fn has_clips(&self) -> bool {
        !self.clip_refs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryNode {
    pub id: NodeId,
    pub kind: MemoryKind,
    pub content: String,
    pub embedding: Embedding,
    pub effective_time: EffectiveTime,
    pub provenance: Provenance,
    /// Lightweight metadata (profile subject, object identity, ...).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attributes: BTreeMap<String, String>,
    #[serde(default)]
    pub tombstone: bool,
}

impl MemoryNode {
    /// The virtual root: sentinel time, empty content, zero embedding.
    pub fn new_root(dim: usize) -> Self {
        MemoryNode {
            id: NodeId::root(),
            kind: MemoryKind::Root,
            content: String::new(),
            embedding: Embedding::zeros(dim),
            effective_time: EffectiveTime::ROOT,
            provenance: Provenance::default(),
            attributes: BTreeMap::new(),
            tombstone: false,
        }
    }

    pub fn new(
        id: NodeId,
        kind: MemoryKind,
        content: impl Into<String>,
        embedding: Embedding,
        effective_time: EffectiveTime,
    ) -> Self {
        MemoryNode {
            id,
            kind,
            content: content.into(),
            embedding,
            effective_time,
            provenance: Provenance::default(),
            attributes: BTreeMap::new(),
            tombstone: false,
        }
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn is_root(&self) -> bool {
        self.kind == MemoryKind::Root
    }

    /// Fills the kind-specific attributes that exported records require,
    /// keeping any value already present.
    ///
    /// Profiles get a `subject` (the speaking role), objects an `identity`
    /// (their leading content tokens) and `first_observed_s` (first clip
    /// start, else the effective wall time).
    pub fn with_default_attributes(mut self) -> Self {
        match self.kind {
            MemoryKind::Profile => {
                let subject = self.provenance.roles.first().cloned().unwrap_or_else(|| "user".into());
                self.attributes.entry(ATTR_SUBJECT.into()).or_insert(subject);
            }
            MemoryKind::EntityObject => {
                let mut identity = crate::text::tokens(&self.content);
                identity.truncate(4);
                let identity = if identity.is_empty() { self.id.to_string() } else { identity.join("-") };
                self.attributes.entry(ATTR_IDENTITY.into()).or_insert(identity);
                let seen = match self.provenance.clip_refs.first() {
                    Some(c) => c.start_s,
                    None => self.effective_time.wall_ms as f64 / 1000.0,
                };
                self.attributes.entry(ATTR_FIRST_OBSERVED.into()).or_insert(format!("{seen:.3}"));
            }
            MemoryKind::Event | MemoryKind::Root => {}
        }
        self
    }
}

pub const ATTR_SUBJECT: &str = "subject";
pub const ATTR_IDENTITY: &str = "identity";
pub const ATTR_FIRST_OBSERVED: &str = "first_observed_s";

/// A directed dependency `parent -> child`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub parent: NodeId,
    pub child: NodeId,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Violation {
    #[error("id nonempty")]
    EmptyId,
    #[error("content nonempty")]
    EmptyContent,
    #[error("clip range {index}: start_s must be >= 0 and <= end_s")]
    ClipRange { index: usize },
    #[error("clip refs only allowed on event or entity-object nodes")]
    ClipKind,
    #[error("root shape: root must carry the sentinel time and no content")]
    RootShape,
    #[error("non-root node may not use the root sentinel time")]
    SentinelTime,
}

/// Checks every node-level invariant and returns all violations at once.
pub fn validate_node(node: &MemoryNode) -> Result<(), Vec<Violation>> {
    let mut violations = Vec::new();
    if node.id.as_str().is_empty() {
        violations.push(Violation::EmptyId);
    }
    if node.is_root() {
        if !node.content.is_empty() || node.effective_time != EffectiveTime::ROOT {
            violations.push(Violation::RootShape);
        }
    } else {
        if node.content.trim().is_empty() {
            violations.push(Violation::EmptyContent);
        }
        if node.effective_time == EffectiveTime::ROOT {
            violations.push(Violation::SentinelTime);
        }
    }
    if node.provenance.has_clips() && !matches!(node.kind, MemoryKind::Event | MemoryKind::EntityObject) {
        violations.push(Violation::ClipKind);
    }
    for (index, clip) in node.provenance.clip_refs.iter().enumerate() {
        if !clip.is_valid() {
            violations.push(Violation::ClipRange { index });
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}
