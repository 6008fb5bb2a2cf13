//! The three agent tools: clip retrieval, grounded summarization and
//! clip question answering.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::graph::{GraphError, MemoryGraph};
use crate::index::Embedding;
use crate::model::{ClipRange, NodeId};
use crate::provider::{protocol::RagRequest, Provider, ProviderError, Task};

pub const VIDEO_RETRIEVAL: &str = "video.retrieval";
pub const VIDEO_RAG: &str = "video.rag";
pub const VIDEO_QA: &str = "video.qa";
pub const FINISH: &str = "finish";

pub const TOOL_NAMES: [&str; 3] = [VIDEO_RETRIEVAL, VIDEO_RAG, VIDEO_QA];

/// Returned by `video.rag` when the store holds nothing.
pub const NO_MEMORY: &str = "No memory entries are available.";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ToolError {
    #[error("invalid clip range [{start_s}, {end_s}]")]
    InvalidRange { start_s: f64, end_s: f64 },
    #[error("no visual backend is configured")]
    NoBackend,
    #[error("visual backend has no answer for this clip")]
    NoAnswer,
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipHit {
    pub node_id: NodeId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asset: Option<String>,
    pub start_s: f64,
    pub end_s: f64,
    pub score: f64,
}

/// Clip references of the `k` nearest clip-bearing nodes, best first.
pub fn video_retrieval(graph: &MemoryGraph, query: &Embedding, k: usize) -> Result<Vec<ClipHit>, ToolError> {
    let hits = graph.index().top_k(query, k, |m| m.has_clips).map_err(GraphError::from)?;
    let mut out = Vec::new();
    for h in hits {
        let node = graph.node(&h.id).expect("indexed node exists");
        for c in &node.provenance.clip_refs {
            out.push(ClipHit {
                node_id: h.id.clone(),
                asset: node.provenance.asset.clone(),
                start_s: c.start_s,
                end_s: c.end_s,
                score: h.score,
            });
        }
    }
    Ok(out)
}

/// Contents of the `k` nearest nodes, best first. `None` on an empty store.
pub fn rag_entries(graph: &MemoryGraph, query: &Embedding, k: usize) -> Result<Option<Vec<String>>, ToolError> {
    if graph.index().is_empty() {
        return Ok(None);
    }
    let hits = graph.index().top_k(query, k, |_| true).map_err(GraphError::from)?;
    Ok(Some(hits.iter().map(|h| graph.node(&h.id).expect("indexed node exists").content.clone()).collect()))
}

/// One summarization call over the entries, or [`NO_MEMORY`] without a call.
pub fn video_rag(provider: &Provider, query: &str, entries: Option<Vec<String>>) -> Result<String, ToolError> {
    match entries {
        None => Ok(NO_MEMORY.to_string()),
        Some(entries) => Ok(provider.chat_text(Task::Rag, &RagRequest { query: query.to_string(), entries })?),
    }
}

/// Visual question answering over a clip.
pub trait VlmBackend: Send + Sync {
    fn answer(&self, asset: Option<&str>, range: ClipRange, question: &str) -> Result<String, ToolError>;
}

/// Canned answers keyed by (asset, range, question).
#[derive(Debug, Clone, Default)]
pub struct FixtureVlm {
    answers: HashMap<(String, u64, u64, String), String>,
}

impl FixtureVlm {
    pub fn new() -> Self {
        Self::default()
    }

    fn key(asset: Option<&str>, range: ClipRange, question: &str) -> (String, u64, u64, String) {
        (asset.unwrap_or("").to_string(), range.start_s.to_bits(), range.end_s.to_bits(), question.to_string())
    }

    pub fn insert(&mut self, asset: Option<&str>, range: ClipRange, question: &str, answer: impl Into<String>) {
        self.answers.insert(Self::key(asset, range, question), answer.into());
    }
}

impl VlmBackend for FixtureVlm {
    fn answer(&self, asset: Option<&str>, range: ClipRange, question: &str) -> Result<String, ToolError> {
        self.answers.get(&Self::key(asset, range, question)).cloned().ok_or(ToolError::NoAnswer)
    }
}

pub fn video_qa(
    vlm: Option<&dyn VlmBackend>,
    asset: Option<&str>,
    question: &str,
    range: ClipRange,
) -> Result<String, ToolError> {
    if !range.is_valid() {
        return Err(ToolError::InvalidRange { start_s: range.start_s, end_s: range.end_s });
    }
    vlm.ok_or(ToolError::NoBackend)?.answer(asset, range, question)
}
