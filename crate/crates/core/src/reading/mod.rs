//! Read path: seeds by similarity, the ancestor closure of those seeds, and
//! a time-ordered linearization of the closure.
//!
//! Tool implementations live in [`tools`] and the agent loop in [`agent`].

pub mod agent;
pub mod tools;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::graph::{GraphError, MemoryGraph};
use crate::index::{Embedding, ScoredId};
use crate::model::{EffectiveTime, MemoryKind, MemoryNode, NodeId};
use crate::pipeline::GraphHandle;
use crate::provider::{Provider, ProviderError};
use crate::text::estimate_tokens;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReadConfig {
    pub seed_k: usize,
    pub min_sim: f64,
    pub max_depth: usize,
    /// Ancestor budget; seeds and the root are not counted.
    pub max_nodes: usize,
    /// k for `video.retrieval`.
    pub retrieval_k: usize,
    /// k for `video.rag`.
    pub rag_k: usize,
    pub max_iterations: usize,
}

impl Default for ReadConfig {
    fn default() -> Self {
        ReadConfig { seed_k: 5, min_sim: 0.35, max_depth: 16, max_nodes: 128, retrieval_k: 5, rag_k: 5, max_iterations: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReadError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Closure {
    /// Members in ascending effective time.
    pub node_ids: Vec<NodeId>,
    pub seed_ids: Vec<NodeId>,
    pub truncated: bool,
    pub depth_used: usize,
}

impl Closure {
    pub fn contains(&self, id: &NodeId) -> bool {
        self.node_ids.contains(id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Marker {
    Seed,
    Ancestor,
    Root,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextEntry {
    pub node_id: NodeId,
    pub marker: Marker,
    pub kind: MemoryKind,
    pub content: String,
    pub effective_time: EffectiveTime,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LinearContext {
    /// `Some(Root)` when the closure is anchored at the root; the root never
    /// contributes content.
    pub header: Option<Marker>,
    pub entries: Vec<ContextEntry>,
    pub token_estimate: u64,
}

impl LinearContext {
    /// Prompt-ready text, one entry per line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        if self.header.is_some() {
            out.push_str("[memory thread]\n");
        }
        for e in &self.entries {
            let tag = match e.marker {
                Marker::Seed => "seed",
                Marker::Ancestor => "context",
                Marker::Root => "root",
            };
            out.push_str(&format!("[{tag} t={}.{}] {}\n", e.effective_time.wall_ms, e.effective_time.seq, e.content));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub seeds: Vec<ScoredId>,
    pub closure: Closure,
    pub context: LinearContext,
}

/// Top-`k` live nodes scoring at least `min_sim`; `[root]` when none do.
pub fn seeds_for(graph: &MemoryGraph, query: &Embedding, k: usize, min_sim: f64) -> Result<Vec<ScoredId>, ReadError> {
    let mut hits = graph.index().top_k(query, k.max(1), |_| true).map_err(GraphError::from)?;
    hits.retain(|h| h.score >= min_sim);
    if hits.is_empty() {
        hits.push(ScoredId { id: graph.root_id().clone(), score: 0.0, effective_time: EffectiveTime::ROOT });
    }
    Ok(hits)
}

/// Embeds `q` then picks seeds.
pub fn seeds(graph: &MemoryGraph, provider: &Provider, q: &str, k: usize, min_sim: f64) -> Result<Vec<NodeId>, ReadError> {
    let e = provider.embed_one(q)?;
    Ok(seeds_for(graph, &e, k, min_sim)?.into_iter().map(|s| s.id).collect())
}

/// Reverse breadth-first expansion over parent edges.
///
/// Each level is visited latest-first, so when `max_nodes` runs out the
/// ancestors closest to the seeds are the ones kept. The root is always
/// added and never counted against the budget.
pub fn closure(graph: &MemoryGraph, seed_ids: &[NodeId], max_depth: usize, max_nodes: usize) -> Result<Closure, ReadError> {
    closure_filtered(graph, seed_ids, max_depth, max_nodes, |_| true)
}

/// [`closure`] with a relevance hook: ancestors failing `keep` are neither
/// included nor expanded.
pub fn closure_filtered(
    graph: &MemoryGraph,
    seed_ids: &[NodeId],
    max_depth: usize,
    max_nodes: usize,
    keep: impl Fn(&MemoryNode) -> bool,
) -> Result<Closure, ReadError> {
    let root = graph.root_id().clone();
    let mut included: HashSet<NodeId> = HashSet::new();
    let mut seeds = Vec::new();
    for s in seed_ids {
        let node = graph.node(s).ok_or_else(|| GraphError::UnknownId(s.clone()))?;
        if node.tombstone {
            continue;
        }
        if included.insert(s.clone()) {
            seeds.push(s.clone());
        }
    }
    let mut frontier: Vec<NodeId> = seeds.iter().filter(|s| **s != root).cloned().collect();
    let mut truncated = false;
    let mut depth_used = 0;
    let mut budget = max_nodes;
    'levels: while !frontier.is_empty() {
        let mut next: Vec<&MemoryNode> = Vec::new();
        let mut queued: HashSet<&NodeId> = HashSet::new();
        for f in &frontier {
            for p in graph.parents_of(f)? {
                if p == root || included.contains(&p) {
                    continue;
                }
                let node = graph.node(&p).expect("parent exists");
                if !keep(node) || !queued.insert(&node.id) {
                    continue;
                }
                next.push(node);
            }
        }
        if next.is_empty() {
            break;
        }
        if depth_used == max_depth {
            truncated = true;
            break;
        }
        next.sort_by_key(|n| std::cmp::Reverse(n.effective_time));
        let mut added = Vec::new();
        for node in next {
            if budget == 0 {
                truncated = true;
                if !added.is_empty() {
                    depth_used += 1;
                }
                break 'levels;
            }
            budget -= 1;
            included.insert(node.id.clone());
            added.push(node.id.clone());
        }
        depth_used += 1;
        frontier = added;
    }
    if !included.is_empty() {
        included.insert(root);
    }
    let mut node_ids: Vec<NodeId> = included.into_iter().collect();
    node_ids.sort_by_key(|id| graph.node(id).map(|n| n.effective_time).unwrap_or(EffectiveTime::ROOT));
    Ok(Closure { node_ids, seed_ids: seeds, truncated, depth_used })
}

/// Orders the closure by effective time (seq breaks wall-clock ties) and
/// drops the root from the entries.
pub fn linearize(graph: &MemoryGraph, closure: &Closure) -> LinearContext {
    let seeds: HashSet<&NodeId> = closure.seed_ids.iter().collect();
    let mut entries: Vec<ContextEntry> = closure
        .node_ids
        .iter()
        .filter_map(|id| graph.node(id))
        .filter(|n| !n.is_root() && !n.tombstone)
        .map(|n| ContextEntry {
            node_id: n.id.clone(),
            marker: if seeds.contains(&n.id) { Marker::Seed } else { Marker::Ancestor },
            kind: n.kind,
            content: n.content.clone(),
            effective_time: n.effective_time,
        })
        .collect();
    entries.sort_by_key(|e| e.effective_time);
    let header = closure.node_ids.contains(graph.root_id()).then_some(Marker::Root);
    let token_estimate = entries.iter().map(|e| estimate_tokens(&e.content)).sum();
    LinearContext { header, entries, token_estimate }
}

/// seeds → closure → linearize.
pub fn retrieve_with(graph: &MemoryGraph, query: &Embedding, cfg: &ReadConfig) -> Result<Retrieval, ReadError> {
    let seeds = seeds_for(graph, query, cfg.seed_k, cfg.min_sim)?;
    let ids: Vec<NodeId> = seeds.iter().map(|s| s.id.clone()).collect();
    let closure = closure(graph, &ids, cfg.max_depth, cfg.max_nodes)?;
    let context = linearize(graph, &closure);
    Ok(Retrieval { seeds, closure, context })
}

/// Embeds the query outside the graph lock, then reads under it.
pub fn retrieve(handle: &impl GraphHandle, provider: &Provider, q: &str, cfg: &ReadConfig) -> Result<Retrieval, ReadError> {
    let e = provider.embed_one(q)?;
    handle.read(|g| retrieve_with(g, &e, cfg))
}
