//! The memory DAG.
//!
//! Every node hangs off a virtual root. A node's incoming edges are computed
//! by one routine shared by [`MemoryGraph::insert`] and
//! [`MemoryGraph::reinsert`]:
//!
//! 1. candidates: the top-K most similar live nodes with an earlier
//!    effective time;
//! 2. pruning: a candidate is dropped when it reaches another candidate
//!    through nodes older than the one being attached;
//! 3. materialization: one edge per surviving candidate, or a single edge
//!    from the root when nothing survives.
//!
//! Edges always point forward in effective time, so the graph is acyclic by
//! construction. Every node's parent set is kept an antichain (no parent
//! reaches another), which makes the graph its own transitive reduction.
//!
//! Mutations are recorded as [`GraphOp`]s in an internal journal the store
//! drains into its write-ahead log.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::exec::Exec;
use crate::index::{Embedding, EntryMeta, IndexError, ScoredId, VectorIndex};
use crate::model::{validate_node, EffectiveTime, Edge, MemoryNode, NodeId, Violation};
use crate::reduce::{self, CycleError};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct GraphConfig {
    /// K for candidate parent retrieval.
    pub candidate_k: usize,
    /// Candidates must score strictly above this cosine.
    pub min_parent_sim: f64,
    /// Max root-to-node paths returned by [`MemoryGraph::thread_of`].
    pub thread_limit: usize,
    pub exec: Exec,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig { candidate_k: 10, min_parent_sim: 0.0, thread_limit: 32, exec: Exec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("unknown node id {0}")]
    UnknownId(NodeId),
    #[error("duplicate node id {0}")]
    DuplicateId(NodeId),
    #[error("effective time ({}, {}) already taken", .0.wall_ms, .0.seq)]
    DuplicateTime(EffectiveTime),
    #[error("operation not allowed on the root node: {0}")]
    RootOperation(&'static str),
    #[error("node {0} is tombstoned")]
    Tombstoned(NodeId),
    #[error("invalid node: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("edge {parent} -> {child} does not go forward in time")]
    TemporalOrder { parent: NodeId, child: NodeId },
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Cycle(#[from] CycleError),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

/// One journaled graph mutation. Replaying a journal from an empty graph
/// reproduces the live graph exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", content = "payload", rename_all = "snake_case")]
pub enum GraphOp {
    AddNode(MemoryNode),
    AddEdge(Edge),
    DelEdge(Edge),
    Tombstone { id: NodeId },
    UpdateContent { id: NodeId, content: String, embedding: Embedding },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunedCandidate {
    pub candidate: NodeId,
    /// The other candidate this one reaches.
    pub reaches: NodeId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsertReport {
    pub node_id: NodeId,
    pub candidates_considered: Vec<ScoredId>,
    pub parents_chosen: Vec<NodeId>,
    pub pruned: Vec<PrunedCandidate>,
    pub root_fallback: bool,
    /// Downstream edges dropped because re-attaching this node made them
    /// transitive.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub redundant_edges_removed: Vec<Edge>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutationReport {
    pub node_id: NodeId,
    /// Children that lost their parent (delete) or were refreshed (update).
    pub affected_children: Vec<NodeId>,
    /// Every reinsert performed, in order.
    pub reinserts: Vec<InsertReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Threads {
    pub paths: Vec<Vec<NodeId>>,
    pub truncated: bool,
}

#[derive(Debug, Clone)]
pub struct MemoryGraph {
    config: GraphConfig,
    nodes: Vec<MemoryNode>,
    slots: HashMap<NodeId, usize>,
    parents: Vec<BTreeSet<usize>>,
    children: Vec<BTreeSet<usize>>,
    by_time: BTreeMap<EffectiveTime, usize>,
    index: VectorIndex,
    next_seq: u64,
    journal: Vec<GraphOp>,
    recording: bool,
}

const ROOT: usize = 0;

impl MemoryGraph {
    /// An empty graph holding only the root.
    pub fn new(dim: usize, config: GraphConfig) -> Self {
        let root = MemoryNode::new_root(dim);
        let mut slots = HashMap::new();
        slots.insert(root.id.clone(), ROOT);
        let mut by_time = BTreeMap::new();
        by_time.insert(root.effective_time, ROOT);
        MemoryGraph {
            index: VectorIndex::with_exec(dim, config.exec),
            config,
            nodes: vec![root],
            slots,
            parents: vec![BTreeSet::new()],
            children: vec![BTreeSet::new()],
            by_time,
            next_seq: 1,
            journal: Vec::new(),
            recording: false,
        }
    }

    pub fn config(&self) -> &GraphConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.index.dim()
    }

    pub fn root_id(&self) -> &NodeId {
        &self.nodes[ROOT].id
    }

    pub fn index(&self) -> &VectorIndex {
        &self.index
    }

    /// All node records including the root and tombstones.
    pub fn nodes(&self) -> impl Iterator<Item = &MemoryNode> {
        self.nodes.iter()
    }

    /// Nodes in ascending effective time, root first.
    pub fn nodes_by_time(&self) -> impl Iterator<Item = &MemoryNode> {
        self.by_time.values().map(|&s| &self.nodes[s])
    }

    pub fn node(&self, id: &NodeId) -> Option<&MemoryNode> {
        self.slots.get(id).map(|&s| &self.nodes[s])
    }

    /// Live (non-root, non-tombstone) node count.
    pub fn live_count(&self) -> usize {
        self.nodes.iter().filter(|n| !n.is_root() && !n.tombstone).count()
    }

    pub fn edge_count(&self) -> usize {
        self.children.iter().map(|c| c.len()).sum()
    }

    /// Every edge, sorted by `(parent, child)` id.
    pub fn edges(&self) -> Vec<Edge> {
        let mut out: Vec<Edge> = self
            .children
            .iter()
            .enumerate()
            .flat_map(|(p, cs)| cs.iter().map(move |&c| (p, c)))
            .map(|(p, c)| self.edge(p, c))
            .collect();
        out.sort();
        out
    }

    fn edge(&self, p: usize, c: usize) -> Edge {
        Edge { parent: self.nodes[p].id.clone(), child: self.nodes[c].id.clone() }
    }

    fn slot(&self, id: &NodeId) -> Result<usize, GraphError> {
        self.slots.get(id).copied().ok_or_else(|| GraphError::UnknownId(id.clone()))
    }

    fn time(&self, slot: usize) -> EffectiveTime {
        self.nodes[slot].effective_time
    }

    fn sorted_by_time(&self, slots: impl IntoIterator<Item = usize>) -> Vec<usize> {
        let mut v: Vec<usize> = slots.into_iter().collect();
        v.sort_by_key(|&s| self.time(s));
        v
    }

    /// Parents of `id` in ascending effective time.
    pub fn parents_of(&self, id: &NodeId) -> Result<Vec<NodeId>, GraphError> {
        let s = self.slot(id)?;
        Ok(self.sorted_by_time(self.parents[s].iter().copied()).into_iter().map(|p| self.nodes[p].id.clone()).collect())
    }

    /// Children of `id` in ascending effective time.
    pub fn children_of(&self, id: &NodeId) -> Result<Vec<NodeId>, GraphError> {
        let s = self.slot(id)?;
        Ok(self.sorted_by_time(self.children[s].iter().copied()).into_iter().map(|c| self.nodes[c].id.clone()).collect())
    }

    /// Hands out a fresh effective time; `seq` never repeats within a graph.
    pub fn allocate_time(&mut self, wall_ms: i64) -> EffectiveTime {
        let t = EffectiveTime::new(wall_ms, self.next_seq);
        self.next_seq += 1;
        t
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    // ---- journal -------------------------------------------------------

    /// Starts recording mutations into the journal.
    pub fn set_recording(&mut self, on: bool) {
        self.recording = on;
    }

    pub fn take_journal(&mut self) -> Vec<GraphOp> {
        std::mem::take(&mut self.journal)
    }

    fn record(&mut self, op: GraphOp) {
        if self.recording {
            self.journal.push(op);
        }
    }

    fn add_edge(&mut self, p: usize, c: usize) {
        if self.children[p].insert(c) {
            self.parents[c].insert(p);
            let e = self.edge(p, c);
            self.record(GraphOp::AddEdge(e));
        }
    }

    fn del_edge(&mut self, p: usize, c: usize) {
        if self.children[p].remove(&c) {
            self.parents[c].remove(&p);
            let e = self.edge(p, c);
            self.record(GraphOp::DelEdge(e));
        }
    }

    fn meta(node: &MemoryNode) -> EntryMeta {
        EntryMeta {
            id: node.id.clone(),
            effective_time: node.effective_time,
            kind: node.kind,
            has_clips: node.provenance.has_clips(),
        }
    }

    /// Adds a node record with no edges.
    fn add_bare(&mut self, node: MemoryNode) -> Result<usize, GraphError> {
        if node.is_root() {
            return Err(GraphError::RootOperation("a store holds exactly one root"));
        }
        validate_node(&node).map_err(GraphError::Invalid)?;
        if self.slots.contains_key(&node.id) {
            return Err(GraphError::DuplicateId(node.id.clone()));
        }
        if self.by_time.contains_key(&node.effective_time) {
            return Err(GraphError::DuplicateTime(node.effective_time));
        }
        if !node.tombstone {
            self.index.upsert(Self::meta(&node), &node.embedding)?;
        } else if node.embedding.dim() != self.dim() {
            return Err(IndexError::DimensionMismatch { expected: self.dim(), got: node.embedding.dim() }.into());
        }
        let slot = self.nodes.len();
        self.slots.insert(node.id.clone(), slot);
        self.by_time.insert(node.effective_time, slot);
        self.next_seq = self.next_seq.max(node.effective_time.seq + 1);
        self.record(GraphOp::AddNode(node.clone()));
        self.nodes.push(node);
        self.parents.push(BTreeSet::new());
        self.children.push(BTreeSet::new());
        Ok(slot)
    }

    // ---- reachability --------------------------------------------------

    /// Whether a directed path `a ~> b` exists; `reachable(x, x)` is true.
    pub fn reachable(&self, a: &NodeId, b: &NodeId) -> Result<bool, GraphError> {
        let (a, b) = (self.slot(a)?, self.slot(b)?);
        Ok(self.reaches_any(a, &[b], None).is_some())
    }

    /// Forward BFS from `from`; returns the first target hit. Only nodes
    /// strictly older than `horizon` (when given) are traversed. Since edges
    /// go forward in time, nodes later than the latest target are skipped.
    fn reaches_any(&self, from: usize, targets: &[usize], horizon: Option<EffectiveTime>) -> Option<usize> {
        if targets.contains(&from) {
            return Some(from);
        }
        let latest = targets.iter().map(|&t| self.time(t)).max()?;
        let target_set: HashSet<usize> = targets.iter().copied().collect();
        let mut seen = HashSet::new();
        let mut queue = VecDeque::from([from]);
        seen.insert(from);
        while let Some(x) = queue.pop_front() {
            for &y in &self.children[x] {
                let t = self.time(y);
                if t > latest || horizon.is_some_and(|h| t >= h) || !seen.insert(y) {
                    continue;
                }
                if target_set.contains(&y) {
                    return Some(y);
                }
                queue.push_back(y);
            }
        }
        None
    }

    fn descendants(&self, from: usize) -> Vec<usize> {
        let mut seen = HashSet::from([from]);
        let mut queue = VecDeque::from([from]);
        let mut out = Vec::new();
        while let Some(x) = queue.pop_front() {
            for &y in &self.children[x] {
                if seen.insert(y) {
                    out.push(y);
                    queue.push_back(y);
                }
            }
        }
        out
    }

    fn ancestors(&self, from: usize) -> HashSet<usize> {
        let mut seen = HashSet::new();
        let mut queue = VecDeque::from([from]);
        while let Some(x) = queue.pop_front() {
            for &y in &self.parents[x] {
                if seen.insert(y) {
                    queue.push_back(y);
                }
            }
        }
        seen
    }

    // ---- insertion -----------------------------------------------------

    /// Top-K most similar live nodes strictly older than `node`, keeping
    /// only scores above `min_parent_sim`.
    pub fn candidate_parents(&self, node: &MemoryNode, k: usize) -> Result<Vec<ScoredId>, GraphError> {
        candidates_from(&self.index, node, k, self.config.min_parent_sim)
    }

    /// Keeps the candidates that reach no other candidate, with reachability
    /// taken over nodes strictly older than `horizon`.
    pub fn prune_irreducible(
        &self,
        candidates: &[NodeId],
        horizon: EffectiveTime,
    ) -> Result<(Vec<NodeId>, Vec<PrunedCandidate>), GraphError> {
        let slots = candidates.iter().map(|c| self.slot(c)).collect::<Result<Vec<_>, _>>()?;
        let (kept, pruned) = self.prune_slots(&slots, horizon);
        Ok((kept.into_iter().map(|s| self.nodes[s].id.clone()).collect(), pruned))
    }

    fn prune_slots(&self, cands: &[usize], horizon: EffectiveTime) -> (Vec<usize>, Vec<PrunedCandidate>) {
        let mut kept = Vec::new();
        let mut pruned = Vec::new();
        for &p in cands {
            let others: Vec<usize> = cands.iter().copied().filter(|&q| q != p).collect();
            match self.reaches_any(p, &others, Some(horizon)) {
                Some(q) => pruned.push(PrunedCandidate {
                    candidate: self.nodes[p].id.clone(),
                    reaches: self.nodes[q].id.clone(),
                }),
                None => kept.push(p),
            }
        }
        (kept, pruned)
    }

    /// Prunes `candidates` and materializes the incoming edges of `slot`.
    fn materialize(&mut self, slot: usize, candidates: Vec<ScoredId>) -> InsertReport {
        let cand_slots: Vec<usize> = candidates.iter().map(|c| self.slots[&c.id]).collect();
        let (kept, pruned) = self.prune_slots(&cand_slots, self.time(slot));
        let root_fallback = kept.is_empty();
        let parents = if root_fallback { vec![ROOT] } else { kept };
        for &p in &parents {
            self.add_edge(p, slot);
        }
        InsertReport {
            node_id: self.nodes[slot].id.clone(),
            candidates_considered: candidates,
            parents_chosen: parents.iter().map(|&p| self.nodes[p].id.clone()).collect(),
            pruned,
            root_fallback,
            redundant_edges_removed: Vec::new(),
        }
    }

    /// Adds `node` and its incoming edges; existing nodes and edges are left
    /// untouched.
    pub fn insert(&mut self, node: MemoryNode) -> Result<InsertReport, GraphError> {
        if node.is_root() {
            return Err(GraphError::RootOperation("a store holds exactly one root"));
        }
        if node.tombstone {
            return Err(GraphError::Tombstoned(node.id));
        }
        self.index.check(&node.embedding)?;
        let candidates = self.candidate_parents(&node, self.config.candidate_k)?;
        let slot = self.add_bare(node)?;
        Ok(self.materialize(slot, candidates))
    }

    /// Drops every incoming edge of `id` and recomputes them from its current
    /// embedding. Outgoing edges stay; any downstream edge that the new
    /// parents make transitive is removed so parent sets stay antichains.
    pub fn reinsert(&mut self, id: &NodeId) -> Result<InsertReport, GraphError> {
        let slot = self.slot(id)?;
        if slot == ROOT {
            return Err(GraphError::RootOperation("reinsert"));
        }
        if self.nodes[slot].tombstone {
            return Err(GraphError::Tombstoned(id.clone()));
        }
        for p in self.parents[slot].clone() {
            self.del_edge(p, slot);
        }
        let candidates = self.candidate_parents(&self.nodes[slot], self.config.candidate_k)?;
        let mut report = self.materialize(slot, candidates);
        report.redundant_edges_removed = self.restore_antichains(slot);
        Ok(report)
    }

    /// After `u` gained new parents, a parent `p` of some descendant `v` may
    /// now reach another parent of `v` through `u`. Exactly the parents of
    /// descendants that are ancestors of `u` are affected, and each such edge
    /// is transitive, so dropping it preserves reachability.
    fn restore_antichains(&mut self, u: usize) -> Vec<Edge> {
        if self.children[u].is_empty() {
            return Vec::new();
        }
        let below = self.sorted_by_time(self.descendants(u));
        let above = self.ancestors(u);
        let mut removed = Vec::new();
        for v in below {
            let stale: Vec<usize> = self.parents[v].iter().copied().filter(|p| above.contains(p)).collect();
            for p in stale {
                removed.push(self.edge(p, v));
                self.del_edge(p, v);
            }
        }
        removed
    }

    /// Replaces content and embedding (effective time is kept), re-attaches
    /// the node, then refreshes each of its former direct children.
    pub fn apply_update(
        &mut self,
        id: &NodeId,
        content: impl Into<String>,
        embedding: Embedding,
    ) -> Result<MutationReport, GraphError> {
        let slot = self.slot(id)?;
        if slot == ROOT {
            return Err(GraphError::RootOperation("update"));
        }
        if self.nodes[slot].tombstone {
            return Err(GraphError::Tombstoned(id.clone()));
        }
        let content = content.into();
        if content.trim().is_empty() {
            return Err(GraphError::Invalid(vec![Violation::EmptyContent]));
        }
        self.index.check(&embedding)?;
        let kids = self.sorted_by_time(self.children[slot].iter().copied());

        let node = &mut self.nodes[slot];
        node.content = content.clone();
        node.embedding = embedding.clone();
        let meta = Self::meta(node);
        self.index.upsert(meta, &embedding)?;
        self.record(GraphOp::UpdateContent { id: id.clone(), content, embedding });

        let mut reinserts = vec![self.reinsert(id)?];
        for &c in &kids {
            let cid = self.nodes[c].id.clone();
            reinserts.push(self.reinsert(&cid)?);
        }
        Ok(MutationReport {
            node_id: id.clone(),
            affected_children: kids.iter().map(|&c| self.nodes[c].id.clone()).collect(),
            reinserts,
        })
    }

    /// Tombstones the node, detaches it, and re-attaches each orphan.
    pub fn apply_delete(&mut self, id: &NodeId) -> Result<MutationReport, GraphError> {
        let slot = self.slot(id)?;
        if slot == ROOT {
            return Err(GraphError::RootOperation("delete"));
        }
        if self.nodes[slot].tombstone {
            return Err(GraphError::Tombstoned(id.clone()));
        }
        let orphans = self.sorted_by_time(self.children[slot].iter().copied());
        for c in orphans.clone() {
            self.del_edge(slot, c);
        }
        for p in self.parents[slot].clone() {
            self.del_edge(p, slot);
        }
        self.nodes[slot].tombstone = true;
        self.index.remove(id);
        self.record(GraphOp::Tombstone { id: id.clone() });

        let mut reinserts = Vec::with_capacity(orphans.len());
        for &c in &orphans {
            let cid = self.nodes[c].id.clone();
            reinserts.push(self.reinsert(&cid)?);
        }
        Ok(MutationReport {
            node_id: id.clone(),
            affected_children: orphans.iter().map(|&c| self.nodes[c].id.clone()).collect(),
            reinserts,
        })
    }

    // ---- bulk construction ---------------------------------------------

    fn prepare_bulk(nodes: Vec<MemoryNode>, dim: usize, config: &GraphConfig) -> Result<MemoryGraph, GraphError> {
        let mut nodes = nodes;
        nodes.sort_by_key(|n| n.effective_time);
        let mut g = MemoryGraph::new(dim, config.clone());
        for n in nodes {
            g.add_bare(n)?;
        }
        Ok(g)
    }

    /// Builds the graph for `nodes` from scratch. Candidate retrieval runs
    /// per node against a frozen index of all nodes (in parallel under
    /// [`Exec::Parallel`]); the temporal filter restricts each query to the
    /// node's past. Pruning then walks the nodes in time order, since it
    /// needs the edges of older nodes. The result equals
    /// [`MemoryGraph::build_sequential`].
    pub fn offline_build(nodes: Vec<MemoryNode>, dim: usize, config: GraphConfig) -> Result<MemoryGraph, GraphError> {
        let mut g = Self::prepare_bulk(nodes, dim, &config)?;
        let frozen = g.index.snapshot();
        let live: Vec<usize> = g.by_time.values().copied().filter(|&s| s != ROOT && !g.nodes[s].tombstone).collect();
        let (k, floor) = (config.candidate_k, config.min_parent_sim);
        let nodes = &g.nodes;
        let candidates = config.exec.map(&live, |&s| candidates_from(&frozen, &nodes[s], k, floor));
        drop(frozen);
        for (slot, cands) in live.into_iter().zip(candidates) {
            let cands = cands?;
            g.materialize(slot, cands);
        }
        Ok(g)
    }

    /// Reference construction: `insert` each node in effective-time order.
    pub fn build_sequential(nodes: Vec<MemoryNode>, dim: usize, config: GraphConfig) -> Result<MemoryGraph, GraphError> {
        let mut nodes = nodes;
        nodes.sort_by_key(|n| n.effective_time);
        let mut g = MemoryGraph::new(dim, config);
        for n in nodes {
            if n.tombstone {
                g.add_bare(n)?;
            } else {
                g.insert(n)?;
            }
        }
        Ok(g)
    }

    /// Builds a graph from explicit nodes and edges (snapshots, tests).
    /// Edges must go forward in time.
    pub fn from_parts(
        dim: usize,
        config: GraphConfig,
        nodes: Vec<MemoryNode>,
        edges: &[Edge],
    ) -> Result<MemoryGraph, GraphError> {
        let mut g = Self::prepare_bulk(nodes, dim, &config)?;
        for e in edges {
            g.connect(&e.parent, &e.child)?;
        }
        Ok(g)
    }

    fn connect(&mut self, parent: &NodeId, child: &NodeId) -> Result<(), GraphError> {
        let (p, c) = (self.slot(parent)?, self.slot(child)?);
        if self.time(p) >= self.time(c) {
            return Err(GraphError::TemporalOrder { parent: parent.clone(), child: child.clone() });
        }
        for s in [p, c] {
            if self.nodes[s].tombstone {
                return Err(GraphError::Tombstoned(self.nodes[s].id.clone()));
            }
        }
        self.add_edge(p, c);
        Ok(())
    }

    /// Applies one journaled op verbatim (write-ahead log replay).
    pub fn apply_op(&mut self, op: GraphOp) -> Result<(), GraphError> {
        match op {
            GraphOp::AddNode(n) => self.add_bare(n).map(|_| ()),
            GraphOp::AddEdge(e) => self.connect(&e.parent, &e.child),
            GraphOp::DelEdge(e) => {
                let (p, c) = (self.slot(&e.parent)?, self.slot(&e.child)?);
                self.del_edge(p, c);
                Ok(())
            }
            GraphOp::Tombstone { id } => {
                let s = self.slot(&id)?;
                if s == ROOT {
                    return Err(GraphError::RootOperation("delete"));
                }
                for c in self.children[s].clone() {
                    self.del_edge(s, c);
                }
                for p in self.parents[s].clone() {
                    self.del_edge(p, s);
                }
                self.nodes[s].tombstone = true;
                self.index.remove(&id);
                self.record(GraphOp::Tombstone { id });
                Ok(())
            }
            GraphOp::UpdateContent { id, content, embedding } => {
                let s = self.slot(&id)?;
                if s == ROOT {
                    return Err(GraphError::RootOperation("update"));
                }
                self.index.check(&embedding)?;
                let node = &mut self.nodes[s];
                node.content = content.clone();
                node.embedding = embedding.clone();
                if !node.tombstone {
                    let meta = Self::meta(node);
                    self.index.upsert(meta, &embedding)?;
                }
                self.record(GraphOp::UpdateContent { id, content, embedding });
                Ok(())
            }
        }
    }

    // ---- global maintenance --------------------------------------------

    /// Copy of this graph with every transitive edge removed.
    pub fn transitive_reduce(&self) -> Result<MemoryGraph, GraphError> {
        let mut g = self.clone();
        g.recording = false;
        g.journal.clear();
        g.reduce_in_place()?;
        Ok(g)
    }

    /// Removes transitive edges in place (journaled); returns how many.
    pub fn reduce_in_place(&mut self) -> Result<usize, GraphError> {
        let edges: Vec<(usize, usize)> = self
            .children
            .iter()
            .enumerate()
            .flat_map(|(p, cs)| cs.iter().map(move |&c| (p, c)))
            .collect();
        let kept: HashSet<(usize, usize)> = reduce::transitive_reduction(self.nodes.len(), &edges)?.into_iter().collect();
        let mut removed = 0;
        for (p, c) in edges {
            if !kept.contains(&(p, c)) {
                self.del_edge(p, c);
                removed += 1;
            }
        }
        Ok(removed)
    }

    /// Root-to-node paths, each strictly increasing in effective time,
    /// capped at `thread_limit`.
    pub fn thread_of(&self, id: &NodeId) -> Result<Threads, GraphError> {
        let target = self.slot(id)?;
        let limit = self.config.thread_limit.max(1);
        let mut paths = Vec::new();
        let mut truncated = false;
        let mut stack = vec![target];
        self.collect_threads(target, &mut stack, &mut paths, limit, &mut truncated);
        Ok(Threads {
            paths: paths
                .into_iter()
                .map(|p: Vec<usize>| p.into_iter().rev().map(|s| self.nodes[s].id.clone()).collect())
                .collect(),
            truncated,
        })
    }

    fn collect_threads(
        &self,
        at: usize,
        stack: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
        limit: usize,
        truncated: &mut bool,
    ) {
        if at == ROOT {
            if out.len() == limit {
                *truncated = true;
            } else {
                out.push(stack.clone());
            }
            return;
        }
        for p in self.sorted_by_time(self.parents[at].iter().copied()) {
            if *truncated {
                return;
            }
            stack.push(p);
            self.collect_threads(p, stack, out, limit, truncated);
            stack.pop();
        }
    }

    /// Runs the full invariant suite; an empty result means the graph is
    /// healthy.
    pub fn check_invariants(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.nodes.iter().filter(|n| n.is_root()).count() != 1 || !self.nodes[ROOT].is_root() {
            out.push("exactly one root required".to_string());
        }
        let mut edges = Vec::new();
        for (p, cs) in self.children.iter().enumerate() {
            for &c in cs {
                edges.push((p, c));
                if !self.parents[c].contains(&p) {
                    out.push(format!("adjacency mismatch on {}", self.edge(p, c).child));
                }
                if self.time(p) >= self.time(c) {
                    out.push(format!("temporal: {} -> {}", self.nodes[p].id, self.nodes[c].id));
                }
                if self.nodes[p].tombstone || self.nodes[c].tombstone {
                    out.push(format!("edge touches tombstone: {} -> {}", self.nodes[p].id, self.nodes[c].id));
                }
            }
        }
        if let Err(e) = reduce::topo_order(self.nodes.len(), &edges) {
            out.push(format!("acyclicity: {e}"));
        }
        if !self.parents[ROOT].is_empty() {
            out.push("root has parents".to_string());
        }
        let reached = {
            let mut r = HashSet::from([ROOT]);
            r.extend(self.descendants(ROOT));
            r
        };
        for (s, n) in self.nodes.iter().enumerate().skip(1) {
            if n.tombstone {
                if self.index.contains(&n.id) {
                    out.push(format!("tombstone {} still indexed", n.id));
                }
                continue;
            }
            if !self.index.contains(&n.id) {
                out.push(format!("live node {} missing from index", n.id));
            }
            if self.parents[s].is_empty() {
                out.push(format!("node {} has no parents", n.id));
            }
            if !reached.contains(&s) {
                out.push(format!("node {} unreachable from root", n.id));
            }
            let ps: Vec<usize> = self.parents[s].iter().copied().collect();
            for &p in &ps {
                let others: Vec<usize> = ps.iter().copied().filter(|&q| q != p).collect();
                if let Some(q) = self.reaches_any(p, &others, None) {
                    out.push(format!("antichain: parents {} and {} of {}", self.nodes[p].id, self.nodes[q].id, n.id));
                }
            }
        }
        if self.index.len() != self.live_count() {
            out.push(format!("index holds {} entries for {} live nodes", self.index.len(), self.live_count()));
        }
        out
    }
}

fn candidates_from(index: &VectorIndex, node: &MemoryNode, k: usize, floor: f64) -> Result<Vec<ScoredId>, GraphError> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let before = node.effective_time;
    let mut hits = index.top_k(&node.embedding, k, |m| m.effective_time < before)?;
    hits.retain(|h| h.score > floor);
    Ok(hits)
}
