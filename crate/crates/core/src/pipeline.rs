//! Turning dialogue turns into memory nodes.
//!
//! Batched path ([`offline_batch`]):
//! 1. summarize every turn (parallel per turn);
//! 2. align every summary with its top-k existing nodes (parallel per
//!    summary);
//! 3. pool summaries and aligned nodes, cluster them by cosine threshold
//!    (single-threaded);
//! 4. consolidate each cluster that holds a new summary (parallel per
//!    cluster);
//!
//! then apply the resulting actions one at a time in effective-time order.
//!
//! Online path ([`online_step`]): summarize one turn, then for each summary
//! align, ask for an add/update/no-op decision and apply it before moving on.
//!
//! Items that keep failing after `retries` attempts are carried into the next
//! batch instead of being dropped.

use std::collections::{BTreeMap, HashMap};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use crate::exec::Exec;
use crate::graph::{GraphError, MemoryGraph, MutationReport};
use crate::index::{cosine, Embedding, ScoredId};
use crate::model::{ClipRange, EffectiveTime, MemoryKind, MemoryNode, NodeId, Provenance};
use crate::provider::protocol::{
    ActionsOut, ConsolidateRequest, DecideRequest, DecisionOut, DecisionVerb, MemberIn, NeighborIn, Origin,
    ProposedKind, SummariesOut, SummarizeRequest, TurnMessageIn, Verb,
};
use crate::provider::{Provider, ProviderError, ProviderStats, Task};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PipelineConfig {
    /// k for retrieval alignment.
    pub align_k: usize,
    /// Cosine threshold for clustering.
    pub cluster_threshold: f64,
    /// Extra attempts per item before it is carried.
    pub retries: u32,
    /// How many times an item may be carried before it is dead-lettered.
    pub max_carries: u32,
    /// Run the graph invariant suite after every batch or step.
    pub check_invariants: bool,
    pub exec: Exec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            align_k: 3,
            cluster_threshold: 0.80,
            retries: 2,
            max_carries: 3,
            check_invariants: cfg!(debug_assertions),
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid turn {turn_id}: {reason}")]
    InvalidTurn { turn_id: String, reason: String },
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("consolidation referenced unknown target {0}")]
    UnknownTarget(String),
    #[error("graph invariants violated: {}", .0.join("; "))]
    Invariant(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnMessage {
    pub role: String,
    pub text: String,
    pub wall_ms: i64,
}

/// Clips of one media asset referenced by a turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MediaRef {
    pub asset: String,
    pub clips: Vec<ClipRange>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub turn_id: String,
    pub session_id: String,
    pub messages: Vec<TurnMessage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub media_refs: Option<MediaRef>,
}

impl DialogueTurn {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |reason: &str| Err(PipelineError::InvalidTurn { turn_id: self.turn_id.clone(), reason: reason.into() });
        if self.turn_id.is_empty() {
            return bad("turn_id is empty");
        }
        if self.messages.is_empty() {
            return bad("messages must be nonempty");
        }
        if self.messages.windows(2).any(|w| w[1].wall_ms < w[0].wall_ms) {
            return bad("wall_ms must be nondecreasing within a turn");
        }
        if let Some(m) = &self.media_refs {
            if m.clips.iter().any(|c| !c.is_valid()) {
                return bad("clip range must satisfy 0 <= start_s <= end_s");
            }
        }
        Ok(())
    }

    pub fn last_wall_ms(&self) -> i64 {
        self.messages.last().map(|m| m.wall_ms).unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// `turn_id#n`; unique within a corpus.
    pub key: String,
    pub text: String,
    pub source_turn_id: String,
    pub session_id: String,
    pub roles: Vec<String>,
    pub proposed_kind: MemoryKind,
    /// `(last message wall_ms, 0)`; the store assigns the real seq on add.
    pub proposed_time: EffectiveTime,
    pub embedding: Embedding,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub media: Option<MediaRef>,
}

/// Work that did not finish and moves to the next batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pending {
    pub item: PendingItem,
    pub carries: u32,
    pub last_error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PendingItem {
    Turn(DialogueTurn),
    Summary(Summary),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolItem {
    pub origin: Origin,
    /// Node id or summary key.
    pub reference: String,
    pub content: String,
    pub embedding: Embedding,
    pub time: EffectiveTime,
    /// Position among the batch's summaries; 0 for existing nodes.
    pub ordinal: usize,
}

impl PoolItem {
    fn order_key(&self) -> (i64, u8, u64) {
        match self.origin {
            Origin::Existing => (self.time.wall_ms, 0, self.time.seq),
            Origin::New => (self.time.wall_ms, 1, self.ordinal as u64),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub items: Vec<PoolItem>,
}

/// Member positions into a [`CandidatePool`], temporally ordered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsolidationAction {
    pub verb: Verb,
    pub target: Option<NodeId>,
    pub new_content: Option<String>,
    /// Summary key for actions on new members.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerbCounts {
    pub add: usize,
    pub update: usize,
    pub delete: usize,
    pub noop: usize,
}

impl VerbCounts {
    fn bump(&mut self, verb: Verb) {
        match verb {
            Verb::Add => self.add += 1,
            Verb::Update => self.update += 1,
            Verb::Delete => self.delete += 1,
            Verb::Noop => self.noop += 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ApplyReport {
    pub counts: VerbCounts,
    pub added: Vec<NodeId>,
    pub updated: Vec<NodeId>,
    pub deleted: Vec<NodeId>,
    /// Children re-attached after updates.
    pub children_refreshed: usize,
    /// Orphans re-attached after deletes.
    pub orphans_repaired: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub chat_calls: u64,
    pub embed_calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub embed_tokens: u64,
    pub provider_ms: f64,
}

impl From<ProviderStats> for StageStats {
    fn from(d: ProviderStats) -> Self {
        StageStats {
            chat_calls: d.chat_calls,
            embed_calls: d.embed_calls,
            prompt_tokens: d.prompt_tokens,
            completion_tokens: d.completion_tokens,
            embed_tokens: d.embed_tokens,
            provider_ms: d.backend_ms(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchStages {
    pub summarize: StageStats,
    pub align: StageStats,
    pub cluster: StageStats,
    pub consolidate: StageStats,
    pub apply: StageStats,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub turns: usize,
    pub carried_in: usize,
    pub summaries: usize,
    pub pool_size: usize,
    pub clusters_total: usize,
    /// Clusters holding at least one new summary; one consolidation call each.
    pub clusters: usize,
    pub apply: ApplyReport,
    pub stages: BatchStages,
    pub carried_out: Vec<Pending>,
    pub dead_letter: Vec<Pending>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub summaries: usize,
    pub decisions: usize,
    pub apply: ApplyReport,
    pub stats: StageStats,
    pub carried_out: Vec<Pending>,
    pub dead_letter: Vec<Pending>,
}

/// Read and write access to the graph. Each `write` call is one atomic
/// mutation group for stores that log.
pub trait GraphHandle: Sync {
    fn read<R>(&self, f: impl FnOnce(&MemoryGraph) -> R) -> R;
    fn write<R>(&self, f: impl FnOnce(&mut MemoryGraph) -> R) -> R;
}

impl GraphHandle for RwLock<MemoryGraph> {
    fn read<R>(&self, f: impl FnOnce(&MemoryGraph) -> R) -> R {
        f(&self.read().expect("graph lock"))
    }

    fn write<R>(&self, f: impl FnOnce(&mut MemoryGraph) -> R) -> R {
        f(&mut self.write().expect("graph lock"))
    }
}

fn kind_of(k: ProposedKind) -> MemoryKind {
    match k {
        ProposedKind::Profile => MemoryKind::Profile,
        ProposedKind::Event => MemoryKind::Event,
        ProposedKind::EntityObject => MemoryKind::EntityObject,
    }
}

fn with_retries<T>(retries: u32, mut f: impl FnMut() -> Result<T, ProviderError>) -> Result<T, ProviderError> {
    let mut attempt = 0;
    loop {
        match f() {
            Ok(v) => return Ok(v),
            Err(_) if attempt < retries => attempt += 1,
            Err(e) => return Err(e),
        }
    }
}

/// One summarize call plus one embed call for the turn's summaries.
pub fn summarize_turn(provider: &Provider, turn: &DialogueTurn) -> Result<Vec<Summary>, PipelineError> {
    turn.validate()?;
    if turn.messages.iter().all(|m| m.text.trim().is_empty()) {
        return Ok(Vec::new());
    }
    let request = SummarizeRequest {
        turn_id: turn.turn_id.clone(),
        session_id: turn.session_id.clone(),
        messages: turn.messages.iter().map(|m| TurnMessageIn { role: m.role.clone(), text: m.text.clone() }).collect(),
    };
    let out: SummariesOut = provider.chat_json(Task::Summarize, &request)?;
    let out: Vec<_> = out.summaries.into_iter().filter(|s| !s.text.trim().is_empty()).collect();
    if out.is_empty() {
        return Ok(Vec::new());
    }
    let texts: Vec<String> = out.iter().map(|s| s.text.clone()).collect();
    let embeddings = provider.embed(&texts)?;
    let mut roles: Vec<String> = Vec::new();
    for m in &turn.messages {
        if !roles.contains(&m.role) {
            roles.push(m.role.clone());
        }
    }
    Ok(out
        .into_iter()
        .zip(embeddings)
        .enumerate()
        .map(|(i, (s, embedding))| Summary {
            key: format!("{}#{i}", turn.turn_id),
            text: s.text,
            source_turn_id: turn.turn_id.clone(),
            session_id: turn.session_id.clone(),
            roles: roles.clone(),
            proposed_kind: kind_of(s.kind),
            proposed_time: EffectiveTime::new(turn.last_wall_ms(), 0),
            embedding,
            media: turn.media_refs.clone(),
        })
        .collect())
}

/// Top-k live nodes of any era.
pub fn align(graph: &MemoryGraph, summary: &Summary, k: usize) -> Result<Vec<ScoredId>, PipelineError> {
    if k == 0 {
        return Ok(Vec::new());
    }
    Ok(graph.index().top_k(&summary.embedding, k, |_| true).map_err(GraphError::from)?)
}

/// Summaries plus every aligned node, each once.
pub fn build_pool(graph: &MemoryGraph, summaries: &[Summary], retrieval_sets: &[Vec<ScoredId>]) -> CandidatePool {
    let mut items = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (ordinal, s) in summaries.iter().enumerate() {
        if seen.insert(format!("new:{}", s.key)) {
            items.push(PoolItem {
                origin: Origin::New,
                reference: s.key.clone(),
                content: s.text.clone(),
                embedding: s.embedding.clone(),
                time: s.proposed_time,
                ordinal,
            });
        }
    }
    for set in retrieval_sets {
        for hit in set {
            if !seen.insert(format!("old:{}", hit.id)) {
                continue;
            }
            if let Some(node) = graph.node(&hit.id) {
                items.push(PoolItem {
                    origin: Origin::Existing,
                    reference: node.id.to_string(),
                    content: node.content.clone(),
                    embedding: node.embedding.clone(),
                    time: node.effective_time,
                    ordinal: 0,
                });
            }
        }
    }
    CandidatePool { items }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Connected components of the "cosine ≥ θ" graph over pool items.
pub fn cluster_pool(pool: &CandidatePool, threshold: f64) -> Vec<Cluster> {
    let n = pool.items.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in i + 1..n {
            let sim = cosine(&pool.items[i].embedding, &pool.items[j].embedding).unwrap_or(0.0);
            if sim >= threshold {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    let mut clusters: Vec<Cluster> = groups
        .into_values()
        .map(|mut members| {
            members.sort_by_key(|&m| pool.items[m].order_key());
            Cluster { members }
        })
        .collect();
    clusters.sort_by_key(|c| pool.items[c.members[0]].order_key());
    clusters
}

/// One consolidation call for `cluster`; the reply must name every member
/// exactly once with a verb legal for its origin.
pub fn consolidate(provider: &Provider, pool: &CandidatePool, cluster: &Cluster) -> Result<Vec<ConsolidationAction>, PipelineError> {
    let members: Vec<MemberIn> = cluster
        .members
        .iter()
        .enumerate()
        .map(|(index, &m)| {
            let it = &pool.items[m];
            MemberIn {
                index,
                origin: it.origin,
                reference: it.reference.clone(),
                content: it.content.clone(),
                effective_time: it.time,
            }
        })
        .collect();
    let request = ConsolidateRequest { members };
    let exchange = provider.chat(Task::Consolidate, provider.messages_for(Task::Consolidate, &request))?;
    let raw = exchange.response_text;
    let bad = |msg: String| PipelineError::Provider(ProviderError::protocol(msg, raw.clone()));
    let out: ActionsOut = serde_json::from_str(&raw).map_err(|e| bad(e.to_string()))?;
    if out.actions.len() != request.members.len() {
        return Err(bad(format!("{} actions for {} members", out.actions.len(), request.members.len())));
    }
    let mut seen = vec![false; request.members.len()];
    let mut actions = Vec::with_capacity(out.actions.len());
    for a in out.actions {
        let Some(member) = request.members.get(a.member_index) else {
            return Err(bad(format!("member_index {} out of range", a.member_index)));
        };
        if std::mem::replace(&mut seen[a.member_index], true) {
            return Err(bad(format!("member_index {} repeated", a.member_index)));
        }
        let content_ok = a.new_content.as_deref().is_some_and(|c| !c.trim().is_empty());
        let action = match (member.origin, a.verb) {
            (Origin::New, Verb::Add) if a.target.is_none() && content_ok => ConsolidationAction {
                verb: Verb::Add,
                target: None,
                new_content: a.new_content,
                source: Some(member.reference.clone()),
            },
            (Origin::New, Verb::Noop) if a.target.is_none() => ConsolidationAction {
                verb: Verb::Noop,
                target: None,
                new_content: None,
                source: Some(member.reference.clone()),
            },
            (Origin::Existing, Verb::Noop) if a.target.is_none() => {
                ConsolidationAction { verb: Verb::Noop, target: None, new_content: None, source: None }
            }
            (Origin::Existing, verb @ (Verb::Update | Verb::Delete)) => {
                let target = a.target.clone().unwrap_or_default();
                if target != member.reference {
                    if pool.items.iter().any(|i| i.origin == Origin::Existing && i.reference == target) {
                        return Err(bad(format!("member {} targets another member {target}", a.member_index)));
                    }
                    return Err(PipelineError::UnknownTarget(target));
                }
                if verb == Verb::Update && !content_ok {
                    return Err(bad(format!("update of member {} lacks new_content", a.member_index)));
                }
                if verb == Verb::Delete && a.new_content.is_some() {
                    return Err(bad(format!("delete of member {} carries new_content", a.member_index)));
                }
                ConsolidationAction {
                    verb,
                    target: Some(NodeId::new(target)),
                    new_content: a.new_content,
                    source: None,
                }
            }
            (origin, verb) => return Err(bad(format!("verb {verb:?} not allowed for {origin:?} member {}", a.member_index))),
        };
        actions.push(action);
    }
    Ok(actions)
}

fn node_for(summary: &Summary, content: String, embedding: Embedding, time: EffectiveTime) -> MemoryNode {
    let mut provenance = Provenance {
        source_turn_ids: vec![summary.source_turn_id.clone()],
        roles: summary.roles.clone(),
        session_id: summary.session_id.clone(),
        asset: None,
        clip_refs: Vec::new(),
    };
    if let Some(m) = &summary.media {
        if summary.proposed_kind != MemoryKind::Profile {
            provenance.asset = Some(m.asset.clone());
            provenance.clip_refs = m.clips.clone();
        }
    }
    MemoryNode::new(NodeId::for_time(time), summary.proposed_kind, content, embedding, time)
        .with_provenance(provenance)
        .with_default_attributes()
}

fn absorb(report: &mut ApplyReport, verb: Verb, m: &MutationReport) {
    match verb {
        Verb::Update => report.children_refreshed += m.affected_children.len(),
        Verb::Delete => report.orphans_repaired += m.affected_children.len(),
        _ => {}
    }
}

/// Applies actions in effective-time order of their targets (adds use their
/// summary's time). Each mutation is one `write` group. Text that differs
/// from the source summary is re-embedded in one batched call.
pub fn apply_actions(
    handle: &impl GraphHandle,
    provider: &Provider,
    actions: Vec<ConsolidationAction>,
    summaries: &HashMap<String, Summary>,
) -> Result<ApplyReport, PipelineError> {
    let mut report = ApplyReport::default();
    let mut keyed = Vec::with_capacity(actions.len());
    for (i, a) in actions.into_iter().enumerate() {
        let key = match (&a.target, &a.source) {
            (Some(t), _) => {
                let time = handle
                    .read(|g| g.node(t).map(|n| n.effective_time))
                    .ok_or_else(|| PipelineError::UnknownTarget(t.to_string()))?;
                (time.wall_ms, 0u8, time.seq, i)
            }
            (None, Some(s)) => {
                let s = summaries.get(s).ok_or_else(|| PipelineError::UnknownTarget(s.clone()))?;
                (s.proposed_time.wall_ms, 1, 0, i)
            }
            (None, None) => (i64::MIN, 0, 0, i),
        };
        keyed.push((key, a));
    }
    keyed.sort_by_key(|(k, _)| *k);

    let mut to_embed: Vec<String> = Vec::new();
    for (_, a) in &keyed {
        if let Some(c) = &a.new_content {
            let reuse = a.source.as_ref().and_then(|s| summaries.get(s)).is_some_and(|s| &s.text == c);
            if !reuse && !to_embed.contains(c) {
                to_embed.push(c.clone());
            }
        }
    }
    let fresh: HashMap<String, Embedding> = to_embed.iter().cloned().zip(provider.embed(&to_embed)?).collect();
    let embedding_for = |a: &ConsolidationAction, content: &str| -> Embedding {
        match a.source.as_ref().and_then(|s| summaries.get(s)) {
            Some(s) if s.text == content => s.embedding.clone(),
            _ => fresh[content].clone(),
        }
    };

    for (_, a) in keyed {
        report.counts.bump(a.verb);
        match a.verb {
            Verb::Noop => {}
            Verb::Add => {
                let summary = &summaries[a.source.as_ref().expect("add has a source")];
                let content = a.new_content.clone().expect("add has content");
                let embedding = embedding_for(&a, &content);
                let id = handle.write(|g| {
                    let time = g.allocate_time(summary.proposed_time.wall_ms);
                    let node = node_for(summary, content, embedding, time);
                    g.insert(node).map(|r| r.node_id)
                })?;
                report.added.push(id);
            }
            Verb::Update => {
                let target = a.target.clone().expect("update has a target");
                let content = a.new_content.clone().expect("update has content");
                let embedding = embedding_for(&a, &content);
                let m = handle.write(|g| g.apply_update(&target, content, embedding))?;
                absorb(&mut report, Verb::Update, &m);
                report.updated.push(target);
            }
            Verb::Delete => {
                let target = a.target.clone().expect("delete has a target");
                let m = handle.write(|g| g.apply_delete(&target))?;
                absorb(&mut report, Verb::Delete, &m);
                report.deleted.push(target);
            }
        }
    }
    Ok(report)
}

fn check(handle: &impl GraphHandle, cfg: &PipelineConfig) -> Result<(), PipelineError> {
    if cfg.check_invariants {
        let v = handle.read(|g| g.check_invariants());
        if !v.is_empty() {
            return Err(PipelineError::Invariant(v));
        }
    }
    Ok(())
}

fn carry(item: PendingItem, prior: u32, err: &PipelineError, cfg: &PipelineConfig, out: &mut Vec<Pending>, dead: &mut Vec<Pending>) {
    let p = Pending { item, carries: prior + 1, last_error: err.to_string() };
    if prior >= cfg.max_carries {
        dead.push(Pending { carries: prior, ..p });
    } else {
        out.push(p);
    }
}

/// Runs the four-stage batch over fresh turns plus carried work.
pub fn offline_batch(
    handle: &impl GraphHandle,
    provider: &Provider,
    turns: Vec<DialogueTurn>,
    carried: Vec<Pending>,
    cfg: &PipelineConfig,
) -> Result<BatchReport, PipelineError> {
    for t in &turns {
        t.validate()?;
    }
    let mut report = BatchReport { turns: turns.len(), carried_in: carried.len(), ..BatchReport::default() };
    if turns.is_empty() && carried.is_empty() {
        return Ok(report);
    }

    // work items: (item, carries so far)
    let mut turn_items: Vec<(DialogueTurn, u32)> = Vec::new();
    let mut summary_items: Vec<(Summary, u32)> = Vec::new();
    for p in carried {
        match p.item {
            PendingItem::Turn(t) => turn_items.push((t, p.carries)),
            PendingItem::Summary(s) => summary_items.push((s, p.carries)),
        }
    }
    turn_items.extend(turns.into_iter().map(|t| (t, 0)));

    // stage 1: summarize, parallel per turn
    let before = provider.stats();
    let results = cfg.exec.map(&turn_items, |(t, _)| {
        let mut last = None;
        for _ in 0..=cfg.retries {
            match summarize_turn(provider, t) {
                Ok(s) => return Ok(s),
                Err(e) => last = Some(e),
            }
        }
        Err(last.expect("at least one attempt"))
    });
    let mut summaries: Vec<Summary> = Vec::new();
    let mut carries_of: HashMap<String, u32> = HashMap::new();
    for (s, c) in summary_items {
        carries_of.insert(s.key.clone(), c);
        summaries.push(s);
    }
    for ((turn, prior), r) in turn_items.into_iter().zip(results) {
        match r {
            Ok(ss) => {
                for s in ss {
                    carries_of.insert(s.key.clone(), prior);
                    summaries.push(s);
                }
            }
            Err(e) => carry(PendingItem::Turn(turn), prior, &e, cfg, &mut report.carried_out, &mut report.dead_letter),
        }
    }
    let after_summarize = provider.stats();
    report.stages.summarize = after_summarize.delta_since(&before).into();
    report.summaries = summaries.len();

    // stage 2: align, parallel per summary
    let retrieval_sets = handle.read(|g| {
        cfg.exec.map(&summaries, |s| align(g, s, cfg.align_k)).into_iter().collect::<Result<Vec<_>, _>>()
    })?;
    let after_align = provider.stats();
    report.stages.align = after_align.delta_since(&after_summarize).into();

    // stage 3: pool and cluster, single-threaded
    let pool = handle.read(|g| build_pool(g, &summaries, &retrieval_sets));
    let clusters = cluster_pool(&pool, cfg.cluster_threshold);
    let active: Vec<Cluster> = clusters
        .iter()
        .filter(|c| c.members.iter().any(|&m| pool.items[m].origin == Origin::New))
        .cloned()
        .collect();
    report.pool_size = pool.items.len();
    report.clusters_total = clusters.len();
    report.clusters = active.len();
    let after_cluster = provider.stats();
    report.stages.cluster = after_cluster.delta_since(&after_align).into();

    // stage 4: consolidate, parallel per cluster
    let results = cfg.exec.map(&active, |c| {
        let mut last = None;
        for _ in 0..=cfg.retries {
            match consolidate(provider, &pool, c) {
                Ok(a) => return Ok(a),
                Err(e @ PipelineError::UnknownTarget(_)) => return Err(e),
                Err(e) => last = Some(e),
            }
        }
        Err(last.expect("at least one attempt"))
    });
    let by_key: HashMap<String, Summary> = summaries.into_iter().map(|s| (s.key.clone(), s)).collect();
    let mut actions = Vec::new();
    for (c, r) in active.iter().zip(results) {
        match r {
            Ok(a) => actions.extend(a),
            Err(e @ PipelineError::UnknownTarget(_)) => return Err(e),
            Err(e) => {
                for &m in &c.members {
                    let it = &pool.items[m];
                    if it.origin == Origin::New {
                        let s = by_key[&it.reference].clone();
                        let prior = carries_of.get(&s.key).copied().unwrap_or(0);
                        carry(PendingItem::Summary(s), prior, &e, cfg, &mut report.carried_out, &mut report.dead_letter);
                    }
                }
            }
        }
    }
    let after_consolidate = provider.stats();
    report.stages.consolidate = after_consolidate.delta_since(&after_cluster).into();

    report.apply = apply_actions(handle, provider, actions, &by_key)?;
    report.stages.apply = provider.stats().delta_since(&after_consolidate).into();
    check(handle, cfg)?;
    Ok(report)
}

/// Batch size one: no clustering, one decision call per summary.
pub fn online_step(
    handle: &impl GraphHandle,
    provider: &Provider,
    turn: Option<&DialogueTurn>,
    carried: Vec<Pending>,
    cfg: &PipelineConfig,
) -> Result<StepReport, PipelineError> {
    let before = provider.stats();
    let mut report = StepReport::default();
    let mut work: Vec<(Summary, u32)> = Vec::new();
    let mut turns: Vec<(DialogueTurn, u32)> = Vec::new();
    for p in carried {
        match p.item {
            PendingItem::Turn(t) => turns.push((t, p.carries)),
            PendingItem::Summary(s) => work.push((s, p.carries)),
        }
    }
    if let Some(t) = turn {
        t.validate()?;
        turns.push((t.clone(), 0));
    }
    for (t, prior) in turns {
        match with_retries_pipeline(cfg.retries, || summarize_turn(provider, &t)) {
            Ok(ss) => work.extend(ss.into_iter().map(|s| (s, prior))),
            Err(e) => carry(PendingItem::Turn(t), prior, &e, cfg, &mut report.carried_out, &mut report.dead_letter),
        }
    }
    report.summaries = work.len();

    for (s, prior) in work {
        let neighbors = handle.read(|g| -> Result<Vec<NeighborIn>, PipelineError> {
            Ok(align(g, &s, cfg.align_k)?
                .into_iter()
                .map(|h| NeighborIn {
                    content: g.node(&h.id).map(|n| n.content.clone()).unwrap_or_default(),
                    id: h.id.to_string(),
                    score: h.score,
                })
                .collect())
        })?;
        let request = DecideRequest { candidate: s.text.clone(), neighbors };
        report.decisions += 1;
        let decision = with_retries(cfg.retries, || provider.chat_json::<DecisionOut>(Task::Decide, &request))
            .map_err(PipelineError::from)
            .and_then(|d| decision_action(d, &s, &request));
        match decision {
            Ok(action) => {
                let summaries = HashMap::from([(s.key.clone(), s)]);
                let applied = apply_actions(handle, provider, vec![action], &summaries)?;
                merge_apply(&mut report.apply, applied);
            }
            Err(e @ PipelineError::UnknownTarget(_)) => return Err(e),
            Err(e) => carry(PendingItem::Summary(s), prior, &e, cfg, &mut report.carried_out, &mut report.dead_letter),
        }
    }
    report.stats = provider.stats().delta_since(&before).into();
    check(handle, cfg)?;
    Ok(report)
}

fn with_retries_pipeline<T>(retries: u32, mut f: impl FnMut() -> Result<T, PipelineError>) -> Result<T, PipelineError> {
    let mut attempt = 0;
    loop {
        match f() {
            Ok(v) => return Ok(v),
            Err(e @ PipelineError::InvalidTurn { .. }) => return Err(e),
            Err(_) if attempt < retries => attempt += 1,
            Err(e) => return Err(e),
        }
    }
}

fn decision_action(d: DecisionOut, s: &Summary, req: &DecideRequest) -> Result<ConsolidationAction, PipelineError> {
    let raw = serde_json::to_string(&d).expect("decision serializes");
    let bad = |m: &str| PipelineError::Provider(ProviderError::protocol(m, raw.clone()));
    let content_ok = d.new_content.as_deref().is_some_and(|c| !c.trim().is_empty());
    match d.decision {
        DecisionVerb::Noop => Ok(ConsolidationAction { verb: Verb::Noop, target: None, new_content: None, source: Some(s.key.clone()) }),
        DecisionVerb::Add if content_ok && d.target.is_none() => Ok(ConsolidationAction {
            verb: Verb::Add,
            target: None,
            new_content: d.new_content,
            source: Some(s.key.clone()),
        }),
        DecisionVerb::Update if content_ok => {
            let target = d.target.ok_or_else(|| bad("update without target"))?;
            if !req.neighbors.iter().any(|n| n.id == target) {
                return Err(PipelineError::UnknownTarget(target));
            }
            Ok(ConsolidationAction {
                verb: Verb::Update,
                target: Some(NodeId::new(target)),
                new_content: d.new_content,
                source: Some(s.key.clone()),
            })
        }
        _ => Err(bad("decision fields inconsistent with verb")),
    }
}

fn merge_apply(into: &mut ApplyReport, from: ApplyReport) {
    into.counts.add += from.counts.add;
    into.counts.update += from.counts.update;
    into.counts.delete += from.counts.delete;
    into.counts.noop += from.counts.noop;
    into.added.extend(from.added);
    into.updated.extend(from.updated);
    into.deleted.extend(from.deleted);
    into.children_refreshed += from.children_refreshed;
    into.orphans_repaired += from.orphans_repaired;
}
