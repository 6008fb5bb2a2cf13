//! Deterministic backends for tests, benches and offline demos.
//!
//! [`MockEmbedder`] is signed feature hashing: each distinct token adds ±1
//! to one seeded bucket, then the vector is normalized. Identical token sets
//! give identical vectors, and when no two tokens of a pair of texts share a
//! bucket the cosine is exactly `|A∩B| / sqrt(|A|·|B|)`, which is at least
//! the overlap `|A∩B| / max(|A|, |B|)`. Texts sharing 80% of their tokens
//! therefore land at cosine ≥ 0.8 unless a bucket collision intervenes.
//!
//! [`MockChat`] answers each task with a fixed rule:
//! - summarize: one summary per sentence of each user message; a leading
//!   `[profile]` or `[object]` tag sets the kind;
//! - consolidate / decide: a new item whose token set equals a known one is a
//!   no-op; a `CORRECTION:` item rewrites the closest existing item; a
//!   `RETRACT:` item deletes it (consolidation only); anything else is added;
//! - agent: `video.retrieval`, then `video.rag`, then `finish`;
//! - rag / final answer: fixed headers over the given entries.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Mutex;

use super::protocol::*;
use super::{ChatBackend, ChatReply, ChatRequest, EmbedBackend, EmbedReply, ProviderError, Usage};
use crate::text::{estimate_tokens, jaccard, sentences, token_set, tokens};

pub const CORRECTION_MARKER: &str = "CORRECTION:";
pub const RETRACT_MARKER: &str = "RETRACT:";

/// Cosine above which the decision rule treats a neighbor as the same topic.
pub const DECIDE_MATCH: f64 = 0.80;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Marker {
    Correction,
    Retract,
}

/// Splits a leading marker off `text`.
pub fn split_marker(text: &str) -> (Option<Marker>, &str) {
    let t = text.trim_start();
    if let Some(rest) = t.strip_prefix(CORRECTION_MARKER) {
        (Some(Marker::Correction), rest.trim())
    } else if let Some(rest) = t.strip_prefix(RETRACT_MARKER) {
        (Some(Marker::Retract), rest.trim())
    } else {
        (None, text.trim())
    }
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(bytes) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    // splitmix finalizer so high and low bits are both usable
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

#[derive(Debug, Clone)]
pub struct MockEmbedder {
    dim: usize,
    seed: u64,
}

impl MockEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        MockEmbedder { dim, seed }
    }

    /// Unnormalized hash features of `text`.
    pub fn features(&self, text: &str) -> Vec<f64> {
        let mut toks: BTreeSet<String> = tokens(text).into_iter().collect();
        if toks.is_empty() {
            toks.insert(text.to_string());
        }
        let mut v = vec![0.0; self.dim];
        for t in &toks {
            let h = fnv1a(self.seed, t.as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            v[bucket] += if h >> 63 == 1 { -1.0 } else { 1.0 };
        }
        if v.iter().all(|x| *x == 0.0) {
            // every token cancelled out; fall back to a single feature
            let h = fnv1a(self.seed ^ 0x9e37_79b9, text.as_bytes());
            v[(h % self.dim as u64) as usize] = 1.0;
        }
        v
    }
}

impl EmbedBackend for MockEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<EmbedReply, ProviderError> {
        let tokens: u64 = texts.iter().map(|t| estimate_tokens(t)).sum();
        Ok(EmbedReply {
            vectors: texts.iter().map(|t| self.features(t)).collect(),
            tokens: None,
            latency_ms: Some(5.0 + 0.01 * tokens as f64),
        })
    }
}

/// Rule-based chat backend; see the module docs for the rules.
#[derive(Debug, Clone, Default)]
pub struct MockChat;

impl MockChat {
    pub fn new() -> Self {
        MockChat
    }
}

fn parse<T: for<'de> serde::Deserialize<'de>>(req: &ChatRequest) -> Result<T, ProviderError> {
    serde_json::from_str(req.payload())
        .map_err(|e| ProviderError::protocol(format!("mock cannot read {} payload: {e}", req.task.as_str()), req.payload()))
}

fn json(v: &impl serde::Serialize) -> String {
    serde_json::to_string(v).expect("reply serializes")
}

impl ChatBackend for MockChat {
    fn complete(&self, req: &ChatRequest) -> Result<ChatReply, ProviderError> {
        let text = match req.task {
            Task::Summarize => json(&summarize(&parse(req)?)),
            Task::Consolidate => json(&consolidate(&parse(req)?)),
            Task::Decide => json(&decide(&parse(req)?)),
            Task::AgentAction => json(&agent_action(&parse(req)?)),
            Task::Rag => rag(&parse(req)?),
            Task::FinalAnswer => final_answer(&parse(req)?),
        };
        let prompt: u64 = req.messages.iter().map(|m| estimate_tokens(&m.content)).sum();
        let completion = estimate_tokens(&text);
        Ok(ChatReply {
            latency_ms: Some(40.0 + 0.02 * prompt as f64 + 0.2 * completion as f64),
            usage: None,
            text,
        })
    }
}

pub fn summarize(req: &SummarizeRequest) -> SummariesOut {
    let mut summaries = Vec::new();
    for m in req.messages.iter().filter(|m| m.role == "user") {
        for s in sentences(&m.text) {
            let (kind, text) = if let Some(rest) = s.strip_prefix("[profile]") {
                (ProposedKind::Profile, rest.trim())
            } else if let Some(rest) = s.strip_prefix("[object]") {
                (ProposedKind::EntityObject, rest.trim())
            } else {
                (ProposedKind::Event, s.as_str())
            };
            if !tokens(text).is_empty() {
                summaries.push(SummaryOut { text: text.to_string(), kind });
            }
        }
    }
    SummariesOut { summaries }
}

pub fn consolidate(req: &ConsolidateRequest) -> ActionsOut {
    let noop = |i| ActionOut { member_index: i, verb: Verb::Noop, target: None, new_content: None };
    let mut actions: Vec<ActionOut> = req.members.iter().map(|m| noop(m.index)).collect();
    // position -> current token set of members still alive in the cluster
    let mut known: BTreeMap<usize, BTreeSet<String>> = BTreeMap::new();
    let best = |known: &BTreeMap<usize, BTreeSet<String>>, set: &BTreeSet<String>, origin: Origin| {
        known
            .iter()
            .filter(|(p, _)| req.members[**p].origin == origin)
            .map(|(p, s)| (jaccard(set, s), *p))
            .max_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|(_, p)| p)
    };
    for (pos, m) in req.members.iter().enumerate() {
        if m.origin == Origin::Existing {
            known.insert(pos, token_set(&m.content));
            continue;
        }
        let (marker, body) = split_marker(&m.content);
        let set = token_set(body);
        if known.values().any(|s| *s == set) {
            continue;
        }
        match marker {
            Some(Marker::Correction) => {
                if let Some(e) = best(&known, &set, Origin::Existing) {
                    actions[e] = ActionOut {
                        member_index: req.members[e].index,
                        verb: Verb::Update,
                        target: Some(req.members[e].reference.clone()),
                        new_content: Some(body.to_string()),
                    };
                    known.insert(e, set);
                } else if let Some(a) = best(&known, &set, Origin::New) {
                    actions[a].new_content = Some(body.to_string());
                    known.insert(a, set);
                } else {
                    actions[pos].verb = Verb::Add;
                    actions[pos].new_content = Some(body.to_string());
                    known.insert(pos, set);
                }
            }
            Some(Marker::Retract) => {
                if let Some(e) = best(&known, &set, Origin::Existing) {
                    actions[e] = ActionOut {
                        member_index: req.members[e].index,
                        verb: Verb::Delete,
                        target: Some(req.members[e].reference.clone()),
                        new_content: None,
                    };
                    known.remove(&e);
                }
            }
            None => {
                actions[pos].verb = Verb::Add;
                actions[pos].new_content = Some(body.to_string());
                known.insert(pos, set);
            }
        }
    }
    ActionsOut { actions }
}

pub fn decide(req: &DecideRequest) -> DecisionOut {
    let (marker, body) = split_marker(&req.candidate);
    let set = token_set(body);
    let noop = DecisionOut { decision: DecisionVerb::Noop, target: None, new_content: None };
    if req.neighbors.iter().any(|n| token_set(&n.content) == set) {
        return noop;
    }
    match marker {
        Some(Marker::Correction) => {
            let target = req
                .neighbors
                .iter()
                .enumerate()
                .filter(|(_, n)| n.score >= DECIDE_MATCH)
                .max_by(|a, b| a.1.score.total_cmp(&b.1.score).then(b.0.cmp(&a.0)))
                .map(|(_, n)| n.id.clone());
            match target {
                Some(id) => DecisionOut {
                    decision: DecisionVerb::Update,
                    target: Some(id),
                    new_content: Some(body.to_string()),
                },
                None => DecisionOut { decision: DecisionVerb::Add, target: None, new_content: Some(body.to_string()) },
            }
        }
        Some(Marker::Retract) => noop,
        None => DecisionOut { decision: DecisionVerb::Add, target: None, new_content: Some(body.to_string()) },
    }
}

pub fn agent_action(req: &AgentRequest) -> AgentActionOut {
    let args = serde_json::json!({ "query": req.query });
    let action = match req.steps.len() {
        0 => "video.retrieval",
        1 => "video.rag",
        _ => return AgentActionOut { action: "finish".into(), args: serde_json::json!({}) },
    };
    AgentActionOut { action: action.into(), args }
}

pub fn rag(req: &RagRequest) -> String {
    let mut out = format!("Grounded summary of {} entries", req.entries.len());
    for e in &req.entries {
        out.push_str("\n- ");
        out.push_str(e);
    }
    out
}

pub fn final_answer(req: &FinalRequest) -> String {
    let evidence = req
        .steps
        .iter()
        .rev()
        .map(|s| s.result.lines().next().unwrap_or(""))
        .find(|l| !l.is_empty())
        .unwrap_or("no evidence");
    format!("ANSWER: {} ({} steps; {})", req.query, req.steps.len(), evidence)
}

/// Replays canned replies in order; records every request it saw.
#[derive(Debug, Default)]
pub struct ScriptedChat {
    replies: Mutex<VecDeque<String>>,
    seen: Mutex<Vec<ChatRequest>>,
}

impl ScriptedChat {
    pub fn new<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ScriptedChat { replies: Mutex::new(replies.into_iter().map(Into::into).collect()), seen: Mutex::default() }
    }

    pub fn push(&self, reply: impl Into<String>) {
        self.replies.lock().expect("script lock").push_back(reply.into());
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.seen.lock().expect("script lock").clone()
    }

    pub fn remaining(&self) -> usize {
        self.replies.lock().expect("script lock").len()
    }
}

impl ChatBackend for ScriptedChat {
    fn complete(&self, req: &ChatRequest) -> Result<ChatReply, ProviderError> {
        self.seen.lock().expect("script lock").push(req.clone());
        let text = self
            .replies
            .lock()
            .expect("script lock")
            .pop_front()
            .ok_or_else(|| ProviderError::Transport("script exhausted".into()))?;
        Ok(ChatReply { text, usage: Some(Usage { prompt_tokens: 10, completion_tokens: 5 }), latency_ms: Some(1.0) })
    }
}

type RequestFilter = Box<dyn Fn(&ChatRequest) -> bool + Send + Sync>;

/// Fails matching requests with a transport error a fixed number of times,
/// then delegates.
pub struct Flaky<B> {
    inner: B,
    matches: RequestFilter,
    remaining: Mutex<u64>,
}

impl<B: ChatBackend> Flaky<B> {
    pub fn new(inner: B, failures: u64, matches: impl Fn(&ChatRequest) -> bool + Send + Sync + 'static) -> Self {
        Flaky { inner, matches: Box::new(matches), remaining: Mutex::new(failures) }
    }
}

impl<B: ChatBackend> ChatBackend for Flaky<B> {
    fn complete(&self, req: &ChatRequest) -> Result<ChatReply, ProviderError> {
        if (self.matches)(req) {
            let mut left = self.remaining.lock().expect("flaky lock");
            if *left > 0 {
                *left -= 1;
                return Err(ProviderError::Transport("injected failure".into()));
            }
        }
        self.inner.complete(req)
    }
}
