//! Replay benchmark: a seeded synthetic dialogue corpus with scripted
//! retrieval probes, and a runner that replays it per turn or in batches.
//!
//! Corpus shape: sessions of turns, each user message stating a few facts.
//! Every fact statement occurs twice within its session, so half of all
//! statements are duplicates. Facts belong to topics that share three
//! tokens, which is what links them into threads. Later sessions revise
//! earlier facts with `CORRECTION:` statements that change one token.
//!
//! Each probe asks about the newest fact of a topic and expects every fact
//! of that topic, in its final wording, in the retrieved context.

use std::collections::{BTreeSet, HashSet};
use std::io::BufRead;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::model::ClipRange;
use crate::pipeline::{DialogueTurn, MediaRef, TurnMessage};
use crate::provider::mock::{MockEmbedder, CORRECTION_MARKER};
use crate::provider::{Provider, ProviderStats};
use crate::storage::StorageError;
use crate::store::{MemoryStore, StoreConfig, StoreError};
use crate::text::tokens;

pub const BENCH_DIM: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub sessions: usize,
    pub turns_per_session: usize,
    pub facts_per_turn: usize,
    pub topics: usize,
    pub corrections_per_session: usize,
    /// Every n-th turn of a session carries a media clip.
    pub media_every: usize,
    pub dim: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            sessions: 10,
            turns_per_session: 20,
            facts_per_turn: 2,
            topics: 40,
            corrections_per_session: 3,
            media_every: 4,
            dim: BENCH_DIM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub probe_id: String,
    pub query: String,
    /// Normalized contents (lowercase tokens joined by spaces) that the
    /// retrieved context must contain.
    pub expected: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub turns: Vec<DialogueTurn>,
    pub probes: Vec<Probe>,
    /// Distinct statements, i.e. the node count a perfect deduplicator keeps.
    pub distinct_statements: usize,
    pub corrections: usize,
}

pub fn normalize(text: &str) -> String {
    tokens(text).join(" ")
}

struct Fact {
    topic: usize,
    words: Vec<String>,
    tag: &'static str,
    session: usize,
}

impl Fact {
    fn text(&self) -> String {
        sentence(&self.words)
    }
}

fn sentence(words: &[String]) -> String {
    let mut s = words.join(" ");
    if let Some(first) = s.get(..1) {
        let up = first.to_uppercase();
        s.replace_range(..1, &up);
    }
    s.push('.');
    s
}

struct Words {
    used: HashSet<String>,
}

impl Words {
    fn fresh(&mut self, rng: &mut ChaCha8Rng) -> String {
        const C: &[u8] = b"bdfgklmnprstvz";
        const V: &[u8] = b"aeiou";
        loop {
            let w: String = (0..3)
                .flat_map(|_| [C[rng.random_range(0..C.len())] as char, V[rng.random_range(0..V.len())] as char])
                .collect();
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

fn unit(e: &MockEmbedder, text: &str) -> Vec<f64> {
    let mut v = e.features(text);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const TOPIC_WORDS: usize = 3;
const FACT_WORDS: usize = 7;
/// Distinct facts stay below this cosine so they never cluster or match.
const DISTINCT_MAX: f64 = 0.75;
/// Corrections stay at least this close to the fact they revise.
const CORRECTION_MIN: f64 = 0.82;

/// Builds the corpus for `seed`. `embed_seed` must match the embedder the
/// replay uses, since cosine relations are checked against it.
pub fn generate(cfg: &CorpusConfig, seed: u64, embed_seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embedder = MockEmbedder::new(cfg.dim, embed_seed);
    let mut words = Words { used: HashSet::new() };
    let topics: Vec<Vec<String>> =
        (0..cfg.topics).map(|_| (0..TOPIC_WORDS).map(|_| words.fresh(&mut rng)).collect()).collect();
    let mut facts: Vec<Fact> = Vec::new();
    // current vectors of every fact, for distinctness checks
    let mut vectors: Vec<Vec<f64>> = Vec::new();
    let mut corrected: HashSet<usize> = HashSet::new();
    let mut next_topic = 0;
    let mut turns = Vec::new();
    let mut correction_count = 0;
    let mut distinct = 0;

    let per_session = cfg.turns_per_session * cfg.facts_per_turn / 2;
    for s in 0..cfg.sessions {
        let mut statements: Vec<String> = Vec::new();
        let earlier: Vec<usize> = (0..facts.len()).filter(|i| facts[*i].session < s && !corrected.contains(i)).collect();
        let n_corr = cfg.corrections_per_session.min(earlier.len()).min(per_session);
        let mut picks = earlier;
        picks.shuffle(&mut rng);
        let mut placed = 0;
        for &target in &picks {
            if placed == n_corr {
                break;
            }
            let old = vectors[target].clone();
            let mut attempt = 0;
            loop {
                attempt += 1;
                let pos = TOPIC_WORDS + rng.random_range(0..FACT_WORDS);
                let mut new_words = facts[target].words.clone();
                new_words[pos] = words.fresh(&mut rng);
                let body = sentence(&new_words);
                let stmt = format!("{CORRECTION_MARKER} {body}");
                let sv = unit(&embedder, &stmt);
                let bv = unit(&embedder, &body);
                let close = cos(&sv, &old) >= CORRECTION_MIN;
                let apart = vectors
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != target)
                    .all(|(_, v)| cos(&sv, v) < DISTINCT_MAX && cos(&bv, v) < DISTINCT_MAX);
                if close && apart {
                    placed += 1;
                    facts[target].words = new_words;
                    vectors[target] = bv;
                    statements.push(stmt);
                    corrected.insert(target);
                    break;
                }
                if attempt > 200 {
                    // this fact sits too close to a neighbour; revise another one
                    break;
                }
            }
        }
        correction_count += placed;
        while statements.len() < per_session {
            let topic = next_topic % cfg.topics;
            next_topic += 1;
            let tag = match rng.random_range(0..20) {
                0..=2 => "[profile] ",
                3..=4 => "[object] ",
                _ => "",
            };
            let mut attempt = 0;
            loop {
                attempt += 1;
                let mut w = topics[topic].clone();
                w.extend((0..FACT_WORDS).map(|_| words.fresh(&mut rng)));
                let fact = Fact { topic, words: w, tag, session: s };
                let v = unit(&embedder, &fact.text());
                if vectors.iter().all(|u| cos(&v, u) < DISTINCT_MAX) || attempt > 200 {
                    assert!(attempt <= 200, "cannot place a fact for seed {seed}");
                    statements.push(format!("{}{}", fact.tag, fact.text()));
                    facts.push(fact);
                    vectors.push(v);
                    break;
                }
            }
        }
        distinct += statements.len();

        // every statement twice, never twice in one turn
        let mut slots: Vec<String> = statements.iter().chain(statements.iter()).cloned().collect();
        slots.shuffle(&mut rng);
        let f = cfg.facts_per_turn;
        for t in 0..cfg.turns_per_session {
            for a in 0..f {
                let i = t * f + a;
                if slots[t * f..i].contains(&slots[i]) {
                    let j = (0..slots.len())
                        .find(|&j| {
                            let (tj, _) = (j / f, j % f);
                            tj != t && !slots[t * f..t * f + f].contains(&slots[j]) && !slots[tj * f..tj * f + f].contains(&slots[i])
                        })
                        .expect("a swap partner exists");
                    slots.swap(i, j);
                }
            }
        }

        let day = 86_400_000i64;
        for t in 0..cfg.turns_per_session {
            let wall = 1_700_000_000_000 + s as i64 * day + t as i64 * 60_000;
            let text = slots[t * f..(t + 1) * f].join(" ");
            let media_refs = (cfg.media_every > 0 && t % cfg.media_every == 0).then(|| MediaRef {
                asset: format!("cam-{s:02}"),
                clips: vec![ClipRange::new(t as f64 * 30.0, t as f64 * 30.0 + 12.0)],
            });
            turns.push(DialogueTurn {
                turn_id: format!("s{s:02}-t{t:02}"),
                session_id: format!("s{s:02}"),
                messages: vec![
                    TurnMessage { role: "user".into(), text, wall_ms: wall },
                    TurnMessage { role: "assistant".into(), text: "Noted.".into(), wall_ms: wall + 5_000 },
                ],
                media_refs,
            });
        }
    }

    let mut probes = Vec::new();
    for (topic, topic_words) in topics.iter().enumerate() {
        let members: Vec<&Fact> = facts.iter().filter(|f| f.topic == topic).collect();
        let Some(target) = members.last() else { continue };
        let mut specific: Vec<String> = target.words[TOPIC_WORDS..].to_vec();
        specific.shuffle(&mut rng);
        let mut q = topic_words.clone();
        q.extend(specific.into_iter().take(3));
        probes.push(Probe {
            probe_id: format!("p{topic:02}"),
            query: q.join(" "),
            expected: members.iter().map(|f| normalize(&f.text())).collect(),
        });
    }
    Corpus { turns, probes, distinct_statements: distinct, corrections: correction_count }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    PerTurn,
    Batched,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per_turn" => Ok(Mode::PerTurn),
            "batched" => Ok(Mode::Batched),
            other => Err(format!("unknown mode `{other}` (expected per_turn or batched)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p50: f64,
    pub p95: f64,
}

/// Nearest-rank percentiles; zeros for no samples.
pub fn percentiles(samples: &[f64]) -> Percentiles {
    if samples.is_empty() {
        return Percentiles { p50: 0.0, p95: 0.0 };
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = |p: f64| v[((p * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1];
    Percentiles { p50: rank(0.50), p95: rank(0.95) }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub probe_id: String,
    pub recall: f64,
    pub missing: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub mode: Mode,
    pub seed: u64,
    pub turns: usize,
    pub input_summaries: usize,
    /// Provider usage of the write phase.
    pub write: ProviderStats,
    /// Provider usage of the probe phase.
    pub read: ProviderStats,
    pub node_count: usize,
    pub edge_count: usize,
    /// Live nodes per input summary.
    pub dedup_ratio: f64,
    /// Simulated backend time per write call (a turn, or a batch).
    pub write_latency_ms: Percentiles,
    pub read_latency_ms: Percentiles,
    pub probes: usize,
    pub probe_recall: f64,
    pub probe_results: Vec<ProbeResult>,
    pub pending: usize,
    pub dead_letter: usize,
    pub invariant_violations: Vec<String>,
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchOptions {
    pub seed: u64,
    pub dim: usize,
    pub batch_size: usize,
    pub store: StoreConfig,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions { seed: 7, dim: BENCH_DIM, batch_size: 20, store: StoreConfig::default() }
    }
}

pub struct BenchRun {
    pub report: BenchReport,
    pub store: MemoryStore,
}

/// Recall of every probe against `store`, plus simulated read latencies.
pub fn run_probes(store: &MemoryStore, probes: &[Probe]) -> Result<(Vec<ProbeResult>, Vec<f64>), StoreError> {
    let mut results = Vec::with_capacity(probes.len());
    let mut latencies = Vec::with_capacity(probes.len());
    for p in probes {
        let before = store.provider().stats();
        let r = store.retrieve(&p.query, None)?;
        latencies.push(store.provider().stats().delta_since(&before).backend_ms());
        let got: BTreeSet<String> = r.context.entries.iter().map(|e| normalize(&e.content)).collect();
        let missing: Vec<String> = p.expected.iter().filter(|e| !got.contains(&normalize(e))).cloned().collect();
        let recall = if p.expected.is_empty() { 1.0 } else { 1.0 - missing.len() as f64 / p.expected.len() as f64 };
        results.push(ProbeResult { probe_id: p.probe_id.clone(), recall, missing });
    }
    Ok((results, latencies))
}

/// Replays `turns` into a fresh in-memory store under the mock provider,
/// then runs the probes.
pub fn bench_replay(turns: &[DialogueTurn], probes: &[Probe], mode: Mode, opts: &BenchOptions) -> Result<BenchRun, StoreError> {
    let provider = Arc::new(Provider::mock(opts.dim, opts.seed));
    bench_with(turns, probes, mode, opts, provider)
}

/// [`bench_replay`] with a caller-supplied provider.
pub fn bench_with(
    turns: &[DialogueTurn],
    probes: &[Probe],
    mode: Mode,
    opts: &BenchOptions,
    provider: Arc<Provider>,
) -> Result<BenchRun, StoreError> {
    let store = MemoryStore::in_memory(provider.clone(), opts.store.clone());
    let start = provider.stats();
    let mut write_lat = Vec::new();
    let mut input_summaries = 0;
    match mode {
        Mode::PerTurn => {
            for t in turns {
                let before = provider.stats();
                input_summaries += store.ingest_turn(t)?.summaries;
                write_lat.push(provider.stats().delta_since(&before).backend_ms());
            }
        }
        Mode::Batched => {
            for chunk in turns.chunks(opts.batch_size.max(1)) {
                let before = provider.stats();
                let r = store.ingest_batch(chunk.to_vec())?;
                input_summaries += r.summaries - r.carried_in.min(r.summaries);
                write_lat.push(provider.stats().delta_since(&before).backend_ms());
            }
        }
    }
    let write = provider.stats().delta_since(&start);
    let before_read = provider.stats();
    let (probe_results, read_lat) = run_probes(&store, probes)?;
    let read = provider.stats().delta_since(&before_read);
    let (node_count, edge_count) = store.read(|g| (g.live_count(), g.edge_count()));
    let probe_recall = if probe_results.is_empty() {
        1.0
    } else {
        probe_results.iter().map(|r| r.recall).sum::<f64>() / probe_results.len() as f64
    };
    let stats = store.stats();
    let report = BenchReport {
        mode,
        seed: opts.seed,
        turns: turns.len(),
        input_summaries,
        write,
        read,
        node_count,
        edge_count,
        dedup_ratio: if input_summaries == 0 { 0.0 } else { node_count as f64 / input_summaries as f64 },
        write_latency_ms: percentiles(&write_lat),
        read_latency_ms: percentiles(&read_lat),
        probes: probes.len(),
        probe_recall,
        probe_results,
        pending: stats.pending,
        dead_letter: stats.dead_letter,
        invariant_violations: store.check(),
    };
    Ok(BenchRun { report, store })
}

/// Reads one JSON value per line; blank lines are skipped and errors carry
/// the 1-based line number.
pub fn read_jsonl<T: DeserializeOwned>(input: impl BufRead) -> Result<Vec<T>, StorageError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| StorageError::Record { line: i + 1, message: e.to_string() })?;
        out.push(v);
    }
    Ok(out)
}

/// [`read_jsonl`] for dialogue turns, validating each one.
pub fn read_turns(input: impl BufRead) -> Result<Vec<DialogueTurn>, StorageError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = |message: String| StorageError::Record { line: i + 1, message };
        let turn: DialogueTurn = serde_json::from_str(&line).map_err(|e| record(e.to_string()))?;
        turn.validate().map_err(|e| record(e.to_string()))?;
        out.push(turn);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(items: &[T], mut out: impl std::io::Write) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn turns_round_trip_through_jsonl() {
        let c = generate(&CorpusConfig { sessions: 2, ..CorpusConfig::default() }, 3, 3);
        let mut buf = Vec::new();
        write_jsonl(&c.turns, &mut buf).unwrap();
        assert_eq!(read_turns(buf.as_slice()).unwrap(), c.turns);
        let mut lines: Vec<String> = String::from_utf8(buf).unwrap().lines().map(String::from).collect();
        lines[2] = lines[2].replace("\"messages\":[", "\"messages\":[1,");
        let err = read_turns(lines.join("\n").as_bytes()).unwrap_err();
        assert!(matches!(err, StorageError::Record { line: 3, .. }), "{err}");
        let empty = r#"{"turn_id":"x","session_id":"s","messages":[]}"#;
        let err = read_turns(format!("\n{empty}").as_bytes()).unwrap_err();
        assert!(matches!(err, StorageError::Record { line: 2, ref message } if message.contains("nonempty")), "{err}");
    }

    #[test]
    fn percentile_ranks() {
        let p = percentiles(&[5.0, 1.0, 3.0, 2.0, 4.0]);
        assert_eq!((p.p50, p.p95), (3.0, 5.0));
        assert_eq!(percentiles(&[]).p50, 0.0);
    }

    #[test]
    fn corpus_shape() {
        let cfg = CorpusConfig::default();
        let c = generate(&cfg, 1, 1);
        assert_eq!(c.turns.len(), 200);
        assert_eq!(c.probes.len(), 40);
        assert_eq!(c.distinct_statements, 200);
        assert_eq!(c.corrections, 27);
        for t in &c.turns {
            t.validate().unwrap();
            let user = &t.messages[0].text;
            let parts = crate::text::sentences(user);
            assert_eq!(parts.len(), 2, "{user}");
            assert_ne!(parts[0], parts[1]);
        }
        assert_eq!(generate(&cfg, 1, 1), c);
        assert_ne!(generate(&cfg, 2, 2).turns, c.turns);
    }

    #[test]
    fn small_replay_is_sane() {
        let cfg = CorpusConfig { sessions: 3, turns_per_session: 6, topics: 4, corrections_per_session: 1, ..CorpusConfig::default() };
        let c = generate(&cfg, 5, 5);
        let opts = BenchOptions { seed: 5, batch_size: 6, ..BenchOptions::default() };
        let a = bench_replay(&c.turns, &c.probes, Mode::PerTurn, &opts).unwrap().report;
        let b = bench_replay(&c.turns, &c.probes, Mode::Batched, &opts).unwrap().report;
        assert!(a.invariant_violations.is_empty() && b.invariant_violations.is_empty());
        assert_eq!(a.node_count, c.distinct_statements - c.corrections);
        assert_eq!(b.node_count, a.node_count);
        assert!(b.write.chat_calls < a.write.chat_calls);
        assert_eq!(a.probe_recall, 1.0, "{:?}", a.probe_results);
        assert_eq!(b.probe_recall, 1.0, "{:?}", b.probe_results);
    }
}
