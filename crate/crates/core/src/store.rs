//! The memory store: one graph, one writer, an optional data directory.
//!
//! Readers share the graph through an `RwLock`. All mutations go through a
//! single writer mutex, and each graph write is logged as one WAL group
//! before the lock is released. A failed log append leaves the store
//! read-only until reopened.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::graph::{GraphConfig, GraphError, MemoryGraph, MutationReport, Threads};
use crate::model::{MemoryNode, NodeId};
use crate::pipeline::{self, BatchReport, DialogueTurn, GraphHandle, Pending, PipelineConfig, PipelineError, StepReport};
use crate::provider::{Provider, ProviderError, ProviderStats};
use crate::reading::agent::{Agent, AgentError, AgentOutcome};
use crate::reading::tools::VlmBackend;
use crate::reading::{self, ReadConfig, ReadError, Retrieval};
use crate::storage::{self, records, StorageError, Wal};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StoreConfig {
    pub graph: GraphConfig,
    pub pipeline: PipelineConfig,
    pub read: ReadConfig,
}

/// Coarse error classes, used for HTTP statuses and exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    NotFound,
    Conflict,
    Provider,
    Internal,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Read(#[from] ReadError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("store is read-only after a log failure: {0}")]
    Poisoned(String),
}

fn graph_class(e: &GraphError) -> ErrorClass {
    match e {
        GraphError::UnknownId(_) => ErrorClass::NotFound,
        GraphError::DuplicateId(_) | GraphError::DuplicateTime(_) => ErrorClass::Conflict,
        GraphError::RootOperation(_) | GraphError::Tombstoned(_) | GraphError::Invalid(_) | GraphError::Index(_) => {
            ErrorClass::Validation
        }
        GraphError::TemporalOrder { .. } | GraphError::Cycle(_) => ErrorClass::Internal,
    }
}

impl StoreError {
    pub fn class(&self) -> ErrorClass {
        match self {
            StoreError::Pipeline(PipelineError::InvalidTurn { .. }) => ErrorClass::Validation,
            StoreError::Pipeline(PipelineError::Provider(_)) => ErrorClass::Provider,
            StoreError::Pipeline(PipelineError::Graph(g)) => graph_class(g),
            StoreError::Pipeline(_) => ErrorClass::Internal,
            StoreError::Read(ReadError::Provider(_)) => ErrorClass::Provider,
            StoreError::Read(ReadError::Graph(g)) => graph_class(g),
            StoreError::Agent(_) | StoreError::Provider(_) => ErrorClass::Provider,
            StoreError::Graph(g) => graph_class(g),
            StoreError::Storage(StorageError::Record { .. }) => ErrorClass::Validation,
            StoreError::Storage(StorageError::Graph(g)) => graph_class(g),
            StoreError::Storage(_) | StoreError::Poisoned(_) => ErrorClass::Internal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreStats {
    pub live_nodes: usize,
    pub tombstones: usize,
    pub edges: usize,
    pub pending: usize,
    pub dead_letter: usize,
    pub wal_lsn: Option<u64>,
    pub provider: ProviderStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RebuildReport {
    pub edges_before: usize,
    pub edges_after: usize,
    /// Edges the transitive reduction removed after the rebuild.
    pub reduced: usize,
}

#[derive(Debug, Default)]
struct Writer {
    wal: Option<Wal>,
    pending: Vec<Pending>,
    dead_letter: Vec<Pending>,
}

pub struct MemoryStore {
    graph: RwLock<MemoryGraph>,
    writer: Mutex<Writer>,
    /// Set when a log append fails.
    poisoned: Mutex<Option<String>>,
    dir: Option<PathBuf>,
    provider: Arc<Provider>,
    vlm: Option<Arc<dyn VlmBackend>>,
    cfg: StoreConfig,
}

/// Graph access that logs every write as one group.
struct Logged<'a> {
    store: &'a MemoryStore,
    wal: &'a mut Option<Wal>,
}

// `write` only runs while the writer mutex is held; the wal lives behind it.
struct LoggedHandle<'a>(Mutex<Logged<'a>>);

impl GraphHandle for LoggedHandle<'_> {
    fn read<R>(&self, f: impl FnOnce(&MemoryGraph) -> R) -> R {
        let store = self.0.lock().expect("handle lock").store;
        f(&store.graph.read().expect("graph lock"))
    }

    fn write<R>(&self, f: impl FnOnce(&mut MemoryGraph) -> R) -> R {
        let mut h = self.0.lock().expect("handle lock");
        let store = h.store;
        let mut g = store.graph.write().expect("graph lock");
        let out = f(&mut g);
        let ops = g.take_journal();
        if let Some(wal) = h.wal.as_mut() {
            if let Err(e) = wal.append(ops) {
                *store.poisoned.lock().expect("poison lock") = Some(e.to_string());
            }
        }
        out
    }
}

impl MemoryStore {
    pub fn in_memory(provider: Arc<Provider>, cfg: StoreConfig) -> Self {
        let graph = MemoryGraph::new(provider.dim(), cfg.graph.clone());
        Self::assemble(graph, None, None, provider, cfg)
    }

    /// Opens or creates the store in `dir`: snapshot plus log replay.
    pub fn open(dir: impl AsRef<Path>, provider: Arc<Provider>, cfg: StoreConfig) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        let loaded = storage::load(&dir, provider.dim(), cfg.graph.clone())?;
        Ok(Self::assemble(loaded.graph, Some(loaded.wal), Some(dir), provider, cfg))
    }

    fn assemble(mut graph: MemoryGraph, wal: Option<Wal>, dir: Option<PathBuf>, provider: Arc<Provider>, cfg: StoreConfig) -> Self {
        graph.set_recording(wal.is_some());
        MemoryStore {
            graph: RwLock::new(graph),
            writer: Mutex::new(Writer { wal, ..Writer::default() }),
            poisoned: Mutex::new(None),
            dir,
            provider,
            vlm: None,
            cfg,
        }
    }

    pub fn with_vlm(mut self, vlm: Arc<dyn VlmBackend>) -> Self {
        self.vlm = Some(vlm);
        self
    }

    pub fn config(&self) -> &StoreConfig {
        &self.cfg
    }

    pub fn provider(&self) -> &Provider {
        &self.provider
    }

    pub fn data_dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    /// Runs `f` with shared access to the graph.
    pub fn read<R>(&self, f: impl FnOnce(&MemoryGraph) -> R) -> R {
        f(&self.graph.read().expect("graph lock"))
    }

    fn check_poison(&self) -> Result<(), StoreError> {
        match self.poisoned.lock().expect("poison lock").clone() {
            Some(e) => Err(StoreError::Poisoned(e)),
            None => Ok(()),
        }
    }

    fn with_writer<R>(&self, f: impl FnOnce(&mut Writer, &LoggedHandle<'_>) -> Result<R, StoreError>) -> Result<R, StoreError> {
        self.check_poison()?;
        let mut w = self.writer.lock().expect("writer lock");
        let mut wal = w.wal.take();
        let out = {
            let handle = LoggedHandle(Mutex::new(Logged { store: self, wal: &mut wal }));
            f(&mut w, &handle)
        };
        w.wal = wal;
        self.check_poison()?;
        out
    }

    /// Writer access for operations that swap the whole graph.
    fn exclusive<R>(&self, f: impl FnOnce(&mut Writer) -> Result<R, StoreError>) -> Result<R, StoreError> {
        self.check_poison()?;
        let mut w = self.writer.lock().expect("writer lock");
        f(&mut w)
    }

    /// Batched write path over `turns` plus anything carried from before.
    pub fn ingest_batch(&self, turns: Vec<DialogueTurn>) -> Result<BatchReport, StoreError> {
        self.with_writer(|w, h| {
            let carried = w.pending.clone();
            let report = pipeline::offline_batch(h, &self.provider, turns, carried, &self.cfg.pipeline)?;
            w.pending = report.carried_out.clone();
            w.dead_letter.extend(report.dead_letter.iter().cloned());
            Ok(report)
        })
    }

    /// Per-turn write path.
    pub fn ingest_turn(&self, turn: &DialogueTurn) -> Result<StepReport, StoreError> {
        self.with_writer(|w, h| {
            let carried = w.pending.clone();
            let report = pipeline::online_step(h, &self.provider, Some(turn), carried, &self.cfg.pipeline)?;
            w.pending = report.carried_out.clone();
            w.dead_letter.extend(report.dead_letter.iter().cloned());
            Ok(report)
        })
    }

    /// Retries carried items without new input.
    pub fn flush(&self) -> Result<BatchReport, StoreError> {
        self.ingest_batch(Vec::new())
    }

    pub fn pending(&self) -> Vec<Pending> {
        self.writer.lock().expect("writer lock").pending.clone()
    }

    pub fn dead_letter(&self) -> Vec<Pending> {
        self.writer.lock().expect("writer lock").dead_letter.clone()
    }

    pub fn retrieve(&self, q: &str, cfg: Option<&ReadConfig>) -> Result<Retrieval, StoreError> {
        Ok(reading::retrieve(&self.graph, &self.provider, q, cfg.unwrap_or(&self.cfg.read))?)
    }

    pub fn agent_query(&self, q: &str, max_iterations: Option<usize>) -> Result<AgentOutcome, StoreError> {
        let mut cfg = self.cfg.read.clone();
        if let Some(m) = max_iterations {
            cfg.max_iterations = m;
        }
        let mut agent = Agent::new(&self.graph, &self.provider, cfg);
        if let Some(v) = &self.vlm {
            agent = agent.with_vlm(v.clone());
        }
        Ok(agent.run(q)?)
    }

    pub fn node(&self, id: &NodeId) -> Option<MemoryNode> {
        self.read(|g| g.node(id).cloned())
    }

    pub fn threads(&self, id: &NodeId) -> Result<Threads, StoreError> {
        Ok(self.read(|g| g.thread_of(id))?)
    }

    pub fn delete(&self, id: &NodeId) -> Result<MutationReport, StoreError> {
        self.with_writer(|_, h| Ok(h.write(|g| g.apply_delete(id))?))
    }

    /// Rebuilds every edge from the live nodes, reduces, and checkpoints.
    pub fn rebuild(&self) -> Result<RebuildReport, StoreError> {
        self.exclusive(|w| {
            let mut g = self.graph.write().expect("graph lock");
            let edges_before = g.edge_count();
            let nodes: Vec<MemoryNode> = g.nodes().filter(|n| !n.is_root()).cloned().collect();
            let mut fresh = MemoryGraph::offline_build(nodes, g.dim(), self.cfg.graph.clone())?;
            let reduced = fresh.reduce_in_place()?;
            self.replace(&mut g, fresh, w)?;
            Ok(RebuildReport { edges_before, edges_after: g.edge_count(), reduced })
        })
    }

    fn replace(&self, slot: &mut MemoryGraph, mut fresh: MemoryGraph, w: &mut Writer) -> Result<(), StoreError> {
        fresh.set_recording(w.wal.is_some());
        fresh.take_journal();
        *slot = fresh;
        if let (Some(dir), Some(wal)) = (&self.dir, w.wal.as_mut()) {
            storage::checkpoint(dir, slot, wal)?;
        }
        Ok(())
    }

    /// Writes a snapshot and empties the log. No-op for in-memory stores.
    pub fn snapshot(&self) -> Result<(), StoreError> {
        self.exclusive(|w| {
            let g = self.graph.read().expect("graph lock");
            if let (Some(dir), Some(wal)) = (&self.dir, w.wal.as_mut()) {
                storage::checkpoint(dir, &g, wal)?;
            }
            Ok(())
        })
    }

    pub fn export_jsonl(&self, out: impl Write) -> Result<usize, StoreError> {
        Ok(self.read(|g| records::export(g, out))?)
    }

    /// Adds the records to the current nodes and rebuilds all edges.
    pub fn import_jsonl(&self, input: impl BufRead) -> Result<usize, StoreError> {
        let nodes = records::parse(input, self.provider.dim())?;
        let count = nodes.len();
        self.exclusive(|w| {
            let mut g = self.graph.write().expect("graph lock");
            let mut all: Vec<MemoryNode> = g.nodes().filter(|n| !n.is_root()).cloned().collect();
            all.extend(nodes);
            let fresh = MemoryGraph::offline_build(all, g.dim(), self.cfg.graph.clone())?;
            self.replace(&mut g, fresh, w)?;
            Ok(count)
        })
    }

    pub fn check(&self) -> Vec<String> {
        self.read(|g| g.check_invariants())
    }

    pub fn stats(&self) -> StoreStats {
        let w = self.writer.lock().expect("writer lock");
        let (live_nodes, tombstones, edges) = self.read(|g| {
            let live = g.live_count();
            (live, g.nodes().filter(|n| n.tombstone).count(), g.edge_count())
        });
        StoreStats {
            live_nodes,
            tombstones,
            edges,
            pending: w.pending.len(),
            dead_letter: w.dead_letter.len(),
            wal_lsn: w.wal.as_ref().map(|l| l.last_lsn()),
            provider: self.provider.stats(),
        }
    }
}
