//! Durable persistence: a write-ahead log of mutation groups, full binary
//! snapshots, and portable JSONL records.
//!
//! A data directory holds `snapshot.bin` and `wal.log`. Loading reads the
//! snapshot (if any) and replays log groups newer than it.

pub mod records;
pub mod snapshot;
pub mod wal;

use std::path::{Path, PathBuf};

use crate::graph::{GraphConfig, GraphError, MemoryGraph};

pub use records::{EmbeddingRef, MemoryRecord, RecordKind};
pub use wal::{Wal, WalEntry, WalGroup};

pub const SNAPSHOT_FILE: &str = "snapshot.bin";
pub const WAL_FILE: &str = "wal.log";

#[derive(Debug, thiserror::Error)]
pub enum StorageError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checksum mismatch in {what} at byte {offset}")]
    Checksum { what: String, offset: u64 },
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("replaying lsn {lsn}: {source}")]
    Replay { lsn: u64, source: GraphError },
    #[error("store dimension {found} does not match configured {expected}")]
    Dimension { expected: usize, found: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// A store opened from disk.
#[derive(Debug)]
pub struct Loaded {
    pub graph: MemoryGraph,
    pub wal: Wal,
    pub snapshot_lsn: u64,
    pub replayed_groups: usize,
    pub torn_bytes: u64,
}

pub fn snapshot_path(dir: &Path) -> PathBuf {
    dir.join(SNAPSHOT_FILE)
}

pub fn wal_path(dir: &Path) -> PathBuf {
    dir.join(WAL_FILE)
}

/// Snapshot state plus ordered replay of the log tail. A missing directory
/// or empty store loads as a root-only graph.
pub fn load(dir: &Path, dim: usize, config: GraphConfig) -> Result<Loaded, StorageError> {
    std::fs::create_dir_all(dir)?;
    let snap = snapshot_path(dir);
    let (mut graph, snapshot_lsn) = if snap.exists() {
        let (g, meta) = snapshot::read(&snap, config)?;
        if meta.dim != dim {
            return Err(StorageError::Dimension { expected: dim, found: meta.dim });
        }
        (g, meta.lsn)
    } else {
        (MemoryGraph::new(dim, config), 0)
    };
    let (mut wal, contents) = Wal::open(wal_path(dir))?;
    let replayed_groups = wal::replay(&mut graph, &contents.groups, snapshot_lsn)?;
    wal.advance_to(snapshot_lsn + 1);
    Ok(Loaded { graph, wal, snapshot_lsn, replayed_groups, torn_bytes: contents.torn_bytes })
}

/// Writes a snapshot at the log's current position, then empties the log.
pub fn checkpoint(dir: &Path, graph: &MemoryGraph, wal: &mut Wal) -> Result<snapshot::SnapshotMeta, StorageError> {
    let meta = snapshot::write(&snapshot_path(dir), graph, wal.last_lsn())?;
    wal.truncate()?;
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphOp;
    use crate::index::Embedding;
    use crate::model::{ClipRange, EffectiveTime, MemoryKind, MemoryNode, NodeId, Provenance};
    use crate::reading::{closure, linearize};

    const DIM: usize = 6;

    fn vec_for(i: usize) -> Embedding {
        let mut v = vec![0.05; DIM];
        v[i % DIM] = 1.0;
        v[(i * 7 + 1) % DIM] += 0.5;
        Embedding::normalized(v).unwrap()
    }

    fn node(i: usize) -> MemoryNode {
        let kinds = [MemoryKind::Event, MemoryKind::Profile, MemoryKind::EntityObject, MemoryKind::Event];
        let mut prov = Provenance {
            source_turn_ids: vec![format!("t{i}")],
            roles: vec!["user".into()],
            session_id: format!("s{}", i / 4),
            ..Provenance::default()
        };
        if i % 4 == 3 {
            prov.asset = Some("cam".into());
            prov.clip_refs = vec![ClipRange::new(i as f64, i as f64 + 1.5)];
        }
        let t = EffectiveTime::new(1000 + i as i64 * 10, i as u64 + 1);
        MemoryNode::new(NodeId::for_time(t), kinds[i % 4], format!("fact number {i} about topic {}", i % 3), vec_for(i), t)
            .with_provenance(prov)
            .with_default_attributes()
    }

    /// Live run recording groups into `wal`; returns the graph.
    fn live_run(wal: &mut Wal, n: usize) -> MemoryGraph {
        let mut g = MemoryGraph::new(DIM, GraphConfig::default());
        g.set_recording(true);
        for i in 0..n {
            g.insert(node(i)).unwrap();
            wal.append(g.take_journal()).unwrap();
            if i % 5 == 4 {
                let id = g.nodes_by_time().nth(i - 2).unwrap().id.clone();
                g.apply_update(&id, format!("revised {i}"), vec_for(i + 3)).unwrap();
                wal.append(g.take_journal()).unwrap();
            }
            if i % 7 == 6 {
                let id = g.nodes_by_time().filter(|n| !n.tombstone).nth(2).unwrap().id.clone();
                g.apply_delete(&id).unwrap();
                wal.append(g.take_journal()).unwrap();
            }
        }
        g
    }

    fn same(a: &MemoryGraph, b: &MemoryGraph) {
        assert_eq!(a.edges(), b.edges());
        let na: Vec<_> = a.nodes_by_time().cloned().collect();
        let nb: Vec<_> = b.nodes_by_time().cloned().collect();
        assert_eq!(na, nb);
        let ids = |g: &MemoryGraph| g.index().ids().cloned().collect::<std::collections::BTreeSet<_>>();
        assert_eq!(ids(a), ids(b));
    }

    #[test]
    fn empty_store_loads_root_only() {
        let dir = tempfile::tempdir().unwrap();
        let l = load(dir.path(), DIM, GraphConfig::default()).unwrap();
        assert_eq!(l.graph.nodes().count(), 1);
        assert_eq!(l.graph.edge_count(), 0);
    }

    #[test]
    fn wal_replay_matches_live() {
        let dir = tempfile::tempdir().unwrap();
        let (mut wal, _) = Wal::open(wal_path(dir.path())).unwrap();
        let live = live_run(&mut wal, 30);
        drop(wal);
        let l = load(dir.path(), DIM, GraphConfig::default()).unwrap();
        same(&live, &l.graph);
        assert!(l.graph.check_invariants().is_empty());
    }

    #[test]
    fn snapshot_plus_tail() {
        let dir = tempfile::tempdir().unwrap();
        let (mut wal, _) = Wal::open(wal_path(dir.path())).unwrap();
        let mut live = live_run(&mut wal, 20);
        checkpoint(dir.path(), &live, &mut wal).unwrap();
        live.set_recording(true);
        for i in 20..26 {
            live.insert(node(i)).unwrap();
            wal.append(live.take_journal()).unwrap();
        }
        let id = live.nodes_by_time().nth(21).unwrap().id.clone();
        live.apply_delete(&id).unwrap();
        wal.append(live.take_journal()).unwrap();
        let lsn = wal.last_lsn();
        drop(wal);
        let l = load(dir.path(), DIM, GraphConfig::default()).unwrap();
        same(&live, &l.graph);
        assert_eq!(l.replayed_groups, 7);
        assert_eq!(l.wal.last_lsn(), lsn);
    }

    #[test]
    fn snapshot_bytes_stable() {
        let dir = tempfile::tempdir().unwrap();
        let (mut wal, _) = Wal::open(wal_path(dir.path())).unwrap();
        let live = live_run(&mut wal, 15);
        let a = snapshot::encode(&live, 9);
        let (back, meta) = snapshot::decode(&a, GraphConfig::default()).unwrap();
        assert_eq!(meta.lsn, 9);
        same(&live, &back);
        assert_eq!(snapshot::encode(&back, 9), a);
    }

    #[test]
    fn torn_tail_discarded_and_crc_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = wal_path(dir.path());
        let (mut wal, _) = Wal::open(&path).unwrap();
        let live = live_run(&mut wal, 8);
        drop(wal);
        let full = std::fs::read(&path).unwrap();
        // half of an extra delete group
        let mut g2 = live.clone();
        g2.set_recording(true);
        let id = g2.nodes_by_time().nth(3).unwrap().id.clone();
        g2.apply_delete(&id).unwrap();
        let group = WalGroup {
            entries: g2.take_journal().into_iter().enumerate().map(|(i, op)| WalEntry { lsn: 10_000 + i as u64, op }).collect(),
        };
        let frame = wal::encode_frame(&group);
        let mut torn = full.clone();
        torn.extend_from_slice(&frame[..frame.len() / 2]);
        std::fs::write(&path, &torn).unwrap();
        let l = load(dir.path(), DIM, GraphConfig::default()).unwrap();
        assert_eq!(l.torn_bytes as usize, frame.len() / 2);
        same(&live, &l.graph);
        drop(l);
        assert_eq!(std::fs::read(&path).unwrap(), full, "torn tail truncated on open");

        let mut bad = full.clone();
        let last = bad.len() - 3;
        bad[last] ^= 0x55;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load(dir.path(), DIM, GraphConfig::default()), Err(StorageError::Checksum { .. })));
    }

    #[test]
    fn snapshot_checksum_refused() {
        let dir = tempfile::tempdir().unwrap();
        let (mut wal, _) = Wal::open(wal_path(dir.path())).unwrap();
        let live = live_run(&mut wal, 10);
        checkpoint(dir.path(), &live, &mut wal).unwrap();
        let p = snapshot_path(dir.path());
        let mut bytes = std::fs::read(&p).unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 1;
        std::fs::write(&p, bytes).unwrap();
        let err = load(dir.path(), DIM, GraphConfig::default()).unwrap_err();
        assert!(err.to_string().contains("EDGE"), "{err}");
    }

    #[test]
    fn wal_entry_json_shape() {
        let e = WalEntry { lsn: 3, op: GraphOp::Tombstone { id: NodeId::new("x") } };
        let s = serde_json::to_string(&e).unwrap();
        assert_eq!(s, r#"{"lsn":3,"op":"tombstone","payload":{"id":"x"}}"#);
        assert_eq!(serde_json::from_str::<WalEntry>(&s).unwrap(), e);
    }

    #[test]
    fn jsonl_export_import_export_stable() {
        let dir = tempfile::tempdir().unwrap();
        let (mut wal, _) = Wal::open(wal_path(dir.path())).unwrap();
        let live = live_run(&mut wal, 24);
        let first = records::export_string(&live);
        let back = records::import(first.as_bytes(), DIM, GraphConfig::default()).unwrap();
        assert_eq!(records::export_string(&back), first);
        assert!(back.check_invariants().is_empty());
        let rebuilt = MemoryGraph::offline_build(live.nodes().filter(|n| !n.is_root()).cloned().collect(), DIM, GraphConfig::default()).unwrap();
        assert_eq!(back.edges(), rebuilt.edges());
    }

    #[test]
    fn linear_context_round_trips_through_records() {
        let dir = tempfile::tempdir().unwrap();
        let (mut wal, _) = Wal::open(wal_path(dir.path())).unwrap();
        let live = live_run(&mut wal, 18);
        let seed = live.nodes_by_time().filter(|n| !n.tombstone).last().unwrap().id.clone();
        let c = closure(&live, &[seed], usize::MAX, usize::MAX).unwrap();
        let before = linearize(&live, &c);
        let lines: Vec<String> = c
            .node_ids
            .iter()
            .filter_map(|id| live.node(id))
            .filter(|n| !n.is_root())
            .map(|n| serde_json::to_string(&MemoryRecord::from_node(n)).unwrap())
            .collect();
        let back = records::parse(lines.join("\n").as_bytes(), DIM).unwrap();
        let edges: Vec<_> = live.edges().into_iter().filter(|e| c.contains(&e.parent) && c.contains(&e.child)).collect();
        let sub = MemoryGraph::from_parts(DIM, GraphConfig::default(), back, &edges).unwrap();
        assert_eq!(linearize(&sub, &c), before);
    }

    #[test]
    fn record_errors_carry_line_numbers() {
        let g = {
            let mut g = MemoryGraph::new(DIM, GraphConfig::default());
            for i in 0..3 {
                g.insert(node(i)).unwrap();
            }
            g
        };
        let text = records::export_string(&g);
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines.insert(1, "{not json".into());
        let err = records::parse(lines.join("\n").as_bytes(), DIM).unwrap_err();
        assert!(matches!(err, StorageError::Record { line: 2, .. }), "{err}");

        let mut rec: MemoryRecord = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
        assert_eq!(rec.kind, RecordKind::Profile);
        rec.attributes.clear();
        let line = serde_json::to_string(&rec).unwrap();
        let err = records::parse(format!("\n\n{line}").as_bytes(), DIM).unwrap_err();
        assert!(matches!(err, StorageError::Record { line: 3, ref message } if message.contains("subject")), "{err}");

        let mut rec: MemoryRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        rec.kind = RecordKind::VideoEvent;
        assert!(rec.check_kind().unwrap_err().contains("asset"));
        rec.kind = RecordKind::Object;
        assert!(rec.check_kind().unwrap_err().contains("identity"));
        rec.kind = RecordKind::Event;
        rec.provenance.roles.clear();
        assert!(rec.check_kind().is_err());
    }
}
