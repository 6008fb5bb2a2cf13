mod common;

use std::collections::{BTreeSet, HashMap};

use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use threadmem::exec::Exec;
use threadmem::graph::{GraphConfig, MemoryGraph};
use threadmem::model::{EffectiveTime, MemoryKind, MemoryNode, NodeId};
use threadmem::provider::Provider;
use threadmem::reading::{closure, linearize};
use threadmem::storage::wal::{self, WalEntry, WalGroup};

#[derive(Debug, Clone)]
enum Op {
    Insert { text: u64, wall_step: i64 },
    Update { pick: usize, text: u64 },
    Delete { pick: usize },
    Reinsert { pick: usize },
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        5 => (any::<u64>(), 0i64..3).prop_map(|(text, wall_step)| Op::Insert { text, wall_step }),
        2 => (any::<usize>(), any::<u64>()).prop_map(|(pick, text)| Op::Update { pick, text }),
        2 => any::<usize>().prop_map(|pick| Op::Delete { pick }),
        1 => any::<usize>().prop_map(|pick| Op::Reinsert { pick }),
    ]
}

fn text_for(seed: u64) -> String {
    phrase(&mut ChaCha8Rng::seed_from_u64(seed))
}

/// Runs `ops` against a fresh graph, returning it with every op group it journaled.
fn run_ops(ops: &[Op]) -> (MemoryGraph, Vec<Vec<threadmem::graph::GraphOp>>) {
    let provider = Provider::mock(32, 3);
    let mut g = MemoryGraph::new(32, GraphConfig::default());
    g.set_recording(true);
    let mut live: Vec<NodeId> = Vec::new();
    let mut wall = 0;
    let mut groups = Vec::new();
    for op in ops {
        match op {
            Op::Insert { text, wall_step } => {
                wall += wall_step;
                let t = g.allocate_time(wall);
                let content = text_for(*text);
                let e = provider.embed_one(&content).unwrap();
                let node = MemoryNode::new(NodeId::for_time(t), MemoryKind::Event, content, e, t);
                live.push(node.id.clone());
                g.insert(node).unwrap();
            }
            _ if live.is_empty() => {}
            Op::Update { pick, text } => {
                let id = &live[pick % live.len()];
                let content = text_for(*text);
                let e = provider.embed_one(&content).unwrap();
                g.apply_update(id, content, e).unwrap();
            }
            Op::Delete { pick } => {
                let id = live.swap_remove(pick % live.len());
                g.apply_delete(&id).unwrap();
            }
            Op::Reinsert { pick } => {
                g.reinsert(&live[pick % live.len()]).unwrap();
            }
        }
        groups.push(g.take_journal());
    }
    (g, groups)
}

fn small_dag() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
    (1usize..40, 0.0f64..0.4, any::<u64>()).prop_map(|(n, d, seed)| (n, random_edges(&mut rng(seed), n, d)))
}

fn reach_sets(g: &MemoryGraph, n: usize) -> Vec<BTreeSet<usize>> {
    descendants(n, &edge_pairs(g).into_iter().collect::<Vec<_>>())
}

fn snapshot_of(g: &MemoryGraph) -> (String, BTreeSet<(String, String)>) {
    let nodes: Vec<_> = g.nodes_by_time().collect();
    let edges = g.edges().into_iter().map(|e| (e.parent.as_str().to_owned(), e.child.as_str().to_owned())).collect();
    (serde_json::to_string(&nodes).unwrap(), edges)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn op_sequences_keep_invariants(ops in prop::collection::vec(op(), 1..80)) {
        let (g, _) = run_ops(&ops);
        prop_assert_eq!(g.check_invariants(), Vec::<String>::new());
    }

    #[test]
    fn wal_replay_equals_live(ops in prop::collection::vec(op(), 1..60)) {
        let (live, groups) = run_ops(&ops);
        let mut bytes = Vec::new();
        let mut lsn = 0;
        for ops in groups.into_iter().filter(|g| !g.is_empty()) {
            let entries = ops.into_iter().map(|op| { lsn += 1; WalEntry { lsn, op } }).collect();
            bytes.extend(wal::encode_frame(&WalGroup { entries }));
        }
        let contents = wal::decode(&bytes).unwrap();
        let mut replayed = MemoryGraph::new(32, GraphConfig::default());
        wal::replay(&mut replayed, &contents.groups, 0).unwrap();
        prop_assert_eq!(snapshot_of(&replayed), snapshot_of(&live));
    }

    #[test]
    fn closure_matches_brute_force((n, pairs) in small_dag(), picks in prop::collection::vec(any::<usize>(), 1..4)) {
        let g = dag(n, &pairs);
        let seeds: Vec<usize> = picks.iter().map(|p| p % n).collect();
        let ids: Vec<NodeId> = seeds.iter().map(|i| NodeId::new(format!("n{i}"))).collect();
        let c = closure(&g, &ids, usize::MAX, usize::MAX).unwrap();
        let got: BTreeSet<usize> = c.node_ids.iter().filter_map(index_of).collect();
        prop_assert_eq!(got, brute_ancestors(n, &pairs, &seeds));
        prop_assert!(c.node_ids.contains(&NodeId::root()));
    }

    #[test]
    fn linearize_is_time_sorted_and_respects_edges((n, pairs) in small_dag(), pick in any::<usize>()) {
        let g = dag(n, &pairs);
        let seed = NodeId::new(format!("n{}", pick % n));
        let c = closure(&g, std::slice::from_ref(&seed), usize::MAX, usize::MAX).unwrap();
        let ctx = linearize(&g, &c);
        prop_assert!(ctx.entries.windows(2).all(|w| w[0].effective_time < w[1].effective_time));
        let pos: HashMap<&NodeId, usize> = ctx.entries.iter().enumerate().map(|(i, e)| (&e.node_id, i)).collect();
        for e in g.edges() {
            if let (Some(p), Some(c)) = (pos.get(&e.parent), pos.get(&e.child)) {
                prop_assert!(p < c);
            }
        }
    }

    #[test]
    fn reduction_is_idempotent_and_keeps_reachability((n, pairs) in small_dag()) {
        let g = dag(n, &pairs);
        let once = g.transitive_reduce().unwrap();
        let twice = once.transitive_reduce().unwrap();
        prop_assert_eq!(edge_pairs(&once), edge_pairs(&twice));
        prop_assert_eq!(reach_sets(&once, n), descendants(n, &pairs));
    }

    #[test]
    fn offline_build_equals_sequential_fold(seeds in prop::collection::vec((any::<u64>(), 0i64..5), 1..60), parallel in any::<bool>()) {
        let provider = Provider::mock(32, 3);
        let nodes: Vec<MemoryNode> = seeds
            .iter()
            .enumerate()
            .map(|(i, (s, wall))| {
                let t = EffectiveTime::new(*wall, i as u64 + 1);
                let content = text_for(*s);
                let e = provider.embed_one(&content).unwrap();
                MemoryNode::new(NodeId::for_time(t), MemoryKind::Event, content, e, t)
            })
            .collect();
        let exec = if parallel { Exec::Parallel } else { Exec::Sequential };
        let cfg = GraphConfig { exec, ..GraphConfig::default() };
        let a = MemoryGraph::offline_build(nodes.clone(), 32, cfg.clone()).unwrap();
        let b = MemoryGraph::build_sequential(nodes, 32, cfg).unwrap();
        prop_assert_eq!(a.edges(), b.edges());
        prop_assert!(a.check_invariants().is_empty());
    }
}
