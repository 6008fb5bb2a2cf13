//! Helpers shared by the integration tests: random DAGs and brute-force
//! oracles that know nothing about the engine's internals.

#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use threadmem::graph::{GraphConfig, MemoryGraph};
use threadmem::index::Embedding;
use threadmem::model::{Edge, EffectiveTime, MemoryKind, MemoryNode, NodeId};

pub const DAG_DIM: usize = 4;

pub fn dag_node(i: usize) -> MemoryNode {
    MemoryNode::new(
        NodeId::new(format!("n{i}")),
        MemoryKind::Event,
        format!("node {i}"),
        Embedding::unit_axis(DAG_DIM, i % DAG_DIM),
        EffectiveTime::new(i as i64 + 1, i as u64 + 1),
    )
}

/// Edges `i -> j` (i < j) kept with probability `density`, as index pairs.
pub fn random_edges(rng: &mut ChaCha8Rng, n: usize, density: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for j in 0..n {
        for i in 0..j {
            if rng.random_bool(density) {
                out.push((i, j));
            }
        }
    }
    out
}

pub fn to_edges(pairs: &[(usize, usize)]) -> Vec<Edge> {
    pairs.iter().map(|&(i, j)| Edge { parent: NodeId::new(format!("n{i}")), child: NodeId::new(format!("n{j}")) }).collect()
}

pub fn dag(n: usize, pairs: &[(usize, usize)]) -> MemoryGraph {
    MemoryGraph::from_parts(DAG_DIM, GraphConfig::default(), (0..n).map(dag_node).collect(), &to_edges(pairs))
        .expect("random dag is valid")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `reach[u]` = every node reachable from `u` by a path of length ≥ 1.
pub fn descendants(n: usize, pairs: &[(usize, usize)]) -> Vec<BTreeSet<usize>> {
    let mut children = vec![Vec::new(); n];
    for &(i, j) in pairs {
        children[i].push(j);
    }
    (0..n)
        .map(|s| {
            let mut seen = BTreeSet::new();
            let mut stack = children[s].clone();
            while let Some(x) = stack.pop() {
                if seen.insert(x) {
                    stack.extend(children[x].iter().copied());
                }
            }
            seen
        })
        .collect()
}

/// Brute force: an edge stays iff no other child of its tail reaches its head.
pub fn brute_reduction(n: usize, pairs: &[(usize, usize)]) -> BTreeSet<(usize, usize)> {
    let reach = descendants(n, pairs);
    let mut children: HashMap<usize, Vec<usize>> = HashMap::new();
    for &(i, j) in pairs {
        children.entry(i).or_default().push(j);
    }
    pairs
        .iter()
        .copied()
        .filter(|&(u, v)| !children[&u].iter().any(|&w| w != v && reach[w].contains(&v)))
        .collect()
}

/// Brute force: seeds plus every ancestor of every seed.
pub fn brute_ancestors(n: usize, pairs: &[(usize, usize)], seeds: &[usize]) -> BTreeSet<usize> {
    let mut parents = vec![Vec::new(); n];
    for &(i, j) in pairs {
        parents[j].push(i);
    }
    let mut seen: BTreeSet<usize> = BTreeSet::new();
    let mut stack: Vec<usize> = seeds.to_vec();
    while let Some(x) = stack.pop() {
        if seen.insert(x) {
            stack.extend(parents[x].iter().copied());
        }
    }
    seen
}

pub fn index_of(id: &NodeId) -> Option<usize> {
    id.as_str().strip_prefix('n').and_then(|s| s.parse().ok())
}

pub fn edge_pairs(g: &MemoryGraph) -> BTreeSet<(usize, usize)> {
    g.edges()
        .iter()
        .filter_map(|e| Some((index_of(&e.parent)?, index_of(&e.child)?)))
        .collect()
}

const VOCAB: &[&str] = &[
    "river", "lamp", "violin", "garden", "rocket", "copper", "harbor", "maple", "tiger", "velvet", "orbit", "canyon",
    "pepper", "saddle", "lantern", "meadow", "pixel", "quartz", "ribbon", "summit", "tunnel", "walnut", "yacht",
    "zephyr", "anchor", "bishop", "candle", "dragon", "ember", "falcon", "glacier", "hammer", "island", "jungle",
    "kettle", "lemon", "marble", "nectar", "olive", "parrot",
];

/// A short random phrase over a small shared vocabulary, so texts overlap.
pub fn phrase(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(3..7);
    (0..n).map(|_| VOCAB[rng.random_range(0..VOCAB.len())]).collect::<Vec<_>>().join(" ")
}
