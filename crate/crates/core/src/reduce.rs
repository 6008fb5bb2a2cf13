//! Transitive reduction of a DAG given as an edge list over `0..n`.
//!
//! Nodes are visited in topological order. For each node the children are
//! scanned in topological order as well; a child already reached from an
//! earlier child is redundant, otherwise its descendants are marked. This is
//! O(V * E) in the worst case, which is fine at desk scale.

use std::collections::VecDeque;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("graph contains a cycle through node {node}")]
pub struct CycleError {
    pub node: usize,
}

/// Kahn's algorithm; ties broken by smallest index for determinism.
pub fn topo_order(n: usize, edges: &[(usize, usize)]) -> Result<Vec<usize>, CycleError> {
    let mut indeg = vec![0usize; n];
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(a, b) in edges {
        out[a].push(b);
        indeg[b] += 1;
    }
    let mut ready: std::collections::BinaryHeap<std::cmp::Reverse<usize>> =
        (0..n).filter(|&v| indeg[v] == 0).map(std::cmp::Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(std::cmp::Reverse(v)) = ready.pop() {
        order.push(v);
        for &w in &out[v] {
            indeg[w] -= 1;
            if indeg[w] == 0 {
                ready.push(std::cmp::Reverse(w));
            }
        }
    }
    if order.len() != n {
        let node = (0..n).find(|&v| indeg[v] > 0).unwrap_or(0);
        return Err(CycleError { node });
    }
    Ok(order)
}

/// Returns the edges of the transitive reduction, sorted and deduplicated.
pub fn transitive_reduction(n: usize, edges: &[(usize, usize)]) -> Result<Vec<(usize, usize)>, CycleError> {
    let order = topo_order(n, edges)?;
    let mut rank = vec![0usize; n];
    for (i, &v) in order.iter().enumerate() {
        rank[v] = i;
    }
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(a, b) in edges {
        children[a].push(b);
    }
    for c in &mut children {
        c.sort_by_key(|&v| rank[v]);
        c.dedup();
    }

    let mut kept = Vec::new();
    let mut mark = vec![usize::MAX; n];
    let mut queue = VecDeque::new();
    for &u in &order {
        for &c in &children[u] {
            if mark[c] == u {
                continue;
            }
            kept.push((u, c));
            mark[c] = u;
            queue.push_back(c);
            while let Some(x) = queue.pop_front() {
                for &y in &children[x] {
                    if mark[y] != u {
                        mark[y] = u;
                        queue.push_back(y);
                    }
                }
            }
        }
    }
    kept.sort_unstable();
    Ok(kept)
}
