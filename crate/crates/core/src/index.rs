//! Exact cosine similarity search over node embeddings.
//!
//! The index is a flat scan: every query scores every live entry, so results
//! are exactly what a brute-force pass would return. Storage sits behind an
//! `Arc`, which makes [`VectorIndex::snapshot`] an O(1) frozen view; a write
//! against a shared index copies the data first.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::exec::Exec;
use crate::model::{EffectiveTime, MemoryKind, NodeId};

/// Allowed deviation of an embedding's L2 norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-6;

const SCAN_CHUNK: usize = 2048;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum IndexError {
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedding is not unit norm (|v| = {norm})")]
    NotUnit { norm: f64 },
    #[error("the root node is never indexed")]
    RootNotIndexable,
    #[error("k must be at least 1")]
    ZeroK,
}

/// Dense embedding vector. Cheap to clone.
#[derive(Clone, PartialEq)]
pub struct Embedding(Arc<[f64]>);

impl Embedding {
    pub fn from_vec(values: Vec<f64>) -> Self {
        Embedding(values.into())
    }

    /// Scales `values` to unit length; `None` for a zero or non-finite vector.
    pub fn normalized(mut values: Vec<f64>) -> Option<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return None;
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Some(Embedding::from_vec(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Embedding::from_vec(vec![0.0; dim])
    }

    /// Standard basis vector `e_axis`.
    pub fn unit_axis(dim: usize, axis: usize) -> Self {
        let mut v = vec![0.0; dim];
        v[axis] = 1.0;
        Embedding::from_vec(v)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= NORM_TOLERANCE
    }
}

impl std::fmt::Debug for Embedding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Embedding(dim={})", self.0.len())
    }
}

impl Serialize for Embedding {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.0.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Embedding {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Vec::<f64>::deserialize(d).map(Embedding::from_vec)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `dot(a, b) / (|a| |b|)`; zero when either vector is zero.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64, IndexError> {
    if a.dim() != b.dim() {
        return Err(IndexError::DimensionMismatch { expected: a.dim(), got: b.dim() });
    }
    let denom = a.norm() * b.norm();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(dot(a.values(), b.values()) / denom)
}

/// Metadata the query filter can see.
#[derive(Debug, Clone, PartialEq)]
pub struct EntryMeta {
    pub id: NodeId,
    pub effective_time: EffectiveTime,
    pub kind: MemoryKind,
    pub has_clips: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredId {
    pub id: NodeId,
    pub score: f64,
    pub effective_time: EffectiveTime,
}

/// Result order: score desc, effective time desc, id asc.
pub fn rank_order(a: &ScoredId, b: &ScoredId) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| b.effective_time.cmp(&a.effective_time))
        .then_with(|| a.id.cmp(&b.id))
}

#[derive(Debug, Clone)]
struct IndexData {
    dim: usize,
    metas: Vec<EntryMeta>,
    vectors: Vec<f64>,
    slots: HashMap<NodeId, usize>,
}

#[derive(Debug, Clone)]
pub struct VectorIndex {
    data: Arc<IndexData>,
    exec: Exec,
}

impl VectorIndex {
    pub fn new(dim: usize) -> Self {
        VectorIndex::with_exec(dim, Exec::default())
    }

    pub fn with_exec(dim: usize, exec: Exec) -> Self {
        VectorIndex {
            data: Arc::new(IndexData { dim, metas: Vec::new(), vectors: Vec::new(), slots: HashMap::new() }),
            exec,
        }
    }

    pub fn dim(&self) -> usize {
        self.data.dim
    }

    pub fn len(&self) -> usize {
        self.data.metas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.metas.is_empty()
    }

    pub fn contains(&self, id: &NodeId) -> bool {
        self.data.slots.contains_key(id)
    }

    pub fn set_exec(&mut self, exec: Exec) {
        self.exec = exec;
    }

    /// Frozen read-only view; later writes to `self` do not affect it.
    pub fn snapshot(&self) -> VectorIndex {
        self.clone()
    }

    /// Checks that `vec` could be stored in this index.
    pub fn check(&self, vec: &Embedding) -> Result<(), IndexError> {
        if vec.dim() != self.data.dim {
            return Err(IndexError::DimensionMismatch { expected: self.data.dim, got: vec.dim() });
        }
        if !vec.is_unit() {
            return Err(IndexError::NotUnit { norm: vec.norm() });
        }
        Ok(())
    }

    /// Inserts or replaces the vector stored for `meta.id`.
    pub fn upsert(&mut self, meta: EntryMeta, vec: &Embedding) -> Result<(), IndexError> {
        if meta.kind == MemoryKind::Root {
            return Err(IndexError::RootNotIndexable);
        }
        self.check(vec)?;
        let data = Arc::make_mut(&mut self.data);
        let dim = data.dim;
        match data.slots.get(&meta.id) {
            Some(&slot) => {
                data.vectors[slot * dim..(slot + 1) * dim].copy_from_slice(vec.values());
                data.metas[slot] = meta;
            }
            None => {
                data.slots.insert(meta.id.clone(), data.metas.len());
                data.metas.push(meta);
                data.vectors.extend_from_slice(vec.values());
            }
        }
        Ok(())
    }

    /// Drops `id`; unknown ids are a no-op. Returns whether anything was removed.
    pub fn remove(&mut self, id: &NodeId) -> bool {
        if !self.data.slots.contains_key(id) {
            return false;
        }
        let data = Arc::make_mut(&mut self.data);
        let dim = data.dim;
        let slot = data.slots.remove(id).expect("checked above");
        let last = data.metas.len() - 1;
        if slot != last {
            data.metas.swap(slot, last);
            let (head, tail) = data.vectors.split_at_mut(last * dim);
            head[slot * dim..(slot + 1) * dim].copy_from_slice(&tail[..dim]);
            data.slots.insert(data.metas[slot].id.clone(), slot);
        }
        data.metas.pop();
        data.vectors.truncate(last * dim);
        true
    }

    pub fn get(&self, id: &NodeId) -> Option<(&EntryMeta, &[f64])> {
        let slot = *self.data.slots.get(id)?;
        let dim = self.data.dim;
        Some((&self.data.metas[slot], &self.data.vectors[slot * dim..(slot + 1) * dim]))
    }

    pub fn ids(&self) -> impl Iterator<Item = &NodeId> {
        self.data.metas.iter().map(|m| &m.id)
    }

    /// The `k` best-scoring entries accepted by `filter`, ranked by
    /// [`rank_order`]. Returns fewer than `k` when fewer entries pass.
    pub fn top_k<F>(&self, query: &Embedding, k: usize, filter: F) -> Result<Vec<ScoredId>, IndexError>
    where
        F: Fn(&EntryMeta) -> bool + Sync + Send,
    {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        let data = &*self.data;
        if query.dim() != data.dim {
            return Err(IndexError::DimensionMismatch { expected: data.dim, got: query.dim() });
        }
        let dim = data.dim;
        let q = query.values();
        // rank slots first; ids are only cloned for the survivors
        let order = |a: &(usize, f64), b: &(usize, f64)| {
            let (ma, mb) = (&data.metas[a.0], &data.metas[b.0]);
            b.1.total_cmp(&a.1)
                .then_with(|| mb.effective_time.cmp(&ma.effective_time))
                .then_with(|| ma.id.cmp(&mb.id))
        };
        let partials = self.exec.map_chunks(&data.metas, SCAN_CHUNK, |offset, metas| {
            let mut local: Vec<(usize, f64)> = metas
                .iter()
                .enumerate()
                .filter(|(_, m)| filter(m))
                .map(|(i, _)| {
                    let slot = offset + i;
                    (slot, dot(q, &data.vectors[slot * dim..(slot + 1) * dim]))
                })
                .collect();
            truncate_by(&mut local, k, order);
            local
        });
        let mut merged: Vec<(usize, f64)> = partials.into_iter().flatten().collect();
        truncate_by(&mut merged, k, order);
        Ok(merged
            .into_iter()
            .map(|(slot, score)| {
                let m = &data.metas[slot];
                ScoredId { id: m.id.clone(), score, effective_time: m.effective_time }
            })
            .collect())
    }
}

fn truncate_by<T>(items: &mut Vec<T>, k: usize, order: impl Fn(&T, &T) -> Ordering) {
    if items.len() > k {
        items.select_nth_unstable_by(k - 1, &order);
        items.truncate(k);
    }
    items.sort_by(&order);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn meta(id: &str, t: i64) -> EntryMeta {
        EntryMeta {
            id: NodeId::new(id),
            effective_time: EffectiveTime::new(t, t as u64),
            kind: MemoryKind::Event,
            has_clips: false,
        }
    }

    fn unit(v: &[f64]) -> Embedding {
        Embedding::normalized(v.to_vec()).unwrap()
    }

    /// Exhaustive scan oracle: score everything, sort everything.
    fn brute(entries: &[(EntryMeta, Embedding)], q: &Embedding, k: usize, f: impl Fn(&EntryMeta) -> bool) -> Vec<ScoredId> {
        let mut all: Vec<ScoredId> = entries
            .iter()
            .filter(|(m, _)| f(m))
            .map(|(m, e)| ScoredId {
                id: m.id.clone(),
                score: cosine(q, e).unwrap(),
                effective_time: m.effective_time,
            })
            .collect();
        all.sort_by(rank_order);
        all.truncate(k);
        all
    }

    #[test]
    fn cosine_examples() {
        let x = unit(&[0.3, -0.2, 0.9]);
        assert!((cosine(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&Embedding::unit_axis(3, 0), &Embedding::unit_axis(3, 1)).unwrap(), 0.0);
        let a = Embedding::from_vec(vec![0.6, 0.8]);
        let b = Embedding::from_vec(vec![0.8, 0.6]);
        assert!((cosine(&a, &b).unwrap() - 0.96).abs() < 1e-12);
        assert!(matches!(
            cosine(&a, &Embedding::zeros(3)),
            Err(IndexError::DimensionMismatch { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn upsert_replace_remove() {
        let mut idx = VectorIndex::new(2);
        let v = unit(&[1.0, 0.0]);
        let w = unit(&[0.0, 1.0]);
        idx.upsert(meta("a", 1), &v).unwrap();
        assert_eq!(idx.top_k(&v, 1, |_| true).unwrap()[0].id, NodeId::new("a"));

        idx.upsert(meta("b", 2), &v).unwrap();
        idx.upsert(meta("a", 1), &w).unwrap();
        let hits = idx.top_k(&w, 1, |_| true).unwrap();
        assert_eq!(hits[0].id, NodeId::new("a"));
        assert!((hits[0].score - 1.0).abs() < 1e-12);

        assert!(idx.remove(&NodeId::new("a")));
        assert!(!idx.remove(&NodeId::new("zzz")));
        let hits = idx.top_k(&w, 5, |_| true).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].id, NodeId::new("b"));

        idx.upsert(meta("a", 1), &w).unwrap();
        assert_eq!(idx.top_k(&w, 1, |_| true).unwrap()[0].id, NodeId::new("a"));
    }

    #[test]
    fn rejects_bad_vectors() {
        let mut idx = VectorIndex::new(2);
        assert!(matches!(idx.upsert(meta("a", 1), &Embedding::from_vec(vec![1.0, 1.0])), Err(IndexError::NotUnit { .. })));
        assert!(matches!(
            idx.upsert(meta("a", 1), &unit(&[1.0, 0.0, 0.0])),
            Err(IndexError::DimensionMismatch { .. })
        ));
        let mut root = meta("r", 0);
        root.kind = MemoryKind::Root;
        assert_eq!(idx.upsert(root, &unit(&[1.0, 0.0])), Err(IndexError::RootNotIndexable));
        assert_eq!(idx.top_k(&unit(&[1.0, 0.0]), 0, |_| true), Err(IndexError::ZeroK));
    }

    #[test]
    fn empty_index_returns_nothing() {
        let idx = VectorIndex::new(3);
        assert!(idx.top_k(&unit(&[1.0, 2.0, 3.0]), 4, |_| true).unwrap().is_empty());
    }

    #[test]
    fn temporal_filter_and_ties() {
        let mut idx = VectorIndex::new(2);
        let entries = vec![
            (meta("a", 1), unit(&[1.0, 0.1])),
            (meta("b", 2), unit(&[1.0, 0.5])),
            (meta("c", 3), unit(&[1.0, 0.0])),
        ];
        for (m, e) in &entries {
            idx.upsert(m.clone(), e).unwrap();
        }
        let q = unit(&[1.0, 0.0]);
        let cutoff = EffectiveTime::new(3, 3);
        let got = idx.top_k(&q, 3, |m| m.effective_time < cutoff).unwrap();
        let want = brute(&entries, &q, 3, |m| m.effective_time < cutoff);
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            assert_eq!(g.id, w.id);
            assert!((g.score - w.score).abs() < 1e-12);
        }
        let ids: Vec<_> = got.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);

        let all = idx.top_k(&q, 100, |_| true).unwrap();
        assert_eq!(all.len(), 3);

        let mut tie = VectorIndex::new(2);
        tie.upsert(meta("early", 1), &q).unwrap();
        tie.upsert(meta("late", 9), &q).unwrap();
        let got = tie.top_k(&q, 2, |_| true).unwrap();
        assert_eq!(got[0].id, NodeId::new("late"));
    }

    #[test]
    fn snapshot_is_frozen() {
        let mut idx = VectorIndex::new(2);
        idx.upsert(meta("a", 1), &unit(&[1.0, 0.0])).unwrap();
        let snap = idx.snapshot();
        idx.upsert(meta("b", 2), &unit(&[1.0, 0.0])).unwrap();
        idx.remove(&NodeId::new("a"));
        assert_eq!(snap.len(), 1);
        assert!(snap.contains(&NodeId::new("a")));
        assert_eq!(idx.len(), 1);
    }

    #[test]
    fn matches_exhaustive_scan_at_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dim = 16;
        let mut idx = VectorIndex::new(dim);
        let mut entries = Vec::new();
        for i in 0..5000 {
            let v = unit(&(0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
            let m = meta(&format!("n{i}"), rng.random_range(0..1000));
            idx.upsert(m.clone(), &v).unwrap();
            entries.push((m, v));
        }
        for _ in 0..20 {
            let q = unit(&(0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
            let cutoff = EffectiveTime::new(rng.random_range(0..1000), 0);
            let k = rng.random_range(1..50);
            let f = |m: &EntryMeta| m.effective_time < cutoff;
            let expected = brute(&entries, &q, k, f);
            for exec in [Exec::Sequential, Exec::Parallel] {
                idx.set_exec(exec);
                let got = idx.top_k(&q, k, f).unwrap();
                let got_ids: Vec<_> = got.iter().map(|s| &s.id).collect();
                let exp_ids: Vec<_> = expected.iter().map(|s| &s.id).collect();
                assert_eq!(got_ids, exp_ids);
            }
        }
    }
}
