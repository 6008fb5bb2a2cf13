use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use threadmem::exec::Exec;
use threadmem::graph::{GraphConfig, MemoryGraph};
use threadmem::harness::{self, BenchOptions, CorpusConfig, Mode};
use threadmem::index::{Embedding, VectorIndex};
use threadmem::model::{EffectiveTime, MemoryKind, MemoryNode, NodeId};
use threadmem::provider::Provider;

const DIM: usize = 128;

fn nodes(n: usize) -> Vec<MemoryNode> {
    let provider = Provider::mock(DIM, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    (0..n)
        .map(|i| {
            let text: String = (0..6).map(|_| format!("w{} ", rng.random_range(0..300))).collect();
            let t = EffectiveTime::new(i as i64, i as u64 + 1);
            MemoryNode::new(NodeId::for_time(t), MemoryKind::Event, text.clone(), provider.embed_one(&text).unwrap(), t)
        })
        .collect()
}

fn offline_build(c: &mut Criterion) {
    let mut group = c.benchmark_group("offline_build");
    group.sample_size(10);
    for n in [500, 2000] {
        let input = nodes(n);
        for exec in [Exec::Sequential, Exec::Parallel] {
            let cfg = GraphConfig { exec, ..GraphConfig::default() };
            group.bench_with_input(BenchmarkId::new(format!("{exec:?}"), n), &input, |b, input| {
                b.iter_batched(|| input.clone(), |ns| MemoryGraph::offline_build(ns, DIM, cfg.clone()).unwrap(), BatchSize::LargeInput)
            });
        }
    }
    group.finish();
}

fn top_k(c: &mut Criterion) {
    let mut group = c.benchmark_group("top_k");
    let g = MemoryGraph::offline_build(nodes(20_000), DIM, GraphConfig::default()).unwrap();
    let query: Embedding = g.nodes().nth(17).unwrap().embedding.clone();
    for exec in [Exec::Sequential, Exec::Parallel] {
        let mut idx: VectorIndex = g.index().clone();
        idx.set_exec(exec);
        group.bench_function(format!("{exec:?}"), |b| b.iter(|| idx.top_k(&query, 10, |_| true).unwrap()));
    }
    group.finish();
}

fn batch_pipeline(c: &mut Criterion) {
    let mut group = c.benchmark_group("batch_pipeline");
    group.sample_size(10);
    let corpus = harness::generate(&CorpusConfig::default(), 7, 7);
    for exec in [Exec::Sequential, Exec::Parallel] {
        let mut opts = BenchOptions::default();
        opts.store.pipeline.exec = exec;
        opts.store.graph.exec = exec;
        group.bench_function(format!("{exec:?}"), |b| {
            b.iter(|| harness::bench_replay(&corpus.turns, &corpus.probes, Mode::Batched, &opts).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, offline_build, top_k, batch_pipeline);
criterion_main!(benches);
