//! Command-line front end. Every command prints JSON on stdout.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use threadmem::harness::{self, BenchOptions, CorpusConfig, Mode, Probe};
use threadmem::provider::ProviderError;
use threadmem::storage::StorageError;
use threadmem::store::{ErrorClass, MemoryStore, StoreError};

use crate::api::{self, AppState};
use crate::config::ServiceConfig;

pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_PROVIDER: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "threadmem", version, about = "Threaded DAG memory store: service, ingest, query and replay bench")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// TOML config file.
    #[arg(long, global = true, env = "THREADMEM_CONFIG")]
    pub config: Option<PathBuf>,
    /// Overrides the `data_dir` config key.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    /// Sets any config key, e.g. `--set store.graph.candidate_k=12`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Runs the HTTP service.
    Serve {
        #[arg(long)]
        listen: Option<String>,
    },
    /// Ingests a dialogue-turn JSONL file.
    Ingest {
        path: PathBuf,
        #[arg(long, conflicts_with = "per_turn")]
        batch: bool,
        #[arg(long)]
        per_turn: bool,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Retrieves the context for a query, or runs the agent with `--agent`.
    Query {
        text: String,
        #[arg(long)]
        agent: bool,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        max_iterations: Option<usize>,
        /// Print the linearized context as text instead of JSON.
        #[arg(long, conflicts_with = "agent")]
        render: bool,
    },
    /// Rebuilds every edge from the live nodes and checkpoints.
    Rebuild,
    /// Writes all records as JSONL.
    Export { path: PathBuf },
    /// Merges records from a JSONL file and rebuilds edges.
    Import { path: PathBuf },
    /// Runs the invariant suite.
    Check,
    Stats,
    /// Replays a corpus per turn and in batches and reports provider usage.
    Bench {
        /// A turn JSONL file, or `synthetic` for the generated corpus.
        corpus: String,
        #[arg(long, value_delimiter = ',', default_value = "per_turn,batched")]
        modes: Vec<Mode>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Probe JSONL; defaults to `<corpus stem>.probes.jsonl` beside the corpus.
        #[arg(long)]
        probes: Option<PathBuf>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Writes the synthetic corpus and its probe sidecar.
    GenCorpus {
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

/// A user-facing input problem; exits with [`EXIT_VALIDATION`].
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(e: impl std::fmt::Display) -> anyhow::Error {
    Invalid(e.to_string()).into()
}

/// Maps an error chain to a process exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<Invalid>() || cause.is::<clap::Error>() {
            return EXIT_VALIDATION;
        }
        if let Some(e) = cause.downcast_ref::<StoreError>() {
            return match e.class() {
                ErrorClass::Validation | ErrorClass::NotFound | ErrorClass::Conflict => EXIT_VALIDATION,
                ErrorClass::Provider => EXIT_PROVIDER,
                ErrorClass::Internal => EXIT_INTERNAL,
            };
        }
        if let Some(StorageError::Record { .. }) = cause.downcast_ref::<StorageError>() {
            return EXIT_VALIDATION;
        }
        if cause.is::<ProviderError>() {
            return EXIT_PROVIDER;
        }
    }
    EXIT_INTERNAL
}

pub fn run(cli: Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    let mut cfg = ServiceConfig::load(cli.global.config.as_deref(), |k| std::env::var(k).ok(), &cli.global.sets).map_err(invalid)?;
    if let Some(d) = cli.global.data_dir {
        cfg.data_dir = d;
    }
    match cli.command {
        Command::Serve { listen } => serve(cfg, listen),
        Command::Ingest { path, batch: _, per_turn, batch_size } => {
            let turns = read_turns(&path)?;
            let store = open(&cfg)?;
            let size = batch_size.unwrap_or(cfg.batch_size).max(1);
            let mut summaries = 0;
            if per_turn {
                for t in &turns {
                    summaries += store.ingest_turn(t)?.summaries;
                }
            } else {
                for chunk in turns.chunks(size) {
                    summaries += store.ingest_batch(chunk.to_vec())?.summaries;
                }
            }
            let stats = store.stats();
            emit(out, &json!({ "turns": turns.len(), "mode": if per_turn { "per_turn" } else { "batched" }, "summaries": summaries, "stats": stats }))
        }
        Command::Query { text, agent, k, depth, max_iterations, render } => {
            let store = open(&cfg)?;
            if agent {
                return emit(out, &store.agent_query(&text, max_iterations)?);
            }
            let mut read = cfg.store.read.clone();
            read.seed_k = k.unwrap_or(read.seed_k).max(1);
            read.max_depth = depth.unwrap_or(read.max_depth);
            let r = store.retrieve(&text, Some(&read))?;
            if render {
                writeln!(out, "{}", r.context.render())?;
                return Ok(());
            }
            emit(out, &r)
        }
        Command::Rebuild => emit(out, &open(&cfg)?.rebuild()?),
        Command::Export { path } => {
            let store = open(&cfg)?;
            let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            let mut w = BufWriter::new(file);
            let n = store.export_jsonl(&mut w)?;
            w.flush()?;
            emit(out, &json!({ "records": n, "path": path }))
        }
        Command::Import { path } => {
            let store = open(&cfg)?;
            let n = store.import_jsonl(BufReader::new(open_input(&path)?))?;
            emit(out, &json!({ "records": n, "stats": store.stats() }))
        }
        Command::Check => {
            let v = open(&cfg)?.check();
            emit(out, &json!({ "violations": v }))?;
            if v.is_empty() {
                Ok(())
            } else {
                anyhow::bail!("{} invariant violations", v.len())
            }
        }
        Command::Stats => emit(out, &open(&cfg)?.stats()),
        Command::Bench { corpus, modes, seed, probes, batch_size } => {
            bench(&cfg, &corpus, &modes, seed, probes.as_deref(), batch_size, out)
        }
        Command::GenCorpus { out: path, seed } => {
            let c = harness::generate(&CorpusConfig { dim: cfg.provider.dim, ..CorpusConfig::default() }, seed, cfg.provider.seed);
            let probes_path = sidecar(&path);
            harness::write_jsonl(&c.turns, BufWriter::new(File::create(&path)?))?;
            harness::write_jsonl(&c.probes, BufWriter::new(File::create(&probes_path)?))?;
            emit(out, &json!({ "turns": c.turns.len(), "probes": c.probes.len(), "corpus": path, "probe_file": probes_path }))
        }
    }
}

fn emit(out: &mut dyn Write, v: &impl serde::Serialize) -> anyhow::Result<()> {
    serde_json::to_writer_pretty(&mut *out, v)?;
    writeln!(out)?;
    Ok(())
}

fn open(cfg: &ServiceConfig) -> anyhow::Result<MemoryStore> {
    let provider = cfg.provider()?;
    MemoryStore::open(&cfg.data_dir, provider, cfg.store.clone()).with_context(|| format!("opening store at {}", cfg.data_dir.display()))
}

fn open_input(path: &Path) -> anyhow::Result<File> {
    File::open(path).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn read_turns(path: &Path) -> anyhow::Result<Vec<threadmem::pipeline::DialogueTurn>> {
    harness::read_turns(BufReader::new(open_input(path)?)).with_context(|| format!("reading {}", path.display()))
}

/// `dir/name.jsonl` -> `dir/name.probes.jsonl`.
pub fn sidecar(corpus: &Path) -> PathBuf {
    let stem = corpus.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    corpus.with_file_name(format!("{stem}.probes.jsonl"))
}

fn bench(
    cfg: &ServiceConfig,
    corpus: &str,
    modes: &[Mode],
    seed: u64,
    probes: Option<&Path>,
    batch_size: Option<usize>,
    out: &mut dyn Write,
) -> anyhow::Result<()> {
    let (turns, probes): (_, Vec<Probe>) = if corpus == "synthetic" {
        let c = harness::generate(&CorpusConfig { dim: cfg.provider.dim, ..CorpusConfig::default() }, seed, cfg.provider.seed);
        (c.turns, c.probes)
    } else {
        let path = Path::new(corpus);
        let turns = read_turns(path)?;
        let probe_path = probes.map(Path::to_path_buf).unwrap_or_else(|| sidecar(path));
        let probes = if probe_path.exists() || probes.is_some() {
            harness::read_jsonl(BufReader::new(open_input(&probe_path)?)).with_context(|| format!("reading {}", probe_path.display()))?
        } else {
            Vec::new()
        };
        (turns, probes)
    };
    let opts = BenchOptions {
        seed,
        dim: cfg.provider.dim,
        batch_size: batch_size.unwrap_or(cfg.batch_size).max(1),
        store: cfg.store.clone(),
    };
    let mut runs = Vec::new();
    for &mode in modes {
        // a fresh provider per mode so counters start at zero
        let provider: Arc<_> = cfg.provider()?;
        let start = Instant::now();
        let run = harness::bench_with(&turns, &probes, mode, &opts, provider)?;
        let wall_clock_ms = start.elapsed().as_secs_f64() * 1000.0;
        runs.push(json!({ "report": run.report, "wall_clock_ms": wall_clock_ms }));
    }
    let calls = |m: &str| {
        runs.iter().find(|r| r["report"]["mode"] == m).and_then(|r| r["report"]["write"]["chat_calls"].as_f64())
    };
    let comparison = match (calls("per_turn"), calls("batched")) {
        (Some(a), Some(b)) if a > 0.0 => json!({ "chat_call_reduction": 1.0 - b / a }),
        _ => serde_json::Value::Null,
    };
    emit(out, &json!({ "turns": turns.len(), "probes": probes.len(), "runs": runs, "comparison": comparison }))
}

fn serve(cfg: ServiceConfig, listen: Option<String>) -> anyhow::Result<()> {
    let store = Arc::new(open(&cfg)?);
    let addr = listen.unwrap_or_else(|| cfg.listen.clone());
    let token = Some(cfg.token.clone()).filter(|t| !t.is_empty());
    let app = api::router(AppState { store, token });
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
        tracing::info!(addr = %listener.local_addr()?, "listening");
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
