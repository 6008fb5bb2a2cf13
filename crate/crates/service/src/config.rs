//! Service configuration: a TOML file, then `THREADMEM_*` environment
//! overrides, then `--set key=value` flags, each layer replacing keys of
//! the one before.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use threadmem::provider::http::{HttpBackend, HttpConfig};
use threadmem::provider::Provider;
use threadmem::store::StoreConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderSettings {
    pub kind: ProviderKind,
    /// Mock embedding dimension. The HTTP provider reads `MEM_EMBED_DIM`.
    pub dim: usize,
    pub seed: u64,
}

impl Default for ProviderSettings {
    fn default() -> Self {
        ProviderSettings { kind: ProviderKind::Mock, dim: threadmem::harness::BENCH_DIM, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub listen: String,
    /// Static bearer token; empty disables auth.
    pub token: String,
    /// Turns per batch for `ingest --batch`.
    pub batch_size: usize,
    pub provider: ProviderSettings,
    pub store: StoreConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            data_dir: PathBuf::from("threadmem-data"),
            listen: "127.0.0.1:8080".into(),
            token: String::new(),
            batch_size: 20,
            provider: ProviderSettings::default(),
            store: StoreConfig::default(),
        }
    }
}

const ENV_KEYS: &[(&str, &str)] = &[
    ("THREADMEM_DATA_DIR", "data_dir"),
    ("THREADMEM_LISTEN", "listen"),
    ("THREADMEM_TOKEN", "token"),
    ("THREADMEM_PROVIDER", "provider.kind"),
];

impl ServiceConfig {
    /// Layers `file`, the environment (via `env`) and `sets` over defaults.
    pub fn load(file: Option<&Path>, env: impl Fn(&str) -> Option<String>, sets: &[String]) -> anyhow::Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for (var, key) in ENV_KEYS {
            if let Some(v) = env(var) {
                set_path(&mut table, key, toml::Value::String(v))?;
            }
        }
        for s in sets {
            let Some((key, raw)) = s.split_once('=') else {
                bail!("--set expects key=value, got {s:?}");
            };
            set_path(&mut table, key.trim(), parse_value(raw.trim()))?;
        }
        let cfg: ServiceConfig = table.try_into().context("invalid configuration")?;
        if cfg.batch_size == 0 {
            bail!("batch_size must be positive");
        }
        Ok(cfg)
    }

    pub fn provider(&self) -> anyhow::Result<Arc<Provider>> {
        Ok(Arc::new(match self.provider.kind {
            ProviderKind::Mock => Provider::mock(self.provider.dim, self.provider.seed),
            ProviderKind::Http => {
                let backend = Arc::new(HttpBackend::new(HttpConfig::from_env()?)?);
                Provider::new(backend.clone(), backend)
            }
        }))
    }
}

/// Numbers, booleans and inline arrays parse as TOML; anything else is a string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> anyhow::Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).with_context(|| format!("empty config key {key:?}"))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().with_context(|| format!("config key {p:?} is not a table"))?;
    }
    cur.insert(last.to_owned(), value);
    Ok(())
}
