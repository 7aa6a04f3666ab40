//! Backend configuration: a JSON file plus `VSTORY_BACKEND_<CAP>_URL`
//! environment overrides, or the in-repo mock.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use serde::Deserialize;
use thiserror::Error;
use vstory_core::backend::{BackendError, BackendHandle, Backends, Capability, RetryPolicy};
use vstory_core::mock::MockBackend;

use crate::http_backend::HttpBackend;

pub const ENV_PREFIX: &str = "VSTORY_BACKEND_";
/// Crash simulation: the mock aborts the process on this decode call.
pub const MOCK_ABORT_ENV: &str = "VSTORY_MOCK_ABORT_AT_FRAME";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {0}: {1}")]
    Read(PathBuf, std::io::Error),
    #[error("malformed backend config {0}: {1}")]
    Malformed(PathBuf, serde_json::Error),
    #[error("unknown capability in {var}: {message}")]
    UnknownCapability { var: String, message: String },
    #[error("cannot reach backend {url}: {source}")]
    Discovery { url: String, source: BackendError },
    #[error("invalid value for {0}")]
    InvalidEnv(String),
}

#[derive(Clone, Debug, Deserialize)]
pub struct BackendEntry {
    #[serde(default)]
    pub name: Option<String>,
    pub url: String,
    /// Discovered from `GET /v1/capabilities` when omitted.
    #[serde(default)]
    pub capabilities: Option<Vec<Capability>>,
    #[serde(default)]
    pub timeout_s: Option<f64>,
    #[serde(default)]
    pub auth_token: Option<String>,
    #[serde(default)]
    pub retries: Option<u32>,
    #[serde(default)]
    pub retry_delay_ms: Option<u64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
pub struct BackendsFile {
    #[serde(default)]
    pub backends: Vec<BackendEntry>,
}

impl BackendsFile {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| ConfigError::Read(path.to_path_buf(), e))?;
        serde_json::from_str(&text).map_err(|e| ConfigError::Malformed(path.to_path_buf(), e))
    }
}

fn handle_for(entry: &BackendEntry) -> Result<BackendHandle, ConfigError> {
    let timeout = Duration::from_secs_f64(entry.timeout_s.unwrap_or(120.0));
    let backend = match &entry.capabilities {
        Some(caps) => HttpBackend::new(
            entry.name.clone().unwrap_or_else(|| entry.url.clone()),
            &entry.url,
            caps.clone(),
        )
        .with_timeout(timeout)
        .with_token(entry.auth_token.clone()),
        None => HttpBackend::discover(
            entry.name.clone(),
            &entry.url,
            timeout,
            entry.auth_token.clone(),
        )
        .map_err(|source| ConfigError::Discovery {
            url: entry.url.clone(),
            source,
        })?,
    };
    let mut handle = BackendHandle::new(Arc::new(backend), &entry.url);
    handle.timeout = timeout;
    handle.auth_token = entry.auth_token.clone();
    let default = RetryPolicy::default();
    handle.retry = RetryPolicy {
        max_retries: entry.retries.unwrap_or(default.max_retries),
        base_delay: entry
            .retry_delay_ms
            .map(Duration::from_millis)
            .unwrap_or(default.base_delay),
    };
    Ok(handle)
}

/// Routes from the file first, then per-capability environment overrides.
pub fn load_backends(
    file: Option<&Path>,
    env: &BTreeMap<String, String>,
) -> Result<Backends, ConfigError> {
    let mut backends = Backends::new();
    if let Some(path) = file {
        for entry in BackendsFile::load(path)?.backends {
            backends.add(handle_for(&entry)?);
        }
    }
    for (var, url) in env {
        let Some(cap) = var
            .strip_prefix(ENV_PREFIX)
            .and_then(|r| r.strip_suffix("_URL"))
        else {
            continue;
        };
        let cap: Capability = cap
            .parse()
            .map_err(|message| ConfigError::UnknownCapability {
                var: var.clone(),
                message,
            })?;
        let entry = BackendEntry {
            name: Some(format!("{cap}@{url}")),
            url: url.clone(),
            capabilities: Some(vec![cap]),
            timeout_s: None,
            auth_token: None,
            retries: None,
            retry_delay_ms: None,
        };
        backends.route(cap, handle_for(&entry)?);
    }
    Ok(backends)
}

pub fn env_map() -> BTreeMap<String, String> {
    std::env::vars()
        .filter(|(k, _)| k.starts_with("VSTORY_"))
        .collect()
}

/// Where pipeline stages get their backends. The mock's encoder width has
/// to match each project's prefix width, so mocks are built per width.
#[derive(Clone)]
pub enum BackendPool {
    Fixed(Backends),
    Mock(MockPool),
}

#[derive(Clone, Default)]
pub struct MockPool {
    abort_at_decode: Option<u64>,
    by_dim: Arc<Mutex<HashMap<usize, Arc<MockBackend>>>>,
}

impl MockPool {
    pub fn new(abort_at_decode: Option<u64>) -> Self {
        Self {
            abort_at_decode,
            by_dim: Arc::default(),
        }
    }

    pub fn from_env(env: &BTreeMap<String, String>) -> Result<Self, ConfigError> {
        let abort = match env.get(MOCK_ABORT_ENV) {
            Some(v) => Some(
                v.parse()
                    .map_err(|_| ConfigError::InvalidEnv(MOCK_ABORT_ENV.into()))?,
            ),
            None => None,
        };
        Ok(Self::new(abort))
    }

    pub fn backend(&self, dim: usize) -> Arc<MockBackend> {
        self.by_dim
            .lock()
            .entry(dim)
            .or_insert_with(|| {
                let mut m = MockBackend::new(dim);
                if let Some(n) = self.abort_at_decode {
                    m = m.abort_process_at_decode(n);
                }
                Arc::new(m)
            })
            .clone()
    }
}

impl BackendPool {
    /// Backends for a project whose prefix width is `dim`.
    pub fn for_dim(&self, dim: usize) -> Backends {
        match self {
            BackendPool::Fixed(b) => b.clone(),
            BackendPool::Mock(pool) => {
                let handle =
                    BackendHandle::in_process(pool.backend(dim)).with_retry(RetryPolicy::none());
                Backends::single(handle)
            }
        }
    }

    pub fn has(&self, cap: Capability) -> bool {
        match self {
            BackendPool::Fixed(b) => b.has(cap),
            BackendPool::Mock(_) => true,
        }
    }
}
