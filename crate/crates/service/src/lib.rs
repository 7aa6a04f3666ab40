//! Service layer for the vstory pipeline: project store, job queue, REST
//! and SSE API, HTTP backend adapter and the operations behind the CLI.

pub mod api;
pub mod backend_server;
pub mod config;
pub mod http_backend;
pub mod jobs;
pub mod ops;
pub mod store;

use std::future::Future;
use std::path::PathBuf;
use std::sync::Arc;

use thiserror::Error;

use crate::api::AppState;
use crate::config::BackendPool;
use crate::jobs::{JobConfig, JobError, JobManager};
use crate::store::{ProjectStore, StoreError};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Jobs(#[from] JobError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone)]
pub struct ServiceConfig {
    pub root: PathBuf,
    pub jobs: JobConfig,
    pub token: Option<String>,
}

/// Opens the store and starts the job workers, resuming unfinished jobs.
pub fn start(config: &ServiceConfig, pool: BackendPool) -> Result<AppState, ServiceError> {
    let store = Arc::new(ProjectStore::open(&config.root)?);
    let jobs = Arc::new(JobManager::start(store.clone(), pool, config.jobs.clone())?);
    Ok(AppState {
        store,
        jobs,
        token: config.token.clone(),
    })
}

pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, api::router(state))
        .with_graceful_shutdown(shutdown)
        .await
}
