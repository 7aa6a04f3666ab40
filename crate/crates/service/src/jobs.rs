//! Asynchronous jobs: a bounded queue drained by worker threads, one active
//! job per project, persisted so a restarted service resumes unfinished work.

use std::collections::{HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::broadcast;
use vstory_core::asset::write_atomic;
use vstory_core::backend::{BackendHandle, Backends, Capability};
use vstory_core::eval::fixture::FixtureBackend;
use vstory_core::eval::report::InterPairing;
use vstory_core::video::ClipParams;

use crate::config::BackendPool;
use crate::ops::{
    self, DatasetSettings, DirectParams, EvalParams, OpError, OpEvent, Overrides, TuneSettings,
};
use crate::store::ProjectStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
    Cancelled,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            JobState::Done | JobState::Failed | JobState::Cancelled
        )
    }

    pub fn can_become(self, next: JobState) -> bool {
        use JobState::*;
        matches!(
            (self, next),
            (Queued, Running)
                | (Queued, Cancelled)
                | (Running, Done)
                | (Running, Failed)
                | (Running, Cancelled)
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExpandSettings {
    #[serde(default)]
    pub duration_frames: Option<u32>,
    #[serde(default)]
    pub fps: Option<u32>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub retries: Option<u32>,
    #[serde(default)]
    pub retry_delay_ms: Option<u64>,
}

impl ExpandSettings {
    pub fn params(&self) -> ClipParams {
        let d = ClipParams::default();
        ClipParams {
            duration_frames: self.duration_frames.unwrap_or(d.duration_frames),
            fps: self.fps.unwrap_or(d.fps),
            seed: self.seed.unwrap_or(d.seed),
            retries: self.retries.unwrap_or(d.retries),
            retry_delay: self
                .retry_delay_ms
                .map(Duration::from_millis)
                .unwrap_or(d.retry_delay),
            ..d
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JobSpec {
    Direct(DirectParams),
    Generate {
        #[serde(default)]
        overrides: Overrides,
    },
    RegenerateFrom {
        t: u32,
        #[serde(default)]
        overrides: Overrides,
    },
    Evaluate {
        /// Embedding fixture file standing in for the analysis backends.
        #[serde(default)]
        fixtures: Option<PathBuf>,
        #[serde(default)]
        pairing: InterPairing,
    },
    Expand(ExpandSettings),
    Tune(TuneSettings),
    BuildDataset(DatasetSettings),
}

impl JobSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            JobSpec::Direct(_) => "direct",
            JobSpec::Generate { .. } => "generate",
            JobSpec::RegenerateFrom { .. } => "regenerate_from",
            JobSpec::Evaluate { .. } => "evaluate",
            JobSpec::Expand(_) => "expand",
            JobSpec::Tune(_) => "tune",
            JobSpec::BuildDataset(_) => "build_dataset",
        }
    }

    fn required(&self) -> &'static [Capability] {
        match self {
            JobSpec::Direct(_) => ops::DIRECT_CAPS,
            JobSpec::Generate { .. } | JobSpec::RegenerateFrom { .. } => ops::GENERATE_CAPS,
            JobSpec::Evaluate { .. } => &[],
            JobSpec::Expand(_) => ops::EXPAND_CAPS,
            JobSpec::Tune(_) => ops::TUNE_CAPS,
            JobSpec::BuildDataset(_) => ops::DATASET_CAPS,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub current: u64,
    pub total: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobFailure {
    pub code: String,
    pub message: String,
    #[serde(default)]
    pub details: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub project_id: String,
    pub kind: String,
    pub spec: JobSpec,
    pub state: JobState,
    pub progress: Progress,
    #[serde(default)]
    pub result: Option<Value>,
    #[serde(default)]
    pub error: Option<JobFailure>,
    #[serde(default)]
    pub idempotency_key: Option<String>,
    /// Times a worker has started this job; above 1 after a restart.
    #[serde(default)]
    pub attempts: u32,
    /// Sequence number of the last event emitted.
    #[serde(default)]
    pub last_seq: u64,
    pub created_ms: u64,
    pub updated_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobEvent {
    pub seq: u64,
    pub event: String,
    pub data: Value,
}

#[derive(Debug, Error)]
pub enum JobError {
    #[error("project {0} not found")]
    ProjectNotFound(String),
    #[error("job {0} not found")]
    NotFound(String),
    #[error("project {project} is busy with job {job}")]
    Busy { project: String, job: String },
    #[error("job queue is full ({0} waiting)")]
    QueueFull(usize),
    #[error("no backend configured for {}", caps_list(.0))]
    MissingCapabilities(Vec<Capability>),
    #[error("idempotency key {0:?} was used for a different request")]
    IdempotencyConflict(String),
    #[error("job {id} is already {state:?}")]
    Finished { id: String, state: JobState },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug)]
pub struct JobConfig {
    pub workers: usize,
    pub queue_capacity: usize,
}

impl Default for JobConfig {
    fn default() -> Self {
        Self {
            workers: 2,
            queue_capacity: 64,
        }
    }
}

struct Entry {
    job: Job,
    events: Vec<JobEvent>,
    tx: broadcast::Sender<JobEvent>,
    cancel: Arc<AtomicBool>,
}

#[derive(Default)]
struct State {
    jobs: HashMap<String, Entry>,
    queue: VecDeque<String>,
    /// Project id to its queued or running job.
    active: HashMap<String, String>,
    idempotency: HashMap<String, String>,
}

struct Inner {
    store: Arc<ProjectStore>,
    pool: BackendPool,
    dir: PathBuf,
    config: JobConfig,
    state: Mutex<State>,
    wake: Condvar,
    shutdown: AtomicBool,
}

pub struct JobManager {
    inner: Arc<Inner>,
    workers: Mutex<Vec<JoinHandle<()>>>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl Inner {
    fn persist(&self, job: &Job) {
        let path = self.dir.join(format!("{}.json", job.id));
        let result = serde_json::to_vec_pretty(job)
            .map_err(std::io::Error::other)
            .and_then(|b| write_atomic(&path, &b));
        if let Err(e) = result {
            tracing::error!(job = %job.id, error = %e, "cannot persist job");
        }
    }

    /// Appends an event and fans it out. Progress is kept monotone.
    fn emit(&self, id: &str, event: &str, data: Value) {
        let mut st = self.state.lock();
        let Some(entry) = st.jobs.get_mut(id) else {
            return;
        };
        if event == "progress" {
            let cur = data["current"].as_u64().unwrap_or(0);
            let total = data["total"].as_u64().unwrap_or(0);
            let p = &mut entry.job.progress;
            if cur < p.current && total <= p.total {
                return;
            }
            p.current = p.current.max(cur);
            p.total = p.total.max(total);
        }
        entry.job.last_seq += 1;
        entry.job.updated_ms = now_ms();
        let ev = JobEvent {
            seq: entry.job.last_seq,
            event: event.to_string(),
            data,
        };
        entry.events.push(ev.clone());
        let _ = entry.tx.send(ev);
        self.persist(&entry.job);
    }

    fn transition(&self, id: &str, next: JobState) -> bool {
        {
            let mut st = self.state.lock();
            let Some(entry) = st.jobs.get_mut(id) else {
                return false;
            };
            if !entry.job.state.can_become(next) {
                return false;
            }
            entry.job.state = next;
            if next == JobState::Running {
                entry.job.attempts += 1;
            }
            if next.is_terminal() {
                let project = entry.job.project_id.clone();
                if st.active.get(&project).map(String::as_str) == Some(id) {
                    st.active.remove(&project);
                }
            }
        }
        self.emit(id, "state", json!({ "state": next }));
        true
    }

    fn backends(&self, project_id: &str) -> Backends {
        let dim = self
            .store
            .load(project_id)
            .map(|p| p.config.shot_prefix_dims.d)
            .unwrap_or(vstory_core::story::PrefixDims::default().d);
        self.pool.for_dim(dim)
    }

    fn execute(&self, job: &Job, cancel: &AtomicBool) -> Result<Value, OpError> {
        let dir = self.store.dir(&job.project_id);
        let backends = self.backends(&job.project_id);
        let mut sink = |e: OpEvent| {
            let v = serde_json::to_value(&e).unwrap_or(Value::Null);
            let name = v["event"].as_str().unwrap_or("log").to_string();
            self.emit(&job.id, &name, v);
        };
        match &job.spec {
            JobSpec::Direct(p) => to_value(ops::direct(&dir, p, &backends, &mut sink)),
            JobSpec::Generate { overrides } => to_value(ops::generate(
                &dir,
                &backends,
                overrides,
                Some(cancel),
                &mut sink,
            )),
            JobSpec::RegenerateFrom { t, overrides } => to_value(ops::regenerate(
                &dir,
                *t,
                &backends,
                overrides,
                Some(cancel),
                &mut sink,
            )),
            JobSpec::Evaluate { fixtures, pairing } => {
                let mut b = backends;
                if let Some(path) = fixtures {
                    b.add(BackendHandle::in_process(Arc::new(FixtureBackend::load(
                        path,
                    )?)));
                }
                let report = ops::evaluate(&dir, &b, &EvalParams { pairing: *pairing }, &mut sink)?;
                Ok(json!({ "story_id": report.story_id, "per_story": report.per_story }))
            }
            JobSpec::Expand(s) => {
                let out = ops::expand(&dir, &backends, &s.params(), &mut sink)?;
                Ok(serde_json::to_value(&out.manifest).unwrap_or(Value::Null))
            }
            JobSpec::Tune(s) => to_value(ops::tune(&dir, s, &backends, &mut sink)),
            JobSpec::BuildDataset(s) => to_value(ops::build_dataset(s, &backends, &mut sink)),
        }
    }

    fn run(&self, id: &str) {
        let (job, cancel) = {
            let st = self.state.lock();
            let Some(e) = st.jobs.get(id) else { return };
            (e.job.clone(), e.cancel.clone())
        };
        if job.state == JobState::Queued && !self.transition(id, JobState::Running) {
            return;
        }
        if job.state == JobState::Running {
            let mut st = self.state.lock();
            if let Some(e) = st.jobs.get_mut(id) {
                e.job.attempts += 1;
            }
            drop(st);
            self.emit(id, "log", json!({ "message": "resuming after restart" }));
        }
        tracing::info!(job = %id, kind = job.kind, project = %job.project_id, "job started");
        let outcome = self.execute(&job, &cancel);
        let next = match &outcome {
            Ok(_) => JobState::Done,
            Err(e) if e.is_cancelled() => JobState::Cancelled,
            Err(_) => JobState::Failed,
        };
        {
            let mut st = self.state.lock();
            if let Some(e) = st.jobs.get_mut(id) {
                match outcome {
                    Ok(v) => e.job.result = Some(v),
                    Err(err) => {
                        tracing::warn!(job = %id, error = %err, "job failed");
                        e.job.error = Some(JobFailure {
                            code: err.code(),
                            message: err.to_string(),
                            details: err.details(),
                        });
                    }
                }
            }
        }
        self.transition(id, next);
    }

    fn worker(self: Arc<Self>) {
        loop {
            let id = {
                let mut st = self.state.lock();
                loop {
                    if self.shutdown.load(Ordering::SeqCst) {
                        return;
                    }
                    if let Some(id) = st.queue.pop_front() {
                        break id;
                    }
                    self.wake.wait(&mut st);
                }
            };
            self.run(&id);
        }
    }
}

impl JobManager {
    /// Loads persisted jobs, re-queues unfinished ones and starts workers.
    pub fn start(
        store: Arc<ProjectStore>,
        pool: BackendPool,
        config: JobConfig,
    ) -> Result<Self, JobError> {
        let dir = store.root().join("jobs");
        std::fs::create_dir_all(&dir)?;
        let mut st = State::default();
        let mut pending: Vec<Job> = Vec::new();
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            match read_job(&path) {
                Ok(job) => {
                    if let Some(k) = &job.idempotency_key {
                        st.idempotency
                            .insert(idem_slot(&job.project_id, k), job.id.clone());
                    }
                    if !job.state.is_terminal() {
                        pending.push(job.clone());
                    }
                    let (tx, _) = broadcast::channel(1024);
                    st.jobs.insert(
                        job.id.clone(),
                        Entry {
                            job,
                            events: Vec::new(),
                            tx,
                            cancel: Arc::new(AtomicBool::new(false)),
                        },
                    );
                }
                Err(e) => {
                    tracing::warn!(path = %path.display(), error = %e, "skipping unreadable job file")
                }
            }
        }
        pending.sort_by_key(|j| (j.created_ms, j.id.clone()));
        for job in pending {
            tracing::info!(job = %job.id, state = ?job.state, "re-queuing unfinished job");
            st.active.insert(job.project_id.clone(), job.id.clone());
            st.queue.push_back(job.id);
        }
        let inner = Arc::new(Inner {
            store,
            pool,
            dir,
            config: config.clone(),
            state: Mutex::new(st),
            wake: Condvar::new(),
            shutdown: AtomicBool::new(false),
        });
        let workers = (0..config.workers.max(1))
            .map(|i| {
                let inner = inner.clone();
                std::thread::Builder::new()
                    .name(format!("job-worker-{i}"))
                    .spawn(move || inner.worker())
                    .expect("spawn worker")
            })
            .collect();
        Ok(Self {
            inner,
            workers: Mutex::new(workers),
        })
    }

    /// Queues a job. Returns the job and whether it was newly created; a
    /// repeated idempotency key returns the original job.
    pub fn submit(
        &self,
        project_id: &str,
        spec: JobSpec,
        idempotency_key: Option<String>,
    ) -> Result<(Job, bool), JobError> {
        let inner = &self.inner;
        let mut st = inner.state.lock();
        if let Some(key) = &idempotency_key {
            if let Some(existing) = st.idempotency.get(&idem_slot(project_id, key)) {
                let job = &st.jobs[existing].job;
                if job.spec != spec {
                    return Err(JobError::IdempotencyConflict(key.clone()));
                }
                return Ok((job.clone(), false));
            }
        }
        if !inner.store.exists(project_id) && !matches!(spec, JobSpec::Direct(_)) {
            return Err(JobError::ProjectNotFound(project_id.to_string()));
        }
        let missing: Vec<Capability> = spec
            .required()
            .iter()
            .copied()
            .filter(|c| !inner.pool.has(*c))
            .collect();
        if !missing.is_empty() {
            return Err(JobError::MissingCapabilities(missing));
        }
        if let Some(job) = st.active.get(project_id) {
            return Err(JobError::Busy {
                project: project_id.to_string(),
                job: job.clone(),
            });
        }
        if st.queue.len() >= inner.config.queue_capacity {
            return Err(JobError::QueueFull(st.queue.len()));
        }
        let now = now_ms();
        let job = Job {
            id: uuid::Uuid::new_v4().simple().to_string(),
            project_id: project_id.to_string(),
            kind: spec.kind().to_string(),
            spec,
            state: JobState::Queued,
            progress: Progress::default(),
            result: None,
            error: None,
            idempotency_key: idempotency_key.clone(),
            attempts: 0,
            last_seq: 0,
            created_ms: now,
            updated_ms: now,
        };
        inner.persist(&job);
        if let Some(k) = idempotency_key {
            st.idempotency
                .insert(idem_slot(project_id, &k), job.id.clone());
        }
        st.active.insert(project_id.to_string(), job.id.clone());
        st.queue.push_back(job.id.clone());
        let (tx, _) = broadcast::channel(1024);
        st.jobs.insert(
            job.id.clone(),
            Entry {
                job: job.clone(),
                events: Vec::new(),
                tx,
                cancel: Arc::new(AtomicBool::new(false)),
            },
        );
        drop(st);
        inner.emit(&job.id, "state", json!({ "state": JobState::Queued }));
        inner.wake.notify_one();
        Ok((job, true))
    }

    pub fn get(&self, id: &str) -> Option<Job> {
        self.inner.state.lock().jobs.get(id).map(|e| e.job.clone())
    }

    pub fn list(&self, project_id: Option<&str>) -> Vec<Job> {
        let st = self.inner.state.lock();
        let mut jobs: Vec<Job> = st
            .jobs
            .values()
            .filter(|e| project_id.is_none_or(|p| e.job.project_id == p))
            .map(|e| e.job.clone())
            .collect();
        jobs.sort_by_key(|j| (j.created_ms, j.id.clone()));
        jobs
    }

    /// The queued or running job holding `project_id`, if any.
    pub fn active_job(&self, project_id: &str) -> Option<String> {
        self.inner.state.lock().active.get(project_id).cloned()
    }

    /// Events after `after`, plus a live receiver subscribed before the
    /// snapshot was taken so nothing falls in between.
    pub fn subscribe(
        &self,
        id: &str,
        after: u64,
    ) -> Option<(Vec<JobEvent>, broadcast::Receiver<JobEvent>, bool)> {
        let st = self.inner.state.lock();
        let e = st.jobs.get(id)?;
        let rx = e.tx.subscribe();
        let past = e
            .events
            .iter()
            .filter(|ev| ev.seq > after)
            .cloned()
            .collect();
        Some((past, rx, e.job.state.is_terminal()))
    }

    pub fn events_after(&self, id: &str, after: u64) -> Vec<JobEvent> {
        let st = self.inner.state.lock();
        st.jobs
            .get(id)
            .map(|e| {
                e.events
                    .iter()
                    .filter(|ev| ev.seq > after)
                    .cloned()
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn cancel(&self, id: &str) -> Result<Job, JobError> {
        let state = {
            let st = self.inner.state.lock();
            let e = st
                .jobs
                .get(id)
                .ok_or_else(|| JobError::NotFound(id.to_string()))?;
            e.cancel.store(true, Ordering::SeqCst);
            e.job.state
        };
        match state {
            JobState::Queued => {
                self.inner.state.lock().queue.retain(|q| q != id);
                self.inner.transition(id, JobState::Cancelled);
            }
            JobState::Running => {}
            s => {
                return Err(JobError::Finished {
                    id: id.to_string(),
                    state: s,
                })
            }
        }
        Ok(self.get(id).expect("exists"))
    }

    /// Blocks until the job reaches a terminal state or `timeout` passes.
    pub fn wait(&self, id: &str, timeout: Duration) -> Option<Job> {
        let deadline = std::time::Instant::now() + timeout;
        loop {
            let job = self.get(id)?;
            if job.state.is_terminal() || std::time::Instant::now() >= deadline {
                return Some(job);
            }
            std::thread::sleep(Duration::from_millis(10));
        }
    }

    pub fn shutdown(&self) {
        self.inner.shutdown.store(true, Ordering::SeqCst);
        self.inner.wake.notify_all();
        for h in self.workers.lock().drain(..) {
            let _ = h.join();
        }
    }
}

impl Drop for JobManager {
    fn drop(&mut self) {
        self.inner.shutdown.store(true, Ordering::SeqCst);
        self.inner.wake.notify_all();
    }
}

fn idem_slot(project: &str, key: &str) -> String {
    format!("{project}\u{0}{key}")
}

fn read_job(path: &Path) -> std::io::Result<Job> {
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(std::io::Error::other)
}

fn to_value<T: serde::Serialize>(v: Result<T, OpError>) -> Result<Value, OpError> {
    v.map(|r| serde_json::to_value(r).unwrap_or(Value::Null))
}

fn caps_list(caps: &[Capability]) -> String {
    caps.iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}
