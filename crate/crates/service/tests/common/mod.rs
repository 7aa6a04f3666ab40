#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde_json::Value;
use vstory_core::backend::{BackendResult, Capability, ModelBackend};
use vstory_core::mock::MockBackend;
use vstory_core::protocol::{DitDecodeRequest, ImageResponse};
use vstory_service::api::AppState;
use vstory_service::config::BackendPool;
use vstory_service::jobs::JobConfig;
use vstory_service::ServiceConfig;

pub const BIN: &str = env!("CARGO_BIN_EXE_vstory");

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            std::fs::copy(entry.path(), target).unwrap();
        }
    }
}

/// Copies `fixtures/generate/<name>` into a service store root.
pub fn install(root: &Path, name: &str) {
    let src = fixtures().join("generate").join(name);
    let dst = root.join("projects").join(name);
    std::fs::create_dir_all(&dst).unwrap();
    std::fs::copy(src.join("project.json"), dst.join("project.json")).unwrap();
    copy_dir(&src.join("assets"), &root.join("assets"));
}

/// Blocks every dit_decode until opened.
pub struct Gate {
    inner: Arc<MockBackend>,
    open: Mutex<bool>,
    cv: Condvar,
    pub entered: AtomicUsize,
}

impl Gate {
    pub fn new(dim: usize) -> Arc<Self> {
        Arc::new(Self {
            inner: Arc::new(MockBackend::new(dim)),
            open: Mutex::new(false),
            cv: Condvar::new(),
            entered: AtomicUsize::new(0),
        })
    }

    pub fn open(&self) {
        *self.open.lock().unwrap() = true;
        self.cv.notify_all();
    }

    pub fn wait_entered(&self, n: usize) {
        let deadline = Instant::now() + Duration::from_secs(30);
        while self.entered.load(Ordering::SeqCst) < n {
            assert!(Instant::now() < deadline, "backend never called");
            std::thread::sleep(Duration::from_millis(5));
        }
    }

    pub fn pool(self: &Arc<Self>) -> BackendPool {
        use vstory_core::backend::{BackendHandle, Backends};
        let mut b = Backends::single(BackendHandle::in_process(self.inner.clone()));
        b.add(BackendHandle::in_process(self.clone()));
        BackendPool::Fixed(b)
    }
}

impl ModelBackend for Gate {
    fn name(&self) -> String {
        "gate".into()
    }

    fn capabilities(&self) -> BTreeSet<Capability> {
        [Capability::DitDecode].into()
    }

    fn dit_decode(&self, req: &DitDecodeRequest) -> BackendResult<ImageResponse> {
        self.entered.fetch_add(1, Ordering::SeqCst);
        let mut open = self.open.lock().unwrap();
        while !*open {
            open = self.cv.wait(open).unwrap();
        }
        drop(open);
        self.inner.dit_decode(req)
    }
}

pub struct Server {
    pub base: String,
    pub state: AppState,
    rt: Option<tokio::runtime::Runtime>,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
}

impl Server {
    pub fn start(root: &Path, pool: BackendPool, jobs: JobConfig, token: Option<&str>) -> Self {
        let config = ServiceConfig {
            root: root.to_path_buf(),
            jobs,
            token: token.map(str::to_string),
        };
        let state = vstory_service::start(&config, pool).unwrap();
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .unwrap();
        let listener = rt
            .block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))
            .unwrap();
        let base = format!("http://{}/api/v1", listener.local_addr().unwrap());
        let (tx, rx) = tokio::sync::oneshot::channel();
        let st = state.clone();
        rt.spawn(async move {
            vstory_service::serve(listener, st, async {
                let _ = rx.await;
            })
            .await
            .unwrap();
        });
        Self {
            base,
            state,
            rt: Some(rt),
            stop: Some(tx),
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    pub fn client(&self) -> reqwest::blocking::Client {
        reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .unwrap()
    }

    pub fn get(&self, path: &str) -> (u16, Value) {
        json_of(self.client().get(self.url(path)).send().unwrap())
    }

    pub fn post(&self, path: &str, body: Value) -> (u16, Value) {
        json_of(
            self.client()
                .post(self.url(path))
                .json(&body)
                .send()
                .unwrap(),
        )
    }

    pub fn patch(&self, path: &str, body: Value) -> (u16, Value) {
        json_of(
            self.client()
                .patch(self.url(path))
                .json(&body)
                .send()
                .unwrap(),
        )
    }

    /// Polls until the job reaches a terminal state.
    pub fn wait_job(&self, id: &str) -> Value {
        let deadline = Instant::now() + Duration::from_secs(120);
        loop {
            let (status, job) = self.get(&format!("/jobs/{id}"));
            assert_eq!(status, 200, "{job}");
            if matches!(job["state"].as_str(), Some("done" | "failed" | "cancelled")) {
                return job;
            }
            assert!(Instant::now() < deadline, "job {id} did not finish: {job}");
            std::thread::sleep(Duration::from_millis(20));
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(rt) = self.rt.take() {
            rt.shutdown_timeout(Duration::from_secs(5));
        }
        self.state.jobs.shutdown();
    }
}

pub fn json_of(resp: reqwest::blocking::Response) -> (u16, Value) {
    let status = resp.status().as_u16();
    let text = resp.text().unwrap();
    (
        status,
        serde_json::from_str(&text).unwrap_or(Value::String(text)),
    )
}

pub fn current_assets(project: &Value) -> Vec<(u64, String)> {
    let mut out: Vec<(u64, String)> = project["keyframes"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|k| !k["superseded"].as_bool().unwrap_or(false))
        .map(|k| {
            (
                k["script_index"].as_u64().unwrap(),
                k["asset"]["sha256"].as_str().unwrap().to_string(),
            )
        })
        .collect();
    out.sort();
    out
}

/// Serves `backend` over the adapter protocol on an ephemeral port.
pub struct BackendServer {
    pub url: String,
    rt: Option<tokio::runtime::Runtime>,
}

impl BackendServer {
    pub fn start(backend: Arc<dyn ModelBackend>) -> Self {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .unwrap();
        let listener = rt
            .block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))
            .unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        rt.spawn(vstory_service::backend_server::serve(backend, listener));
        Self { url, rt: Some(rt) }
    }
}

impl Drop for BackendServer {
    fn drop(&mut self) {
        if let Some(rt) = self.rt.take() {
            rt.shutdown_timeout(Duration::from_secs(5));
        }
    }
}
