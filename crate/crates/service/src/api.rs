//! REST and SSE surface under `/api/v1`.

use std::collections::{BTreeMap, VecDeque};
use std::convert::Infallible;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{DefaultBodyLimit, Path, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use base64::Engine as _;
use futures::Stream;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::broadcast;
use vstory_core::asset::{image_dims, is_sha256_hex, AssetRef};
use vstory_core::eval::report::report_csv;
use vstory_core::story::{
    validate_project, Origin, RefKey, RefKind, ReferenceEntry, Script, ShotOrigin, StoryProject,
};

use crate::jobs::{JobError, JobEvent, JobManager, JobSpec};
use crate::ops;
use crate::store::{valid_id, ProjectStore, StoreError};

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<ProjectStore>,
    pub jobs: Arc<JobManager>,
    /// Bearer token required on every API route when set.
    pub token: Option<String>,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
    pub details: Vec<String>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            code: code.into(),
            message: message.into(),
            details: Vec::new(),
        }
    }

    fn bad_request(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }

    fn with_details(mut self, details: Vec<String>) -> Self {
        self.details = details;
        self
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "code": self.code, "message": self.message, "details": self.details } });
        (self.status, Json(body)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match &e {
            StoreError::NotFound(_) => {
                ApiError::new(StatusCode::NOT_FOUND, "NOT_FOUND", e.to_string())
            }
            StoreError::Exists(_) => {
                ApiError::new(StatusCode::CONFLICT, "PROJECT_EXISTS", e.to_string())
            }
            StoreError::InvalidId(_) => ApiError::bad_request("INVALID_ID", e.to_string()),
            _ => ApiError::new(
                StatusCode::INTERNAL_SERVER_ERROR,
                "STORE_ERROR",
                e.to_string(),
            ),
        }
    }
}

impl From<JobError> for ApiError {
    fn from(e: JobError) -> Self {
        let (status, code) = match &e {
            JobError::ProjectNotFound(_) | JobError::NotFound(_) => {
                (StatusCode::NOT_FOUND, "NOT_FOUND")
            }
            JobError::Busy { .. } => (StatusCode::CONFLICT, "PROJECT_BUSY"),
            JobError::IdempotencyConflict(_) => (StatusCode::CONFLICT, "IDEMPOTENCY_CONFLICT"),
            JobError::Finished { .. } => (StatusCode::CONFLICT, "JOB_FINISHED"),
            JobError::QueueFull(_) => (StatusCode::SERVICE_UNAVAILABLE, "QUEUE_FULL"),
            JobError::MissingCapabilities(_) => {
                (StatusCode::SERVICE_UNAVAILABLE, "BACKEND_UNAVAILABLE")
            }
            JobError::Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, "IO_ERROR"),
        };
        let details = match &e {
            JobError::MissingCapabilities(caps) => caps.iter().map(|c| c.to_string()).collect(),
            _ => Vec::new(),
        };
        ApiError::new(status, code, e.to_string()).with_details(details)
    }
}

impl From<ops::OpError> for ApiError {
    fn from(e: ops::OpError) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, &e.code(), e.to_string())
            .with_details(e.details())
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn invalid(project: &StoryProject) -> ApiResult<()> {
    let report = validate_project(project);
    if report.is_ok() {
        return Ok(());
    }
    Err(ApiError::bad_request(
        report.violations[0].code(),
        format!(
            "project fails validation with {} violation(s)",
            report.violations.len()
        ),
    )
    .with_details(report.violations.iter().map(|v| v.to_string()).collect()))
}

fn known_assets(state: &AppState, project: &StoryProject) -> ApiResult<()> {
    for a in project
        .roster
        .iter()
        .filter_map(|r| r.asset.as_ref())
        .chain(project.keyframes.iter().map(|k| &k.asset))
    {
        if !state.store.assets().contains(a) {
            return Err(ApiError::bad_request(
                "UNKNOWN_ASSET",
                format!("asset {} is not stored", a.sha256),
            ));
        }
    }
    Ok(())
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

fn from_json<T: serde::de::DeserializeOwned>(v: Value) -> ApiResult<T> {
    serde_json::from_value(v).map_err(|e| ApiError::bad_request("MALFORMED", e.to_string()))
}

/// Expected version from `If-Match` or the body.
fn expected_version(headers: &HeaderMap, body: Option<u64>) -> ApiResult<Option<u64>> {
    match headers.get(header::IF_MATCH) {
        Some(v) => {
            let s = v.to_str().unwrap_or_default().trim().trim_matches('"');
            s.parse().map(Some).map_err(|_| {
                ApiError::bad_request("MALFORMED", "If-Match must be a project version")
            })
        }
        None => Ok(body),
    }
}

/// Read-modify-validate-write under the project lock. Refused while a job
/// holds the project or when the caller's version is stale.
fn mutate(
    state: &AppState,
    id: &str,
    expected: Option<u64>,
    f: impl FnOnce(&mut StoryProject) -> ApiResult<()>,
) -> ApiResult<StoryProject> {
    let lock = state.store.lock(id);
    let _guard = lock.lock();
    let mut project = state.store.load(id)?;
    if let Some(job) = state.jobs.active_job(id) {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "PROJECT_BUSY",
            format!("job {job} is working on this project"),
        ));
    }
    if let Some(v) = expected {
        if v != project.version {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "VERSION_CONFLICT",
                format!(
                    "project is at version {}, request was based on {v}",
                    project.version
                ),
            ));
        }
    }
    f(&mut project)?;
    invalid(&project)?;
    known_assets(state, &project)?;
    project.version += 1;
    state.store.save(&project)?;
    Ok(project)
}

fn versioned(project: StoryProject) -> Response {
    let etag = format!("\"{}\"", project.version);
    let mut resp = Json(project).into_response();
    if let Ok(v) = HeaderValue::from_str(&etag) {
        resp.headers_mut().insert(header::ETAG, v);
    }
    resp
}

async fn list_projects(State(s): State<AppState>) -> ApiResult<Response> {
    Ok(Json(json!({ "projects": s.store.list()? })).into_response())
}

async fn create_project(State(s): State<AppState>, Json(body): Json<Value>) -> ApiResult<Response> {
    if !body.is_object() {
        return Err(ApiError::bad_request(
            "MALFORMED",
            "body must be a JSON object",
        ));
    }
    let id = match body.get("id") {
        Some(Value::String(id)) => id.clone(),
        Some(_) => return Err(ApiError::bad_request("INVALID_ID", "id must be a string")),
        None => uuid::Uuid::new_v4().simple().to_string(),
    };
    if !valid_id(&id) {
        return Err(ApiError::bad_request(
            "INVALID_ID",
            format!("invalid project id {id:?}"),
        ));
    }
    let mut value = serde_json::to_value(StoryProject::new(id.clone(), "")).expect("serializable");
    merge(&mut value, body);
    value["id"] = Value::String(id.clone());
    let mut project: StoryProject = from_json(value)?;
    project.version = 1;
    invalid(&project)?;
    known_assets(&s, &project)?;
    s.store.create(&project)?;
    let mut resp = (StatusCode::CREATED, Json(&project)).into_response();
    if let Ok(v) = HeaderValue::from_str(&format!("/api/v1/projects/{id}")) {
        resp.headers_mut().insert(header::LOCATION, v);
    }
    Ok(resp)
}

async fn get_project(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(versioned(s.store.load(&id)?))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProjectPatch {
    #[serde(default)]
    version: Option<u64>,
    #[serde(default)]
    description: Option<String>,
    /// Partial config, merged field by field.
    #[serde(default)]
    config: Option<Value>,
    /// Partial scripts matched by `index`; unknown indices are appended.
    #[serde(default)]
    scripts: Option<Vec<Value>>,
    #[serde(default)]
    roster: Option<Vec<ReferenceEntry>>,
    /// Keyframe lock flags by script index.
    #[serde(default)]
    locks: Option<BTreeMap<u32, bool>>,
}

fn patch_script(project: &mut StoryProject, patch: Value) -> ApiResult<()> {
    let index = patch
        .get("index")
        .and_then(Value::as_u64)
        .ok_or_else(|| ApiError::bad_request("MALFORMED", "script patch needs an index"))?
        as u32;
    let touches_shot = patch.get("shot").is_some() && patch.get("shot_origin").is_none();
    match project.scripts.iter_mut().find(|s| s.index == index) {
        Some(existing) => {
            let before = existing.shot.clone();
            let mut v = serde_json::to_value(&*existing).expect("serializable");
            merge(&mut v, patch);
            *existing = from_json(v)?;
            if touches_shot && existing.shot != before {
                existing.shot_origin = ShotOrigin::User;
            }
        }
        None => {
            let mut s: Script = from_json(patch)?;
            if touches_shot {
                s.shot_origin = ShotOrigin::User;
            }
            project.scripts.push(s);
        }
    }
    Ok(())
}

async fn patch_project(
    State(s): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Json(body): Json<Value>,
) -> ApiResult<Response> {
    let patch: ProjectPatch = from_json(body)?;
    let expected = expected_version(&headers, patch.version)?;
    let project = mutate(&s, &id, expected, |p| {
        if let Some(d) = patch.description {
            p.description = d;
        }
        if let Some(c) = patch.config {
            let mut v = serde_json::to_value(&p.config).expect("serializable");
            merge(&mut v, c);
            p.config = from_json(v)?;
        }
        if let Some(r) = patch.roster {
            p.roster = r;
        }
        for sp in patch.scripts.unwrap_or_default() {
            patch_script(p, sp)?;
        }
        p.scripts.sort_by_key(|s| s.index);
        for (t, locked) in patch.locks.unwrap_or_default() {
            let kf = p.current_keyframe_mut(t).ok_or_else(|| {
                ApiError::bad_request(
                    "UNKNOWN_KEYFRAME",
                    format!("script {t} has no current keyframe"),
                )
            })?;
            kf.locked = locked;
        }
        Ok(())
    })?;
    Ok(versioned(project))
}

async fn put_script(
    State(s): State<AppState>,
    Path((id, t)): Path<(String, u32)>,
    headers: HeaderMap,
    Json(mut body): Json<Value>,
) -> ApiResult<Response> {
    if !body.is_object() {
        return Err(ApiError::bad_request(
            "MALFORMED",
            "body must be a script object",
        ));
    }
    let body_version = body
        .as_object_mut()
        .and_then(|o| o.remove("version"))
        .and_then(|v| v.as_u64());
    let expected = expected_version(&headers, body_version)?;
    body["index"] = json!(t);
    let explicit_origin = body.get("shot_origin").is_some();
    let mut script: Script = from_json(body)?;
    let project = mutate(&s, &id, expected, |p| {
        match p.scripts.iter_mut().find(|x| x.index == t) {
            Some(existing) => {
                if !explicit_origin && existing.shot != script.shot {
                    script.shot_origin = ShotOrigin::User;
                } else if !explicit_origin {
                    script.shot_origin = existing.shot_origin;
                }
                *existing = script;
            }
            None => {
                if !explicit_origin {
                    script.shot_origin = ShotOrigin::User;
                }
                p.scripts.push(script);
                p.scripts.sort_by_key(|x| x.index);
            }
        }
        Ok(())
    })?;
    Ok(versioned(project))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReferenceBody {
    kind: RefKind,
    #[serde(default)]
    caption: Option<String>,
    #[serde(default)]
    image_b64: Option<String>,
    #[serde(default)]
    asset: Option<AssetRef>,
    #[serde(default)]
    version: Option<u64>,
}

async fn put_reference(
    State(s): State<AppState>,
    Path((id, key)): Path<(String, String)>,
    headers: HeaderMap,
    Json(body): Json<Value>,
) -> ApiResult<Response> {
    let body: ReferenceBody = from_json(body)?;
    let key = RefKey::new(&key).map_err(|e| ApiError::bad_request("INVALID_KEY", e.to_string()))?;
    let asset = match (&body.image_b64, &body.asset) {
        (Some(b64), _) => {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(b64.trim())
                .map_err(|e| ApiError::bad_request("MALFORMED", format!("image_b64: {e}")))?;
            image_dims(&bytes)
                .map_err(|e| ApiError::bad_request("INVALID_IMAGE", e.to_string()))?;
            Some(s.store.assets().put(&bytes).map_err(|e| {
                ApiError::new(
                    StatusCode::INTERNAL_SERVER_ERROR,
                    "ASSET_ERROR",
                    e.to_string(),
                )
            })?)
        }
        (None, Some(a)) => Some(a.clone()),
        (None, None) => None,
    };
    let expected = expected_version(&headers, body.version)?;
    let project = mutate(&s, &id, expected, |p| {
        let entry = ReferenceEntry {
            key: key.clone(),
            kind: body.kind,
            asset,
            caption: body.caption.unwrap_or_default(),
            origin: Origin::UserSupplied,
        };
        match p
            .roster
            .iter_mut()
            .find(|r| r.key == key && r.kind == body.kind)
        {
            Some(r) => *r = entry,
            None => p.roster.push(entry),
        }
        Ok(())
    })?;
    Ok(versioned(project))
}

async fn submit_job(
    State(s): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Json(body): Json<Value>,
) -> ApiResult<Response> {
    let spec: JobSpec = from_json(body)?;
    if !valid_id(&id) {
        return Err(ApiError::bad_request(
            "INVALID_ID",
            format!("invalid project id {id:?}"),
        ));
    }
    let key = headers
        .get("idempotency-key")
        .and_then(|v| v.to_str().ok())
        .map(str::to_string);
    let lock = s.store.lock(&id);
    let (job, created) = {
        let _guard = lock.lock();
        s.jobs.submit(&id, spec, key)?
    };
    let status = if created {
        StatusCode::ACCEPTED
    } else {
        StatusCode::OK
    };
    let mut resp = (status, Json(&job)).into_response();
    if let Ok(v) = HeaderValue::from_str(&format!("/api/v1/jobs/{}", job.id)) {
        resp.headers_mut().insert(header::LOCATION, v);
    }
    Ok(resp)
}

#[derive(Debug, Deserialize)]
struct JobQuery {
    #[serde(default)]
    project: Option<String>,
}

async fn list_jobs(State(s): State<AppState>, Query(q): Query<JobQuery>) -> Json<Value> {
    Json(json!({ "jobs": s.jobs.list(q.project.as_deref()) }))
}

async fn get_job(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let job = s
        .jobs
        .get(&id)
        .ok_or_else(|| ApiError::from(JobError::NotFound(id)))?;
    Ok(Json(job).into_response())
}

async fn cancel_job(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(s.jobs.cancel(&id)?).into_response())
}

fn is_terminal_event(ev: &JobEvent) -> bool {
    ev.event == "state"
        && matches!(
            ev.data["state"].as_str(),
            Some("done" | "failed" | "cancelled")
        )
}

struct Feed {
    jobs: Arc<JobManager>,
    id: String,
    backlog: VecDeque<JobEvent>,
    rx: broadcast::Receiver<JobEvent>,
    last: u64,
    finished: bool,
}

fn event_stream(feed: Feed) -> impl Stream<Item = Result<Event, Infallible>> {
    futures::stream::unfold(feed, |mut feed| async move {
        loop {
            if feed.finished {
                return None;
            }
            if let Some(ev) = feed.backlog.pop_front() {
                if ev.seq <= feed.last {
                    continue;
                }
                feed.last = ev.seq;
                feed.finished = is_terminal_event(&ev);
                let sse = Event::default()
                    .id(ev.seq.to_string())
                    .event(ev.event.clone())
                    .json_data(&ev.data)
                    .unwrap_or_else(|_| Event::default().comment("unserializable event"));
                return Some((Ok(sse), feed));
            }
            match feed.rx.recv().await {
                Ok(ev) => feed.backlog.push_back(ev),
                Err(broadcast::error::RecvError::Lagged(_)) => {
                    feed.backlog = feed.jobs.events_after(&feed.id, feed.last).into();
                }
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    })
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    #[serde(default)]
    after: Option<u64>,
}

async fn job_events(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let after = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse().ok())
        .or(q.after)
        .unwrap_or(0);
    let (past, rx, terminal) = s
        .jobs
        .subscribe(&id, after)
        .ok_or_else(|| ApiError::from(JobError::NotFound(id.clone())))?;
    let feed = Feed {
        jobs: s.jobs.clone(),
        id,
        finished: terminal && past.is_empty(),
        backlog: past.into(),
        rx,
        last: after,
    };
    Ok(Sse::new(event_stream(feed))
        .keep_alive(KeepAlive::new().interval(Duration::from_secs(15)))
        .into_response())
}

fn content_type(ext: &str) -> &'static str {
    match ext {
        "png" => "image/png",
        "jpg" | "jpeg" => "image/jpeg",
        "webp" => "image/webp",
        "gif" => "image/gif",
        "mp4" => "video/mp4",
        "json" => "application/json",
        _ => "application/octet-stream",
    }
}

async fn get_asset(
    State(s): State<AppState>,
    Path(sha): Path<String>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let sha = sha
        .split('.')
        .next()
        .unwrap_or_default()
        .to_ascii_lowercase();
    if !is_sha256_hex(&sha) {
        return Err(ApiError::bad_request(
            "INVALID_DIGEST",
            "expected a hex sha256",
        ));
    }
    let asset = s
        .store
        .assets()
        .find(&sha)
        .map_err(|e| {
            ApiError::new(
                StatusCode::INTERNAL_SERVER_ERROR,
                "ASSET_ERROR",
                e.to_string(),
            )
        })?
        .ok_or_else(|| {
            ApiError::new(
                StatusCode::NOT_FOUND,
                "NOT_FOUND",
                format!("asset {sha} not found"),
            )
        })?;
    let etag = format!("\"{sha}\"");
    let cache = [
        (header::ETAG, etag.clone()),
        (
            header::CACHE_CONTROL,
            "public, max-age=31536000, immutable".to_string(),
        ),
    ];
    if headers
        .get(header::IF_NONE_MATCH)
        .and_then(|v| v.to_str().ok())
        == Some(etag.as_str())
    {
        return Ok((StatusCode::NOT_MODIFIED, cache).into_response());
    }
    let path = s.store.assets().path_of(&asset);
    let bytes = tokio::task::spawn_blocking(move || std::fs::read(path))
        .await
        .map_err(|e| {
            ApiError::new(
                StatusCode::INTERNAL_SERVER_ERROR,
                "ASSET_ERROR",
                e.to_string(),
            )
        })?
        .map_err(|e| {
            ApiError::new(
                StatusCode::INTERNAL_SERVER_ERROR,
                "ASSET_ERROR",
                e.to_string(),
            )
        })?;
    Ok((
        [(header::CONTENT_TYPE, content_type(&asset.ext).to_string())],
        cache,
        bytes,
    )
        .into_response())
}

#[derive(Debug, Deserialize)]
struct ReportQuery {
    #[serde(default)]
    format: Option<String>,
}

async fn get_report(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<ReportQuery>,
) -> ApiResult<Response> {
    if !s.store.exists(&id) {
        return Err(StoreError::NotFound(id).into());
    }
    let report = ops::read_report(&s.store.dir(&id))?.ok_or_else(|| {
        ApiError::new(
            StatusCode::NOT_FOUND,
            "NO_REPORT",
            "project has not been evaluated",
        )
    })?;
    if q.format.as_deref() == Some("csv") {
        return Ok(([(header::CONTENT_TYPE, "text/csv")], report_csv(&[report])).into_response());
    }
    Ok(Json(report).into_response())
}

async fn auth(State(s): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &s.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return ApiError::new(
                StatusCode::UNAUTHORIZED,
                "UNAUTHORIZED",
                "missing or wrong bearer token",
            )
            .into_response();
        }
    }
    next.run(req).await
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "NOT_FOUND", "no such route")
}

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/projects", get(list_projects).post(create_project))
        .route("/projects/{id}", get(get_project).patch(patch_project))
        .route("/projects/{id}/scripts/{t}", put(put_script))
        .route("/projects/{id}/references/{key}", put(put_reference))
        .route("/projects/{id}/jobs", post(submit_job))
        .route("/projects/{id}/report", get(get_report))
        .route("/jobs", get(list_jobs))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/cancel", post(cancel_job))
        .route("/jobs/{id}/events", get(job_events))
        .route("/assets/{sha256}", get(get_asset))
        .layer(middleware::from_fn_with_state(state.clone(), auth));
    Router::new()
        .nest("/api/v1", api)
        .route("/healthz", get(|| async { "ok" }))
        .fallback(not_found)
        .layer(DefaultBodyLimit::max(64 << 20))
        .with_state(state)
}
