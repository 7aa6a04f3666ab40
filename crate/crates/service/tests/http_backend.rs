mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Duration;

use common::*;
use vstory_core::backend::{
    BackendError, BackendHandle, BackendResult, Backends, Capability, ModelBackend,
};
use vstory_core::mock::MockBackend;
use vstory_core::project_io::ProjectDir;
use vstory_core::protocol::{
    AestheticsResponse, EmbedTextRequest, EmbeddingResponse, ImageRequest, PROTOCOL_VERSION,
};
use vstory_service::config::load_backends;
use vstory_service::http_backend::HttpBackend;
use vstory_service::ops::{self, Overrides};

fn generate_with(backends: &Backends) -> Vec<(u64, String)> {
    let dir = tempfile::tempdir().unwrap();
    copy_dir(&fixtures().join("generate/rooftop"), dir.path());
    let pd = ProjectDir::new(dir.path());
    let overrides = Overrides {
        seed: Some(7),
        ..Overrides::default()
    };
    ops::generate(&pd, backends, &overrides, None, &mut |_| {}).unwrap();
    let project: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("project.json")).unwrap())
            .unwrap();
    current_assets(&project)
}

#[test]
fn capabilities_are_discovered() {
    let mock = Arc::new(MockBackend::new(2048));
    let srv = BackendServer::start(mock.clone());
    let http = HttpBackend::discover(None, &srv.url, Duration::from_secs(10), None).unwrap();
    assert_eq!(http.name(), mock.name());
    assert_eq!(http.capabilities(), mock.capabilities());
    assert_eq!(http.describe().protocol_version, PROTOCOL_VERSION);
}

#[test]
fn generation_over_http_matches_in_process() {
    let mock = Arc::new(MockBackend::new(2048));
    let local = generate_with(&Backends::single(BackendHandle::in_process(mock.clone())));

    let srv = BackendServer::start(Arc::new(MockBackend::new(2048)));
    let http = HttpBackend::discover(None, &srv.url, Duration::from_secs(30), None).unwrap();
    let remote = generate_with(&Backends::single(BackendHandle::new(
        Arc::new(http),
        srv.url.clone(),
    )));
    assert_eq!(local.len(), 5);
    assert_eq!(local, remote);
}

#[test]
fn analysis_calls_round_trip_exactly() {
    let mock = Arc::new(MockBackend::new(64));
    let srv = BackendServer::start(mock.clone());
    let http = HttpBackend::discover(None, &srv.url, Duration::from_secs(10), None).unwrap();
    let req = EmbedTextRequest {
        protocol_version: PROTOCOL_VERSION,
        text: "a lighthouse at dusk".into(),
    };
    assert_eq!(
        http.embed_text(&req).unwrap(),
        mock.embed_text(&req).unwrap()
    );
}

/// Fails every call in a fixed way.
struct Broken {
    delay: Duration,
}

impl ModelBackend for Broken {
    fn name(&self) -> String {
        "broken".into()
    }

    fn capabilities(&self) -> BTreeSet<Capability> {
        [Capability::EmbedText, Capability::Aesthetics].into()
    }

    fn embed_text(&self, _req: &EmbedTextRequest) -> BackendResult<EmbeddingResponse> {
        Err(BackendError::Unreachable("model server down".into()))
    }

    fn aesthetics(&self, _req: &ImageRequest) -> BackendResult<AestheticsResponse> {
        std::thread::sleep(self.delay);
        Err(BackendError::Remote {
            status: 422,
            message: "image too small".into(),
            retryable: false,
        })
    }
}

#[test]
fn errors_keep_their_meaning_across_the_wire() {
    let srv = BackendServer::start(Arc::new(Broken {
        delay: Duration::from_millis(600),
    }));
    let http = HttpBackend::discover(None, &srv.url, Duration::from_secs(10), None).unwrap();
    let text = EmbedTextRequest {
        protocol_version: PROTOCOL_VERSION,
        text: "x".into(),
    };
    match http.embed_text(&text) {
        Err(BackendError::Remote {
            status: 503,
            retryable: true,
            message,
        }) => assert!(message.contains("model server down")),
        other => panic!("unexpected {other:?}"),
    }
    let img = ImageRequest {
        protocol_version: PROTOCOL_VERSION,
        image_b64: String::new(),
    };
    match http.aesthetics(&img) {
        Err(BackendError::Remote {
            status: 422,
            retryable: false,
            ..
        }) => {}
        other => panic!("unexpected {other:?}"),
    }
    // Not offered: refused locally without a request.
    assert_eq!(
        http.segment(&img).unwrap_err(),
        BackendError::Unsupported(Capability::Segment)
    );
    // Offered by the client config but not the server: 501 from the server.
    let liar = HttpBackend::new("liar", &srv.url, [Capability::Segment]);
    assert!(matches!(
        liar.segment(&img),
        Err(BackendError::Remote { status: 501, .. })
    ));

    let impatient = HttpBackend::new("slow", &srv.url, [Capability::Aesthetics])
        .with_timeout(Duration::from_millis(100));
    assert!(matches!(
        impatient.aesthetics(&img),
        Err(BackendError::Timeout(_))
    ));
}

#[test]
fn unreachable_endpoints_are_reported() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    let http = HttpBackend::new("gone", &url, [Capability::EmbedText]);
    let err = http
        .embed_text(&EmbedTextRequest {
            protocol_version: PROTOCOL_VERSION,
            text: "x".into(),
        })
        .unwrap_err();
    assert!(matches!(err, BackendError::Unreachable(_)), "{err:?}");
    assert!(err.is_retryable());
}

#[test]
fn backends_come_from_file_and_environment() {
    let a = BackendServer::start(Arc::new(MockBackend::new(64)));
    let b = BackendServer::start(Arc::new(MockBackend::new(64)));
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("backends.json");
    std::fs::write(
        &file,
        serde_json::json!({
            "backends": [
                {"name": "all", "url": a.url, "timeout_s": 5.0, "retries": 1},
                {"name": "clip", "url": b.url, "capabilities": ["embed_text", "embed_image"]}
            ]
        })
        .to_string(),
    )
    .unwrap();
    let mut env = BTreeMap::new();
    env.insert("VSTORY_BACKEND_DIT_DECODE_URL".to_string(), b.url.clone());
    env.insert("UNRELATED".to_string(), "x".to_string());
    let backends = load_backends(Some(&file), &env).unwrap();

    assert_eq!(
        backends.get(Capability::TextEncode).unwrap().endpoint,
        a.url
    );
    assert_eq!(
        backends
            .get(Capability::TextEncode)
            .unwrap()
            .retry
            .max_retries,
        1
    );
    assert_eq!(backends.get(Capability::EmbedText).unwrap().endpoint, b.url);
    assert_eq!(backends.get(Capability::DitDecode).unwrap().endpoint, b.url);
    assert_eq!(backends.get(Capability::Segment).unwrap().name, "all");

    env.insert("VSTORY_BACKEND_TELEPORT_URL".to_string(), b.url.clone());
    assert!(load_backends(None, &env).is_err());
}
