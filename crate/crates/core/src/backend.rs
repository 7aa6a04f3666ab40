//! Model backend adapters.
//!
//! Every pretrained model the pipeline relies on (text encoder, VAE, DiT
//! decoder, TI2V, embedders, classifiers, the LLM director) sits behind
//! [`ModelBackend`]. A [`BackendHandle`] wraps one implementation with its
//! descriptor, checks capabilities before each call and retries transient
//! failures.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    TextEncode,
    VaeEncode,
    DitDecode,
    Ti2v,
    EmbedImage,
    EmbedText,
    Segment,
    FaceEmbed,
    ShotClassify,
    Aesthetics,
    LlmComplete,
    ImageGenerate,
    Track,
    Caption,
    TuneStep,
}

impl Capability {
    pub const ALL: [Capability; 15] = [
        Capability::TextEncode,
        Capability::VaeEncode,
        Capability::DitDecode,
        Capability::Ti2v,
        Capability::EmbedImage,
        Capability::EmbedText,
        Capability::Segment,
        Capability::FaceEmbed,
        Capability::ShotClassify,
        Capability::Aesthetics,
        Capability::LlmComplete,
        Capability::ImageGenerate,
        Capability::Track,
        Capability::Caption,
        Capability::TuneStep,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Capability::TextEncode => "text_encode",
            Capability::VaeEncode => "vae_encode",
            Capability::DitDecode => "dit_decode",
            Capability::Ti2v => "ti2v",
            Capability::EmbedImage => "embed_image",
            Capability::EmbedText => "embed_text",
            Capability::Segment => "segment",
            Capability::FaceEmbed => "face_embed",
            Capability::ShotClassify => "shot_classify",
            Capability::Aesthetics => "aesthetics",
            Capability::LlmComplete => "llm_complete",
            Capability::ImageGenerate => "image_generate",
            Capability::Track => "track",
            Capability::Caption => "caption",
            Capability::TuneStep => "tune_step",
        }
    }
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Capability {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        Capability::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown capability {s:?}"))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend {backend:?} does not offer {capability}")]
    MissingCapability { backend: String, capability: Capability },
    #[error("BACKEND_UNREACHABLE: {0}")]
    Unreachable(String),
    #[error("backend call timed out: {0}")]
    Timeout(String),
    #[error("backend returned {status}: {message}")]
    Remote {
        status: u16,
        message: String,
        retryable: bool,
    },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("{0} is not implemented by this backend")]
    Unsupported(Capability),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Unreachable(_) | BackendError::Timeout(_) => true,
            BackendError::Remote { retryable, .. } => *retryable,
            _ => false,
        }
    }
}

pub type BackendResult<T> = Result<T, BackendError>;

/// One implementation of some subset of the adapter protocol.
///
/// Methods for capabilities the backend does not offer keep their default
/// body and answer [`BackendError::Unsupported`].
pub trait ModelBackend: Send + Sync {
    fn name(&self) -> String;
    fn capabilities(&self) -> BTreeSet<Capability>;

    fn describe(&self) -> CapabilitiesResponse {
        CapabilitiesResponse {
            protocol_version: PROTOCOL_VERSION,
            name: self.name(),
            capabilities: self.capabilities().into_iter().collect(),
            shot_labels: Vec::new(),
        }
    }

    fn text_encode(&self, _req: &TextEncodeRequest) -> BackendResult<TextEncodeResponse> {
        Err(BackendError::Unsupported(Capability::TextEncode))
    }
    fn vae_encode(&self, _req: &VaeEncodeRequest) -> BackendResult<VaeEncodeResponse> {
        Err(BackendError::Unsupported(Capability::VaeEncode))
    }
    fn dit_decode(&self, _req: &DitDecodeRequest) -> BackendResult<ImageResponse> {
        Err(BackendError::Unsupported(Capability::DitDecode))
    }
    fn ti2v_generate(&self, _req: &Ti2vRequest) -> BackendResult<Ti2vResponse> {
        Err(BackendError::Unsupported(Capability::Ti2v))
    }
    fn llm_complete(&self, _req: &LlmRequest) -> BackendResult<LlmResponse> {
        Err(BackendError::Unsupported(Capability::LlmComplete))
    }
    fn image_generate(&self, _req: &ImageGenerateRequest) -> BackendResult<ImageResponse> {
        Err(BackendError::Unsupported(Capability::ImageGenerate))
    }
    fn embed_image(&self, _req: &EmbedImageRequest) -> BackendResult<EmbeddingResponse> {
        Err(BackendError::Unsupported(Capability::EmbedImage))
    }
    fn embed_text(&self, _req: &EmbedTextRequest) -> BackendResult<EmbeddingResponse> {
        Err(BackendError::Unsupported(Capability::EmbedText))
    }
    fn segment(&self, _req: &ImageRequest) -> BackendResult<SegmentResponse> {
        Err(BackendError::Unsupported(Capability::Segment))
    }
    fn face_embed(&self, _req: &ImageRequest) -> BackendResult<FaceEmbedResponse> {
        Err(BackendError::Unsupported(Capability::FaceEmbed))
    }
    fn shot_classify(&self, _req: &ShotClassifyRequest) -> BackendResult<ShotClassifyResponse> {
        Err(BackendError::Unsupported(Capability::ShotClassify))
    }
    fn aesthetics(&self, _req: &ImageRequest) -> BackendResult<AestheticsResponse> {
        Err(BackendError::Unsupported(Capability::Aesthetics))
    }
    fn track(&self, _req: &TrackRequest) -> BackendResult<TrackResponse> {
        Err(BackendError::Unsupported(Capability::Track))
    }
    fn caption(&self, _req: &ImageRequest) -> BackendResult<CaptionResponse> {
        Err(BackendError::Unsupported(Capability::Caption))
    }
    fn tune_step(&self, _req: &TuneStepRequest) -> BackendResult<TuneStepResponse> {
        Err(BackendError::Unsupported(Capability::TuneStep))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_millis(200),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_retries: 0,
            base_delay: Duration::ZERO,
        }
    }

    pub fn immediate(max_retries: u32) -> Self {
        Self {
            max_retries,
            base_delay: Duration::ZERO,
        }
    }
}

/// A backend plus the descriptor the pipeline routes by.
#[derive(Clone)]
pub struct BackendHandle {
    pub name: String,
    pub endpoint: String,
    pub capabilities: BTreeSet<Capability>,
    pub timeout: Duration,
    pub auth_token: Option<String>,
    pub retry: RetryPolicy,
    backend: Arc<dyn ModelBackend>,
}

impl fmt::Debug for BackendHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BackendHandle")
            .field("name", &self.name)
            .field("endpoint", &self.endpoint)
            .field("capabilities", &self.capabilities)
            .finish_non_exhaustive()
    }
}

impl BackendHandle {
    pub fn new(backend: Arc<dyn ModelBackend>, endpoint: impl Into<String>) -> Self {
        Self {
            name: backend.name(),
            endpoint: endpoint.into(),
            capabilities: backend.capabilities(),
            timeout: Duration::from_secs(120),
            auth_token: None,
            retry: RetryPolicy::default(),
            backend,
        }
    }

    pub fn in_process(backend: Arc<dyn ModelBackend>) -> Self {
        Self::new(backend, "in-process")
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn backend(&self) -> &dyn ModelBackend {
        self.backend.as_ref()
    }

    pub fn supports(&self, cap: Capability) -> bool {
        self.capabilities.contains(&cap)
    }

    pub fn require(&self, cap: Capability) -> BackendResult<()> {
        if self.supports(cap) {
            Ok(())
        } else {
            Err(BackendError::MissingCapability {
                backend: self.name.clone(),
                capability: cap,
            })
        }
    }

    /// Runs `f` after a capability check, retrying transient failures with
    /// exponential backoff.
    pub fn call<T>(
        &self,
        cap: Capability,
        f: impl Fn(&dyn ModelBackend) -> BackendResult<T>,
    ) -> BackendResult<T> {
        self.require(cap)?;
        let mut attempt = 0;
        loop {
            match f(self.backend.as_ref()) {
                Err(e) if e.is_retryable() && attempt < self.retry.max_retries => {
                    let delay = self.retry.base_delay * 2u32.saturating_pow(attempt);
                    tracing::warn!(backend = %self.name, %cap, attempt, error = %e, "retrying backend call");
                    if !delay.is_zero() {
                        std::thread::sleep(delay);
                    }
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Capability-routed set of backend handles.
#[derive(Clone, Debug, Default)]
pub struct Backends {
    routes: BTreeMap<Capability, BackendHandle>,
}

impl Backends {
    pub fn new() -> Self {
        Self::default()
    }

    /// Routes every capability `handle` offers to it.
    pub fn single(handle: BackendHandle) -> Self {
        let mut b = Self::new();
        b.add(handle);
        b
    }

    /// Routes `handle`'s capabilities to it, replacing earlier routes.
    pub fn add(&mut self, handle: BackendHandle) -> &mut Self {
        for cap in handle.capabilities.clone() {
            self.routes.insert(cap, handle.clone());
        }
        self
    }

    pub fn route(&mut self, cap: Capability, handle: BackendHandle) -> &mut Self {
        self.routes.insert(cap, handle);
        self
    }

    pub fn remove(&mut self, cap: Capability) -> &mut Self {
        self.routes.remove(&cap);
        self
    }

    pub fn get(&self, cap: Capability) -> BackendResult<&BackendHandle> {
        self.routes.get(&cap).ok_or(BackendError::MissingCapability {
            backend: "<none configured>".into(),
            capability: cap,
        })
    }

    pub fn has(&self, cap: Capability) -> bool {
        self.routes.contains_key(&cap)
    }

    pub fn map_handles(&mut self, f: impl Fn(BackendHandle) -> BackendHandle) {
        for h in self.routes.values_mut() {
            *h = f(h.clone());
        }
    }
}

/// Deterministic identifier of a backend call: capability plus a digest of
/// the serialized request.
pub fn call_id<T: Serialize>(cap: Capability, request: &T) -> String {
    let body = serde_json::to_vec(request).unwrap_or_default();
    format!("{cap}:{}", &crate::asset::sha256_hex(&body)[..16])
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    struct Flaky {
        failures: AtomicU32,
        calls: AtomicU32,
    }

    impl ModelBackend for Flaky {
        fn name(&self) -> String {
            "flaky".into()
        }
        fn capabilities(&self) -> BTreeSet<Capability> {
            [Capability::Caption].into()
        }
        fn caption(&self, _req: &ImageRequest) -> BackendResult<CaptionResponse> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if self.failures.load(Ordering::SeqCst) > 0 {
                self.failures.fetch_sub(1, Ordering::SeqCst);
                return Err(BackendError::Unreachable("down".into()));
            }
            Ok(CaptionResponse {
                protocol_version: PROTOCOL_VERSION,
                text: "ok".into(),
            })
        }
    }

    fn req() -> ImageRequest {
        ImageRequest {
            protocol_version: PROTOCOL_VERSION,
            image_b64: String::new(),
        }
    }

    #[test]
    fn retries_transient_failures_up_to_budget() {
        let flaky = Arc::new(Flaky {
            failures: AtomicU32::new(3),
            calls: AtomicU32::new(0),
        });
        let handle = BackendHandle::in_process(flaky.clone()).with_retry(RetryPolicy::immediate(3));
        let out = handle.call(Capability::Caption, |b| b.caption(&req())).unwrap();
        assert_eq!(out.text, "ok");
        assert_eq!(flaky.calls.load(Ordering::SeqCst), 4);

        flaky.failures.store(4, Ordering::SeqCst);
        assert!(handle.call(Capability::Caption, |b| b.caption(&req())).is_err());
    }

    #[test]
    fn capability_is_checked_before_calling() {
        let flaky = Arc::new(Flaky {
            failures: AtomicU32::new(0),
            calls: AtomicU32::new(0),
        });
        let handle = BackendHandle::in_process(flaky.clone());
        let err = handle
            .call(Capability::Track, |b| b.caption(&req()))
            .unwrap_err();
        assert!(matches!(err, BackendError::MissingCapability { .. }));
        assert_eq!(flaky.calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn capability_names_roundtrip() {
        for cap in Capability::ALL {
            assert_eq!(cap.as_str().parse::<Capability>().unwrap(), cap);
            assert_eq!(serde_json::to_string(&cap).unwrap(), format!("\"{cap}\""));
        }
    }
}
