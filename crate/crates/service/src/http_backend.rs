//! [`ModelBackend`] over the JSON/HTTP adapter protocol.

use std::collections::BTreeSet;
use std::sync::OnceLock;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use vstory_core::backend::{BackendError, BackendResult, Capability, ModelBackend};
use vstory_core::protocol::*;

/// A remote backend. The blocking client is built on first use, so a handle
/// can be constructed anywhere but must only be called off async threads.
pub struct HttpBackend {
    name: String,
    base: String,
    caps: BTreeSet<Capability>,
    timeout: Duration,
    token: Option<String>,
    client: OnceLock<reqwest::blocking::Client>,
}

impl HttpBackend {
    pub fn new(
        name: impl Into<String>,
        base_url: impl Into<String>,
        caps: impl IntoIterator<Item = Capability>,
    ) -> Self {
        Self {
            name: name.into(),
            base: base_url.into().trim_end_matches('/').to_string(),
            caps: caps.into_iter().collect(),
            timeout: Duration::from_secs(120),
            token: None,
            client: OnceLock::new(),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.token = token;
        self
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    /// Asks the endpoint which capabilities it offers.
    pub fn discover(
        name: Option<String>,
        base_url: &str,
        timeout: Duration,
        token: Option<String>,
    ) -> BackendResult<Self> {
        let probe = Self::new("probe", base_url, [])
            .with_timeout(timeout)
            .with_token(token.clone());
        let desc: CapabilitiesResponse = probe.send(
            probe
                .client()
                .get(format!("{}/v1/capabilities", probe.base)),
        )?;
        if desc.protocol_version != PROTOCOL_VERSION {
            return Err(BackendError::Protocol(format!(
                "{base_url} speaks protocol {}, expected {PROTOCOL_VERSION}",
                desc.protocol_version
            )));
        }
        Ok(
            Self::new(name.unwrap_or(desc.name), base_url, desc.capabilities)
                .with_timeout(timeout)
                .with_token(token),
        )
    }

    fn client(&self) -> &reqwest::blocking::Client {
        self.client.get_or_init(|| {
            reqwest::blocking::Client::builder()
                .timeout(self.timeout)
                .build()
                .expect("http client")
        })
    }

    fn send<T: DeserializeOwned>(
        &self,
        mut req: reqwest::blocking::RequestBuilder,
    ) -> BackendResult<T> {
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        let resp = req.send().map_err(|e| self.transport(e))?;
        let status = resp.status();
        let body = resp.bytes().map_err(|e| self.transport(e))?;
        if !status.is_success() {
            let parsed: Option<ErrorResponse> = serde_json::from_slice(&body).ok();
            let code = status.as_u16();
            return Err(BackendError::Remote {
                status: code,
                retryable: parsed.as_ref().is_some_and(|p| p.retryable)
                    || matches!(code, 429 | 502 | 503 | 504),
                message: parsed
                    .map(|p| p.error)
                    .unwrap_or_else(|| String::from_utf8_lossy(&body).into_owned()),
            });
        }
        serde_json::from_slice(&body)
            .map_err(|e| BackendError::Protocol(format!("{}: {e}", self.base)))
    }

    fn transport(&self, e: reqwest::Error) -> BackendError {
        if e.is_timeout() {
            BackendError::Timeout(format!("{}: {e}", self.base))
        } else {
            BackendError::Unreachable(format!("{}: {e}", self.base))
        }
    }

    fn post<Q: Serialize, R: DeserializeOwned>(
        &self,
        cap: Capability,
        req: &Q,
    ) -> BackendResult<R> {
        if !self.caps.contains(&cap) {
            return Err(BackendError::Unsupported(cap));
        }
        let body = serde_json::to_vec(req).map_err(|e| BackendError::Protocol(e.to_string()))?;
        self.send(
            self.client()
                .post(format!("{}{}", self.base, route(cap)))
                .header("content-type", "application/json")
                .body(body),
        )
    }
}

impl ModelBackend for HttpBackend {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn capabilities(&self) -> BTreeSet<Capability> {
        self.caps.clone()
    }

    fn text_encode(&self, req: &TextEncodeRequest) -> BackendResult<TextEncodeResponse> {
        self.post(Capability::TextEncode, req)
    }

    fn vae_encode(&self, req: &VaeEncodeRequest) -> BackendResult<VaeEncodeResponse> {
        self.post(Capability::VaeEncode, req)
    }

    fn dit_decode(&self, req: &DitDecodeRequest) -> BackendResult<ImageResponse> {
        self.post(Capability::DitDecode, req)
    }

    fn ti2v_generate(&self, req: &Ti2vRequest) -> BackendResult<Ti2vResponse> {
        self.post(Capability::Ti2v, req)
    }

    fn llm_complete(&self, req: &LlmRequest) -> BackendResult<LlmResponse> {
        self.post(Capability::LlmComplete, req)
    }

    fn image_generate(&self, req: &ImageGenerateRequest) -> BackendResult<ImageResponse> {
        self.post(Capability::ImageGenerate, req)
    }

    fn embed_image(&self, req: &EmbedImageRequest) -> BackendResult<EmbeddingResponse> {
        self.post(Capability::EmbedImage, req)
    }

    fn embed_text(&self, req: &EmbedTextRequest) -> BackendResult<EmbeddingResponse> {
        self.post(Capability::EmbedText, req)
    }

    fn segment(&self, req: &ImageRequest) -> BackendResult<SegmentResponse> {
        self.post(Capability::Segment, req)
    }

    fn face_embed(&self, req: &ImageRequest) -> BackendResult<FaceEmbedResponse> {
        self.post(Capability::FaceEmbed, req)
    }

    fn shot_classify(&self, req: &ShotClassifyRequest) -> BackendResult<ShotClassifyResponse> {
        self.post(Capability::ShotClassify, req)
    }

    fn aesthetics(&self, req: &ImageRequest) -> BackendResult<AestheticsResponse> {
        self.post(Capability::Aesthetics, req)
    }

    fn track(&self, req: &TrackRequest) -> BackendResult<TrackResponse> {
        self.post(Capability::Track, req)
    }

    fn caption(&self, req: &ImageRequest) -> BackendResult<CaptionResponse> {
        self.post(Capability::Caption, req)
    }

    fn tune_step(&self, req: &TuneStepRequest) -> BackendResult<TuneStepResponse> {
        self.post(Capability::TuneStep, req)
    }
}
