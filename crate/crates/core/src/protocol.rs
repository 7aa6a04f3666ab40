//! Wire types of the versioned backend adapter protocol (HTTP + JSON).
//!
//! | capability       | route                     |
//! |------------------|---------------------------|
//! | `text_encode`    | `POST /v1/text/encode`    |
//! | `vae_encode`     | `POST /v1/vae/encode`     |
//! | `dit_decode`     | `POST /v1/dit/decode`     |
//! | `ti2v`           | `POST /v1/ti2v/generate`  |
//! | `llm_complete`   | `POST /v1/llm/complete`   |
//! | `image_generate` | `POST /v1/image/generate` |
//! | `embed_image`    | `POST /v1/embed/image`    |
//! | `embed_text`     | `POST /v1/embed/text`     |
//! | `segment`        | `POST /v1/segment`        |
//! | `face_embed`     | `POST /v1/face/embed`     |
//! | `shot_classify`  | `POST /v1/shot/classify`  |
//! | `aesthetics`     | `POST /v1/aesthetics`     |
//! | `track`          | `POST /v1/track`          |
//! | `caption`        | `POST /v1/caption`        |
//! | `tune_step`      | `POST /v1/tune/step`      |
//!
//! plus `GET /v1/capabilities`. Every body carries `protocol_version`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backend::Capability;

pub const PROTOCOL_VERSION: u32 = 1;

pub fn route(cap: Capability) -> &'static str {
    match cap {
        Capability::TextEncode => "/v1/text/encode",
        Capability::VaeEncode => "/v1/vae/encode",
        Capability::DitDecode => "/v1/dit/decode",
        Capability::Ti2v => "/v1/ti2v/generate",
        Capability::LlmComplete => "/v1/llm/complete",
        Capability::ImageGenerate => "/v1/image/generate",
        Capability::EmbedImage => "/v1/embed/image",
        Capability::EmbedText => "/v1/embed/text",
        Capability::Segment => "/v1/segment",
        Capability::FaceEmbed => "/v1/face/embed",
        Capability::ShotClassify => "/v1/shot/classify",
        Capability::Aesthetics => "/v1/aesthetics",
        Capability::Track => "/v1/track",
        Capability::Caption => "/v1/caption",
        Capability::TuneStep => "/v1/tune/step",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapabilitiesResponse {
    pub protocol_version: u32,
    pub name: String,
    pub capabilities: Vec<Capability>,
    /// Shot labels the classifier can emit, when `shot_classify` is offered.
    #[serde(default)]
    pub shot_labels: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncodeRequest {
    pub protocol_version: u32,
    /// All prompts of one story, encoded jointly.
    pub prompt_group: Vec<String>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodedState {
    /// `l * d` little-endian f32 values, row-major.
    pub tokens_b64: String,
    pub l: usize,
    pub d: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncodeResponse {
    pub protocol_version: u32,
    pub states: Vec<EncodedState>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeImage {
    pub data_b64: String,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeEncodeRequest {
    pub protocol_version: u32,
    pub images: Vec<VaeImage>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeEncodeResponse {
    pub protocol_version: u32,
    pub latent_id: String,
    pub digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DitDecodeRequest {
    pub protocol_version: u32,
    /// Shot-aware hidden state, `rows * d` little-endian f32 values.
    pub state_b64: String,
    pub rows: usize,
    pub d: usize,
    pub latent_id: String,
    pub seed: u64,
    /// Passed through to the decoder untouched (guidance scales etc).
    #[serde(default)]
    pub decoder_params: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageResponse {
    pub protocol_version: u32,
    pub image_b64: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ti2vRequest {
    pub protocol_version: u32,
    pub image_b64: String,
    pub prompt: String,
    pub frames: u32,
    pub fps: u32,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ti2vResponse {
    pub protocol_version: u32,
    #[serde(default)]
    pub video_b64: Option<String>,
    #[serde(default)]
    pub asset_url: Option<String>,
    #[serde(default)]
    pub width: Option<u32>,
    #[serde(default)]
    pub height: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmMessage {
    pub role: String,
    pub content: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub protocol_version: u32,
    pub messages: Vec<LlmMessage>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub protocol_version: u32,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageGenerateRequest {
    pub protocol_version: u32,
    pub prompt: String,
    pub key: String,
    pub kind: String,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BBox {
    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedImageRequest {
    pub protocol_version: u32,
    pub image_b64: String,
    /// Restricts the embedding to a region of the image.
    #[serde(default)]
    pub bbox: Option<BBox>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedTextRequest {
    pub protocol_version: u32,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingResponse {
    pub protocol_version: u32,
    pub vector: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRequest {
    pub protocol_version: u32,
    pub image_b64: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub protocol_version: u32,
    /// Masked embedding of the foreground region.
    pub fg: Vec<f32>,
    /// Masked embedding of the background region.
    pub bg: Vec<f32>,
    pub mask_coverage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceEmbedResponse {
    pub protocol_version: u32,
    pub faces: Vec<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotClassifyRequest {
    pub protocol_version: u32,
    pub image_b64: String,
    pub labels: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotClassifyResponse {
    pub protocol_version: u32,
    pub label: String,
    /// One score per requested label, in request order.
    #[serde(default)]
    pub scores: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AestheticsResponse {
    pub protocol_version: u32,
    pub iqs: f64,
    pub ias: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackRequest {
    pub protocol_version: u32,
    pub frames_b64: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub frame: u32,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub id: u32,
    pub observations: Vec<Observation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackResponse {
    pub protocol_version: u32,
    pub tracks: Vec<Track>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionResponse {
    pub protocol_version: u32,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefixEntryPayload {
    pub label: String,
    pub n: usize,
    pub d: usize,
    pub values_b64: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneExample {
    pub label: String,
    pub caption: String,
    pub reference_sha256: String,
    pub target_sha256: String,
}

/// Loss and gradient of the prefix entries for one batch. Read-only on the
/// backend: model weights are never written.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneStepRequest {
    pub protocol_version: u32,
    pub entries: Vec<PrefixEntryPayload>,
    pub batch: Vec<TuneExample>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneStepResponse {
    pub protocol_version: u32,
    pub loss: f64,
    pub gradients: Vec<PrefixEntryPayload>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub protocol_version: u32,
    pub error: String,
    #[serde(default)]
    pub retryable: bool,
}
