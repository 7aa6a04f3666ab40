//! Serves any [`ModelBackend`] over the adapter protocol. Used by the
//! `mock-backend` command and by tests of [`crate::http_backend`].

use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Serialize;
use vstory_core::backend::{BackendError, BackendResult, Capability, ModelBackend};
use vstory_core::protocol::*;

type Shared = Arc<dyn ModelBackend>;

fn error_response(e: BackendError) -> Response {
    let status = match &e {
        BackendError::MissingCapability { .. } | BackendError::Unsupported(_) => {
            StatusCode::NOT_IMPLEMENTED
        }
        BackendError::Unreachable(_) => StatusCode::SERVICE_UNAVAILABLE,
        BackendError::Timeout(_) => StatusCode::GATEWAY_TIMEOUT,
        BackendError::Remote { status, .. } => {
            StatusCode::from_u16(*status).unwrap_or(StatusCode::BAD_GATEWAY)
        }
        BackendError::Protocol(_) => StatusCode::BAD_REQUEST,
    };
    let body = ErrorResponse {
        protocol_version: PROTOCOL_VERSION,
        retryable: e.is_retryable(),
        error: e.to_string(),
    };
    (status, Json(body)).into_response()
}

async fn dispatch<Q, R>(
    backend: Shared,
    req: Q,
    f: fn(&dyn ModelBackend, &Q) -> BackendResult<R>,
) -> Response
where
    Q: DeserializeOwned + Send + 'static,
    R: Serialize + Send + 'static,
{
    match tokio::task::spawn_blocking(move || f(backend.as_ref(), &req)).await {
        Ok(Ok(r)) => Json(r).into_response(),
        Ok(Err(e)) => error_response(e),
        Err(e) => error_response(BackendError::Remote {
            status: 500,
            message: e.to_string(),
            retryable: false,
        }),
    }
}

macro_rules! handler {
    ($name:ident, $req:ty, $method:ident) => {
        async fn $name(State(b): State<Shared>, Json(req): Json<$req>) -> Response {
            dispatch(b, req, |b, r| b.$method(r)).await
        }
    };
}

handler!(text_encode, TextEncodeRequest, text_encode);
handler!(vae_encode, VaeEncodeRequest, vae_encode);
handler!(dit_decode, DitDecodeRequest, dit_decode);
handler!(ti2v, Ti2vRequest, ti2v_generate);
handler!(llm_complete, LlmRequest, llm_complete);
handler!(image_generate, ImageGenerateRequest, image_generate);
handler!(embed_image, EmbedImageRequest, embed_image);
handler!(embed_text, EmbedTextRequest, embed_text);
handler!(segment, ImageRequest, segment);
handler!(face_embed, ImageRequest, face_embed);
handler!(shot_classify, ShotClassifyRequest, shot_classify);
handler!(aesthetics, ImageRequest, aesthetics);
handler!(track, TrackRequest, track);
handler!(caption, ImageRequest, caption);
handler!(tune_step, TuneStepRequest, tune_step);

async fn capabilities(State(b): State<Shared>) -> Json<CapabilitiesResponse> {
    Json(b.describe())
}

pub fn router(backend: Shared) -> Router {
    use Capability::*;
    Router::new()
        .route("/v1/capabilities", get(capabilities))
        .route(route(TextEncode), post(text_encode))
        .route(route(VaeEncode), post(vae_encode))
        .route(route(DitDecode), post(dit_decode))
        .route(route(Ti2v), post(ti2v))
        .route(route(LlmComplete), post(llm_complete))
        .route(route(ImageGenerate), post(image_generate))
        .route(route(EmbedImage), post(embed_image))
        .route(route(EmbedText), post(embed_text))
        .route(route(Segment), post(segment))
        .route(route(FaceEmbed), post(face_embed))
        .route(route(ShotClassify), post(shot_classify))
        .route(route(Aesthetics), post(aesthetics))
        .route(route(Track), post(track))
        .route(route(Caption), post(caption))
        .route(route(TuneStep), post(tune_step))
        .layer(axum::extract::DefaultBodyLimit::max(256 << 20))
        .with_state(backend)
}

pub async fn serve(backend: Shared, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(backend)).await
}
