//! Analysis backend serving precomputed vectors from a JSONL file, so
//! reports can be produced without live models.
//!
//! Each line is `{asset_sha256, capability, vector_b64, dim}`. Text
//! embeddings are keyed by the SHA-256 of the prompt. Segmentation uses the
//! capabilities `segment_fg`, `segment_bg` and `segment_coverage` (dim 1);
//! repeated `face_embed` lines are separate faces; `shot_classify` vectors
//! hold one score per label in vocabulary order; `aesthetics` is `[iqs, ias]`.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asset::sha256_hex;
use crate::backend::{BackendError, BackendResult, Capability, ModelBackend};
use crate::protocol::*;
use crate::tensor::{b64_decode, b64_encode, f32_from_le_bytes, f32_to_le_bytes};

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureLine {
    pub asset_sha256: String,
    pub capability: String,
    pub vector_b64: String,
    pub dim: usize,
}

impl FixtureLine {
    pub fn new(asset_sha256: impl Into<String>, capability: &str, vector: &[f32]) -> Self {
        Self {
            asset_sha256: asset_sha256.into(),
            capability: capability.into(),
            vector_b64: b64_encode(&f32_to_le_bytes(vector)),
            dim: vector.len(),
        }
    }
}

#[derive(Default)]
pub struct FixtureBackend {
    vectors: HashMap<(String, String), Vec<Vec<f32>>>,
    calls: Mutex<HashMap<Capability, u64>>,
}

impl FixtureBackend {
    pub fn from_lines(lines: impl IntoIterator<Item = FixtureLine>) -> Result<Self, FixtureError> {
        let mut me = Self::default();
        for (i, l) in lines.into_iter().enumerate() {
            let raw = b64_decode(&l.vector_b64).map_err(|e| FixtureError::Line {
                line: i + 1,
                message: e.to_string(),
            })?;
            let v = f32_from_le_bytes(&raw);
            if v.len() != l.dim {
                return Err(FixtureError::Line {
                    line: i + 1,
                    message: format!("dim {} but {} values", l.dim, v.len()),
                });
            }
            me.vectors.entry((l.asset_sha256, l.capability)).or_default().push(v);
        }
        Ok(me)
    }

    pub fn load(path: &Path) -> Result<Self, FixtureError> {
        let text = std::fs::read_to_string(path)?;
        let lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str::<FixtureLine>(l).map_err(|e| FixtureError::Line {
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_lines(lines)
    }

    pub fn count(&self, cap: Capability) -> u64 {
        self.calls.lock().get(&cap).copied().unwrap_or(0)
    }

    fn lookup(&self, cap: Capability, sha: &str, name: &str) -> BackendResult<&Vec<Vec<f32>>> {
        *self.calls.lock().entry(cap).or_default() += 1;
        self.vectors
            .get(&(sha.to_string(), name.to_string()))
            .ok_or_else(|| BackendError::Remote {
                status: 404,
                message: format!("no fixture {name} for {}", &sha[..sha.len().min(12)]),
                retryable: false,
            })
    }

    fn image_sha(b64: &str) -> BackendResult<String> {
        b64_decode(b64)
            .map(|b| sha256_hex(&b))
            .map_err(|e| BackendError::Protocol(e.to_string()))
    }

    fn first(&self, cap: Capability, sha: &str, name: &str) -> BackendResult<Vec<f32>> {
        Ok(self.lookup(cap, sha, name)?[0].clone())
    }
}

impl ModelBackend for FixtureBackend {
    fn name(&self) -> String {
        "fixture".into()
    }

    fn capabilities(&self) -> BTreeSet<Capability> {
        [
            Capability::EmbedImage,
            Capability::EmbedText,
            Capability::Segment,
            Capability::FaceEmbed,
            Capability::ShotClassify,
            Capability::Aesthetics,
        ]
        .into_iter()
        .collect()
    }

    fn embed_image(&self, req: &EmbedImageRequest) -> BackendResult<EmbeddingResponse> {
        let sha = Self::image_sha(&req.image_b64)?;
        Ok(EmbeddingResponse {
            protocol_version: PROTOCOL_VERSION,
            vector: self.first(Capability::EmbedImage, &sha, "embed_image")?,
        })
    }

    fn embed_text(&self, req: &EmbedTextRequest) -> BackendResult<EmbeddingResponse> {
        let sha = sha256_hex(req.text.as_bytes());
        Ok(EmbeddingResponse {
            protocol_version: PROTOCOL_VERSION,
            vector: self.first(Capability::EmbedText, &sha, "embed_text")?,
        })
    }

    fn segment(&self, req: &ImageRequest) -> BackendResult<SegmentResponse> {
        let sha = Self::image_sha(&req.image_b64)?;
        let fg = self.first(Capability::Segment, &sha, "segment_fg")?;
        let bg = self
            .vectors
            .get(&(sha.clone(), "segment_bg".into()))
            .map(|v| v[0].clone())
            .ok_or_else(|| BackendError::Remote {
                status: 404,
                message: "no fixture segment_bg".into(),
                retryable: false,
            })?;
        let coverage = self
            .vectors
            .get(&(sha, "segment_coverage".into()))
            .and_then(|v| v[0].first().copied())
            .unwrap_or(0.0) as f64;
        Ok(SegmentResponse {
            protocol_version: PROTOCOL_VERSION,
            fg,
            bg,
            mask_coverage: coverage,
        })
    }

    fn face_embed(&self, req: &ImageRequest) -> BackendResult<FaceEmbedResponse> {
        let sha = Self::image_sha(&req.image_b64)?;
        *self.calls.lock().entry(Capability::FaceEmbed).or_default() += 1;
        // No line means no detected face, not an error.
        let faces = self
            .vectors
            .get(&(sha, "face_embed".into()))
            .cloned()
            .unwrap_or_default();
        Ok(FaceEmbedResponse {
            protocol_version: PROTOCOL_VERSION,
            faces,
        })
    }

    fn shot_classify(&self, req: &ShotClassifyRequest) -> BackendResult<ShotClassifyResponse> {
        let sha = Self::image_sha(&req.image_b64)?;
        let scores = self.first(Capability::ShotClassify, &sha, "shot_classify")?;
        if scores.len() != req.labels.len() {
            return Err(BackendError::Protocol(format!(
                "{} scores for {} labels",
                scores.len(),
                req.labels.len()
            )));
        }
        let best = scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        Ok(ShotClassifyResponse {
            protocol_version: PROTOCOL_VERSION,
            label: req.labels.get(best).cloned().unwrap_or_default(),
            scores,
        })
    }

    fn aesthetics(&self, req: &ImageRequest) -> BackendResult<AestheticsResponse> {
        let sha = Self::image_sha(&req.image_b64)?;
        let v = self.first(Capability::Aesthetics, &sha, "aesthetics")?;
        if v.len() != 2 {
            return Err(BackendError::Protocol("aesthetics fixture needs [iqs, ias]".into()));
        }
        Ok(AestheticsResponse {
            protocol_version: PROTOCOL_VERSION,
            iqs: v[0] as f64,
            ias: v[1] as f64,
        })
    }
}
