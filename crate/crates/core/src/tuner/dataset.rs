//! Movie-clip mining of (reference, target) frame pairs for shot tuning.
//!
//! Per clip: extract frames, track characters, pair frames of the same
//! track whose gap exceeds `tau`, keep pairs whose identity embeddings are
//! at least `theta_id` similar, label the target frame's shot type and
//! caption it.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use parking_lot::Mutex;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asset::{write_atomic, AssetError, AssetRef, AssetStore};
use crate::backend::{call_id, BackendError, Backends, Capability};
use crate::eval::cosine_raw;
use crate::protocol::*;
use crate::story::{ShotType, ShotVocabulary};
use crate::tensor::b64_encode;

pub const DEFAULT_TAU: u32 = 48;
pub const DEFAULT_THETA_ID: f64 = 0.85;
pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const PROVENANCE_FILE: &str = "provenance.jsonl";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("clips directory {0} is unreadable: {1}")]
    ClipsDir(PathBuf, std::io::Error),
    #[error("backend capability missing: {0}")]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Asset(#[from] AssetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One training example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotPair {
    /// Identity anchor.
    pub reference_frame: AssetRef,
    pub target_frame: AssetRef,
    pub shot_label: ShotType,
    pub caption: String,
    pub source_clip_id: String,
    pub track_id: u32,
    pub reference_index: u32,
    pub target_index: u32,
    pub temporal_gap: u32,
    pub identity_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Rejection {
    /// No two observations of the track are more than `tau` frames apart.
    GapTooLarge { clip: String, track: u32, max_gap: u32 },
    LowIdentitySimilarity { clip: String, track: u32, reference_index: u32, target_index: u32, score: f64 },
    UnknownShotLabel { clip: String, track: u32, target_index: u32, label: String },
    NoTracks { clip: String },
    ClipFailed { clip: String, error: String },
}

#[derive(Clone, Debug)]
pub struct DatasetParams {
    /// Minimum temporal gap; pairs need `gap > tau`.
    pub tau: u32,
    /// Minimum identity cosine similarity.
    pub theta_id: f64,
    /// Caps candidate pairs per track by seeded sampling; `None` keeps all.
    pub max_pairs_per_track: Option<usize>,
    pub seed: u64,
    pub vocabulary: ShotVocabulary,
    /// Bound on clips processed concurrently.
    pub parallelism: usize,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            theta_id: DEFAULT_THETA_ID,
            max_pairs_per_track: None,
            seed: 0,
            vocabulary: ShotVocabulary::default(),
            parallelism: 4,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct DatasetBuild {
    pub pairs: Vec<ShotPair>,
    pub rejections: Vec<Rejection>,
    pub clips: Vec<String>,
    /// Per-step provenance records, also written to `provenance.jsonl`.
    pub provenance: Vec<serde_json::Value>,
}

/// A clip: either a directory of extracted frames or a video file.
#[derive(Clone, Debug)]
enum ClipSource {
    Frames(PathBuf),
    Video(PathBuf),
}

fn list_clips(dir: &Path) -> Result<Vec<(String, ClipSource)>, DatasetError> {
    let mut clips = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| DatasetError::ClipsDir(dir.to_path_buf(), e))?;
    for entry in entries {
        let path = entry?.path();
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        if path.join("frames").is_dir() {
            clips.push((name, ClipSource::Frames(path.join("frames"))));
        } else if matches!(
            path.extension().and_then(|e| e.to_str()),
            Some("mp4" | "mkv" | "mov" | "webm" | "avi")
        ) {
            clips.push((name, ClipSource::Video(path)));
        }
    }
    clips.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(clips)
}

fn read_frames(dir: &Path) -> std::io::Result<Vec<Vec<u8>>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths.iter().map(fs::read).collect()
}

/// Frame extraction for video files is delegated to ffmpeg.
pub fn ffmpeg_extract_command(video: &Path, out_dir: &Path) -> Command {
    let mut cmd = Command::new("ffmpeg");
    cmd.arg("-hide_banner")
        .arg("-loglevel")
        .arg("error")
        .arg("-i")
        .arg(video)
        .arg(out_dir.join("%06d.png"));
    cmd
}

fn extract_frames(source: &ClipSource) -> Result<Vec<Vec<u8>>, String> {
    match source {
        ClipSource::Frames(dir) => read_frames(dir).map_err(|e| e.to_string()),
        ClipSource::Video(path) => {
            let tmp = std::env::temp_dir().join(format!(
                "vstory-frames-{}-{}",
                std::process::id(),
                crate::asset::sha256_hex(path.to_string_lossy().as_bytes())
            ));
            fs::create_dir_all(&tmp).map_err(|e| e.to_string())?;
            let status = ffmpeg_extract_command(path, &tmp)
                .status()
                .map_err(|e| format!("cannot run ffmpeg: {e}"))?;
            let frames = if status.success() {
                read_frames(&tmp).map_err(|e| e.to_string())
            } else {
                Err(format!("ffmpeg exited with {status}"))
            };
            let _ = fs::remove_dir_all(&tmp);
            frames
        }
    }
}

struct ClipResult {
    pairs: Vec<ShotPair>,
    rejections: Vec<Rejection>,
    provenance: Vec<serde_json::Value>,
}

fn process_clip(
    clip: &str,
    frames: &[Vec<u8>],
    backends: &Backends,
    params: &DatasetParams,
    store: &AssetStore,
) -> Result<ClipResult, String> {
    let mut out = ClipResult {
        pairs: Vec::new(),
        rejections: Vec::new(),
        provenance: Vec::new(),
    };
    let frames_b64: Vec<String> = frames.iter().map(|f| b64_encode(f)).collect();

    let track_req = TrackRequest {
        protocol_version: PROTOCOL_VERSION,
        frames_b64: frames_b64.clone(),
    };
    let tracks = backends
        .get(Capability::Track)
        .and_then(|h| h.call(Capability::Track, |b| b.track(&track_req)))
        .map_err(|e| e.to_string())?
        .tracks;
    out.provenance.push(serde_json::json!({
        "kind": "step", "step": "track", "clip": clip,
        "call_id": call_id(Capability::Track, &track_req),
        "frames": frames.len(), "tracks": tracks.len(),
    }));
    if tracks.is_empty() {
        out.rejections.push(Rejection::NoTracks { clip: clip.to_string() });
        return Ok(out);
    }

    let embedder = backends.get(Capability::EmbedImage).map_err(|e| e.to_string())?;
    let mut embeddings: HashMap<(u32, BBox), Vec<f32>> = HashMap::new();
    let mut embed = |frame: u32, bbox: BBox| -> Result<Vec<f32>, String> {
        if let Some(v) = embeddings.get(&(frame, bbox)) {
            return Ok(v.clone());
        }
        let req = EmbedImageRequest {
            protocol_version: PROTOCOL_VERSION,
            image_b64: frames_b64[frame as usize].clone(),
            bbox: Some(bbox),
        };
        let v = embedder
            .call(Capability::EmbedImage, |b| b.embed_image(&req))
            .map_err(|e| e.to_string())?
            .vector;
        embeddings.insert((frame, bbox), v.clone());
        Ok(v)
    };
    let mut labels: HashMap<u32, String> = HashMap::new();
    let mut captions: HashMap<u32, String> = HashMap::new();
    let vocab_labels: Vec<String> = params.vocabulary.iter().map(|s| s.to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ crate::asset::sha256(clip.as_bytes())[0] as u64);

    for track in &tracks {
        let mut obs = track.observations.clone();
        obs.sort_by_key(|o| o.frame);
        obs.dedup_by_key(|o| o.frame);
        let mut candidates = Vec::new();
        for (i, a) in obs.iter().enumerate() {
            for b in &obs[i + 1..] {
                if b.frame - a.frame > params.tau {
                    candidates.push((*a, *b));
                }
            }
        }
        if candidates.is_empty() {
            let max_gap = match (obs.first(), obs.last()) {
                (Some(a), Some(b)) => b.frame - a.frame,
                _ => 0,
            };
            out.rejections.push(Rejection::GapTooLarge {
                clip: clip.to_string(),
                track: track.id,
                max_gap,
            });
            continue;
        }
        if let Some(cap) = params.max_pairs_per_track {
            if candidates.len() > cap {
                let mut keep: Vec<usize> = sample(&mut rng, candidates.len(), cap).into_vec();
                keep.sort_unstable();
                candidates = keep.into_iter().map(|i| candidates[i]).collect();
            }
        }

        for (a, b) in candidates {
            let score = cosine_raw(&embed(a.frame, a.bbox)?, &embed(b.frame, b.bbox)?).unwrap_or(0.0);
            if score < params.theta_id {
                out.rejections.push(Rejection::LowIdentitySimilarity {
                    clip: clip.to_string(),
                    track: track.id,
                    reference_index: a.frame,
                    target_index: b.frame,
                    score,
                });
                continue;
            }
            let target_b64 = &frames_b64[b.frame as usize];
            if !labels.contains_key(&b.frame) {
                let req = ShotClassifyRequest {
                    protocol_version: PROTOCOL_VERSION,
                    image_b64: target_b64.clone(),
                    labels: vocab_labels.clone(),
                };
                let resp = backends
                    .get(Capability::ShotClassify)
                    .and_then(|h| h.call(Capability::ShotClassify, |be| be.shot_classify(&req)))
                    .map_err(|e| e.to_string())?;
                labels.insert(b.frame, resp.label);
            }
            let label = &labels[&b.frame];
            let Ok(shot) = params.vocabulary.parse(label) else {
                out.rejections.push(Rejection::UnknownShotLabel {
                    clip: clip.to_string(),
                    track: track.id,
                    target_index: b.frame,
                    label: label.clone(),
                });
                continue;
            };
            if !captions.contains_key(&b.frame) {
                let req = ImageRequest {
                    protocol_version: PROTOCOL_VERSION,
                    image_b64: target_b64.clone(),
                };
                let resp = backends
                    .get(Capability::Caption)
                    .and_then(|h| h.call(Capability::Caption, |be| be.caption(&req)))
                    .map_err(|e| e.to_string())?;
                captions.insert(b.frame, resp.text);
            }
            let reference_frame = store.put(&frames[a.frame as usize]).map_err(|e| e.to_string())?;
            let target_frame = store.put(&frames[b.frame as usize]).map_err(|e| e.to_string())?;
            out.pairs.push(ShotPair {
                reference_frame,
                target_frame,
                shot_label: shot,
                caption: captions[&b.frame].clone(),
                source_clip_id: clip.to_string(),
                track_id: track.id,
                reference_index: a.frame,
                target_index: b.frame,
                temporal_gap: b.frame - a.frame,
                identity_score: score,
            });
        }
    }
    out.provenance.push(serde_json::json!({
        "kind": "step", "step": "pair_verify_label_caption", "clip": clip,
        "embed_calls": embeddings.len(), "classified": labels.len(), "captioned": captions.len(),
        "accepted": out.pairs.len(), "rejected": out.rejections.len(),
    }));
    Ok(out)
}

/// Mines pairs from every clip under `clips_dir`, writing frame assets and
/// the JSONL manifests into `out_dir`.
pub fn build_shot_dataset(
    clips_dir: &Path,
    out_dir: &Path,
    params: &DatasetParams,
    backends: &Backends,
) -> Result<DatasetBuild, DatasetError> {
    for cap in [
        Capability::Track,
        Capability::EmbedImage,
        Capability::ShotClassify,
        Capability::Caption,
    ] {
        backends.get(cap)?;
    }
    let clips = list_clips(clips_dir)?;
    let store = AssetStore::open(out_dir.join("assets"))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(params.parallelism.max(1))
        .build()
        .expect("thread pool");
    let results = Mutex::new(Vec::new());
    pool.install(|| {
        clips.par_iter().enumerate().for_each(|(i, (clip, source))| {
            let result = extract_frames(source)
                .and_then(|frames| process_clip(clip, &frames, backends, params, &store));
            if let Err(e) = &result {
                tracing::warn!(clip = %clip, error = %e, "clip skipped");
            }
            results.lock().push((i, clip.clone(), result));
        })
    });
    let mut results = results.into_inner();
    results.sort_by_key(|(i, _, _)| *i);

    let mut build = DatasetBuild {
        clips: clips.iter().map(|(c, _)| c.clone()).collect(),
        ..Default::default()
    };
    build.provenance.push(serde_json::json!({
        "kind": "header", "tau": params.tau, "theta_id": params.theta_id,
        "max_pairs_per_track": params.max_pairs_per_track, "seed": params.seed,
        "vocabulary": params.vocabulary, "clips": build.clips,
    }));
    for (_, clip, result) in results {
        match result {
            Ok(r) => {
                build.pairs.extend(r.pairs);
                build.rejections.extend(r.rejections);
                build.provenance.extend(r.provenance);
            }
            Err(error) => build.rejections.push(Rejection::ClipFailed { clip, error }),
        }
    }
    if build.pairs.is_empty() {
        tracing::warn!("shot dataset is empty");
    }
    for r in &build.rejections {
        build.provenance.push(serde_json::json!({"kind": "rejection", "detail": r}));
    }
    build.provenance.push(serde_json::json!({
        "kind": "summary", "pairs": build.pairs.len(), "rejections": build.rejections.len(),
        "empty": build.pairs.is_empty(),
    }));

    write_jsonl(&out_dir.join(PAIRS_FILE), &build.pairs)?;
    write_jsonl(&out_dir.join(PROVENANCE_FILE), &build.provenance)?;
    Ok(build)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> std::io::Result<()> {
    let mut buf = Vec::new();
    for row in rows {
        buf.extend(serde_json::to_vec(row).map_err(std::io::Error::other)?);
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

/// Reads a `pairs.jsonl` manifest.
pub fn load_pairs(path: &Path) -> Result<Vec<ShotPair>, DatasetError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| DatasetError::Io(std::io::Error::other(e))))
        .collect()
}
