//! Keyframe-anchored clip expansion and concatenation.
//!
//! Every clip is conditioned on its own keyframe and prompt only, never on
//! another clip's output, so clips are generated in parallel.

use std::path::{Path, PathBuf};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::asset::{write_atomic, AssetError, AssetRef, AssetStore};
use crate::backend::{call_id, BackendError, BackendHandle, Capability, RetryPolicy};
use crate::protocol::{Ti2vRequest, PROTOCOL_VERSION};
use crate::story::StoryProject;
use crate::tensor::{b64_decode, b64_encode};

pub const CONCAT_FILE: &str = "concat.ffconcat";
pub const MANIFEST_FILE: &str = "video_manifest.json";

#[derive(Debug, Error)]
pub enum VideoError {
    #[error("NO_KEYFRAMES")]
    NoKeyframes,
    #[error("scripts without keyframes: {0:?}")]
    MissingKeyframes(Vec<u32>),
    #[error("duration_frames and fps must be at least 1")]
    InvalidParams,
    #[error("HETEROGENEOUS_CLIPS: {0}")]
    HeterogeneousClips(String),
    #[error("no clip succeeded")]
    NoClips,
    #[error(transparent)]
    Asset(#[from] AssetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipParams {
    pub duration_frames: u32,
    pub fps: u32,
    pub seed: u64,
    /// Bound on clips in flight.
    pub parallelism: usize,
    /// Retries per clip after the first attempt.
    pub retries: u32,
    #[serde(with = "millis")]
    pub retry_delay: Duration,
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

impl Default for ClipParams {
    fn default() -> Self {
        Self {
            duration_frames: 81,
            fps: 16,
            seed: 0,
            parallelism: 4,
            retries: 3,
            retry_delay: Duration::from_millis(200),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipJob {
    pub index: u32,
    pub keyframe: AssetRef,
    pub prompt: String,
    pub duration_frames: u32,
    pub fps: u32,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipSource {
    Asset(AssetRef),
    Url(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub index: u32,
    pub keyframe: AssetRef,
    pub source: Option<ClipSource>,
    pub frames: u32,
    pub fps: u32,
    pub width: Option<u32>,
    pub height: Option<u32>,
    pub retries: u32,
    pub call_id: String,
    pub error: Option<String>,
}

impl ClipRecord {
    pub fn duration_s(&self) -> f64 {
        self.frames as f64 / self.fps as f64
    }
}

fn clip_seed(seed: u64, index: u32) -> u64 {
    let h = Sha256::new()
        .chain_update(b"clip")
        .chain_update(seed.to_le_bytes())
        .chain_update(index.to_le_bytes())
        .finalize();
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

/// One job per current keyframe, in script order.
pub fn clip_jobs(project: &StoryProject, params: &ClipParams) -> Result<Vec<ClipJob>, VideoError> {
    if params.duration_frames == 0 || params.fps == 0 {
        return Err(VideoError::InvalidParams);
    }
    if project.current_keyframes().is_empty() {
        return Err(VideoError::NoKeyframes);
    }
    let missing: Vec<u32> = project
        .scripts
        .iter()
        .filter(|s| project.current_keyframe(s.index).is_none())
        .map(|s| s.index)
        .collect();
    if !missing.is_empty() {
        return Err(VideoError::MissingKeyframes(missing));
    }
    Ok(project
        .scripts
        .iter()
        .map(|s| ClipJob {
            index: s.index,
            keyframe: project.current_keyframe(s.index).expect("checked").asset.clone(),
            prompt: s.prompt.clone(),
            duration_frames: params.duration_frames,
            fps: params.fps,
            seed: clip_seed(params.seed, s.index),
        })
        .collect())
}

fn run_job(job: &ClipJob, ti2v: &BackendHandle, params: &ClipParams, assets: &AssetStore) -> ClipRecord {
    let mut record = ClipRecord {
        index: job.index,
        keyframe: job.keyframe.clone(),
        source: None,
        frames: job.duration_frames,
        fps: job.fps,
        width: None,
        height: None,
        retries: 0,
        call_id: String::new(),
        error: None,
    };
    let image = match assets.get(&job.keyframe) {
        Ok(b) => b,
        Err(e) => {
            record.error = Some(e.to_string());
            return record;
        }
    };
    let req = Ti2vRequest {
        protocol_version: PROTOCOL_VERSION,
        image_b64: b64_encode(&image),
        prompt: job.prompt.clone(),
        frames: job.duration_frames,
        fps: job.fps,
        seed: job.seed,
    };
    record.call_id = call_id(Capability::Ti2v, &req);
    // Retries are counted here, so the handle must not retry on its own.
    let handle = ti2v.clone().with_retry(RetryPolicy::none());
    loop {
        match handle.call(Capability::Ti2v, |b| b.ti2v_generate(&req)) {
            Ok(resp) => {
                record.width = resp.width;
                record.height = resp.height;
                let source = match (resp.video_b64, resp.asset_url) {
                    (Some(v), _) => b64_decode(&v)
                        .map_err(|e| e.to_string())
                        .and_then(|bytes| assets.put_with_ext(&bytes, "mp4").map_err(|e| e.to_string()))
                        .map(ClipSource::Asset),
                    (None, Some(url)) => Ok(ClipSource::Url(url)),
                    (None, None) => Err("ti2v response carries neither video_b64 nor asset_url".into()),
                };
                match source {
                    Ok(s) => record.source = Some(s),
                    Err(e) => record.error = Some(e),
                }
                return record;
            }
            Err(e) if record.retries < params.retries && !matches!(e, BackendError::MissingCapability { .. }) => {
                tracing::warn!(clip = job.index, attempt = record.retries, error = %e, "retrying clip");
                let delay = params.retry_delay * 2u32.saturating_pow(record.retries);
                if !delay.is_zero() {
                    std::thread::sleep(delay);
                }
                record.retries += 1;
            }
            Err(e) => {
                record.error = Some(format!("{}: {e}", record.call_id));
                return record;
            }
        }
    }
}

/// Generates one clip per keyframe. Failed clips are recorded, not fatal.
pub fn expand(
    project: &StoryProject,
    ti2v: &BackendHandle,
    params: &ClipParams,
    assets: &AssetStore,
) -> Result<Vec<ClipRecord>, VideoError> {
    let jobs = clip_jobs(project, params)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(params.parallelism.max(1))
        .build()
        .expect("thread pool");
    let mut clips: Vec<ClipRecord> = pool.install(|| jobs.par_iter().map(|j| run_job(j, ti2v, params, assets)).collect());
    clips.sort_by_key(|c| c.index);
    Ok(clips)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestClip {
    pub index: u32,
    pub source: ClipSource,
    pub frames: u32,
    pub duration_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoManifest {
    pub clips: Vec<ManifestClip>,
    /// Script indices whose clip failed.
    pub gaps: Vec<u32>,
    pub fps: u32,
    pub width: Option<u32>,
    pub height: Option<u32>,
    pub total_duration_s: f64,
    /// SHA-256 over the concat file and the ordered clip hashes.
    pub checksum: String,
    pub concat_file: String,
    pub mux_command: Vec<String>,
    pub passthrough: bool,
}

fn quote(path: &str) -> String {
    format!("'{}'", path.replace('\'', r"'\''"))
}

/// Writes the ffconcat list and the manifest into `out_dir`. Muxing itself
/// is left to the recorded ffmpeg command.
pub fn concat(clips: &[ClipRecord], assets: &AssetStore, out_dir: &Path) -> Result<VideoManifest, VideoError> {
    let mut ok: Vec<&ClipRecord> = clips.iter().filter(|c| c.source.is_some()).collect();
    ok.sort_by_key(|c| c.index);
    let gaps: Vec<u32> = clips.iter().filter(|c| c.source.is_none()).map(|c| c.index).collect();
    let first = *ok.first().ok_or(VideoError::NoClips)?;
    for c in &ok {
        if c.fps != first.fps {
            return Err(VideoError::HeterogeneousClips(format!(
                "clip {} at {} fps, clip {} at {} fps",
                first.index, first.fps, c.index, c.fps
            )));
        }
        if (c.width, c.height) != (first.width, first.height) {
            return Err(VideoError::HeterogeneousClips(format!(
                "clip {} is {:?}x{:?}, clip {} is {:?}x{:?}",
                first.index, first.width, first.height, c.index, c.width, c.height
            )));
        }
    }

    let locate = |s: &ClipSource| -> String {
        match s {
            ClipSource::Asset(a) => assets.path_of(a).to_string_lossy().into_owned(),
            ClipSource::Url(u) => u.clone(),
        }
    };
    let mut text = String::from("ffconcat version 1.0\n");
    let mut h = Sha256::new();
    let mut manifest_clips = Vec::new();
    for c in &ok {
        let source = c.source.clone().expect("filtered");
        text.push_str(&format!("file {}\n", quote(&locate(&source))));
        text.push_str(&format!("duration {}\n", c.duration_s()));
        h.update(match &source {
            ClipSource::Asset(a) => a.sha256.as_bytes().to_vec(),
            ClipSource::Url(u) => u.as_bytes().to_vec(),
        });
        manifest_clips.push(ManifestClip {
            index: c.index,
            source,
            frames: c.frames,
            duration_s: c.duration_s(),
        });
    }
    h.update(text.as_bytes());

    std::fs::create_dir_all(out_dir)?;
    let concat_path: PathBuf = out_dir.join(CONCAT_FILE);
    write_atomic(&concat_path, text.as_bytes())?;
    let output = out_dir.join("story.mp4").to_string_lossy().into_owned();
    let passthrough = ok.len() == 1;
    let mux_command: Vec<String> = if passthrough {
        ["ffmpeg", "-y", "-i", &locate(&manifest_clips[0].source), "-c", "copy", &output]
            .iter()
            .map(|s| s.to_string())
            .collect()
    } else {
        [
            "ffmpeg",
            "-y",
            "-f",
            "concat",
            "-safe",
            "0",
            "-i",
            &concat_path.to_string_lossy(),
            "-c",
            "copy",
            &output,
        ]
        .iter()
        .map(|s| s.to_string())
        .collect()
    };
    let manifest = VideoManifest {
        total_duration_s: manifest_clips.iter().map(|c| c.duration_s).sum(),
        clips: manifest_clips,
        gaps,
        fps: first.fps,
        width: first.width,
        height: first.height,
        checksum: hex::encode(h.finalize()),
        concat_file: concat_path.to_string_lossy().into_owned(),
        mux_command,
        passthrough,
    };
    let mut json = serde_json::to_vec_pretty(&manifest).map_err(std::io::Error::other)?;
    json.push(b'\n');
    write_atomic(&out_dir.join(MANIFEST_FILE), &json)?;
    Ok(manifest)
}
