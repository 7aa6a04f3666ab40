//! Keyframe generation: prompt consolidation, shot-aware prefixing,
//! condition assembly and the autoregressive per-frame loop.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::asset::{AssetError, AssetRef, AssetStore};
use crate::backend::{call_id, BackendError, BackendHandle, Backends, Capability};
use crate::memory::{scale_reference, MemoryBank, MemoryError, RetrievalSet};
use crate::project_io::{ProjectDir, ProjectIoError};
use crate::protocol::*;
use crate::story::{
    validate_project, ConditionSource, KeyframeRecord, Lineage, ManifestItem, ShotType, StoryProject, ValidationReport,
};
use crate::tensor::{b64_decode, b64_encode, Matrix};
use crate::tuner::prefix::{PrefixError, ShotPrefixTable};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("EMPTY_PROMPT_SET")]
    EmptyPromptSet,
    #[error("WIDTH_MISMATCH: backend returned width {got}, expected {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("UNKNOWN_SHOT: {0}")]
    UnknownShot(String),
    #[error("DIM_MISMATCH: {0}")]
    DimMismatch(String),
    #[error("EMPTY_CONDITION")]
    EmptyCondition,
    #[error("BACKEND_ERROR in {call_id}: {source}")]
    Backend {
        call_id: String,
        #[source]
        source: BackendError,
    },
    #[error("DECODE_TIMEOUT in {call_id}")]
    DecodeTimeout { call_id: String },
    #[error("malformed backend payload in {call_id}: {message}")]
    Payload { call_id: String, message: String },
    #[error("project is invalid: {0:?}")]
    Invalid(ValidationReport),
    #[error("cancelled after {completed} frames")]
    Cancelled { completed: usize },
    #[error("frame {index} failed after {completed} completed frames: {source}")]
    Frame {
        index: u32,
        completed: usize,
        #[source]
        source: Box<EngineError>,
    },
    #[error("REPLAY_MISMATCH for frame {0}")]
    ReplayMismatch(u32),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Asset(#[from] AssetError),
    #[error(transparent)]
    Project(#[from] ProjectIoError),
}

impl EngineError {
    fn backend(call_id: String, source: BackendError) -> Self {
        EngineError::Backend { call_id, source }
    }

    /// True when retrying the same request later may succeed.
    pub fn is_retryable(&self) -> bool {
        match self {
            EngineError::Backend { source, .. } => source.is_retryable(),
            EngineError::DecodeTimeout { .. } => true,
            EngineError::Frame { source, .. } => source.is_retryable(),
            _ => false,
        }
    }
}

/// Encoder output for one prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState {
    /// L x d.
    pub tokens: Matrix,
    pub prompt_index: usize,
}

/// `[E_shot(k); h]`, (N + L) x d.
#[derive(Clone, Debug, PartialEq)]
pub struct ShotAwareState {
    pub tokens: Matrix,
    pub shot: ShotType,
}

impl ShotAwareState {
    pub fn digest(&self) -> String {
        self.tokens.digest()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    pub latent_id: String,
    pub digest: String,
    pub manifest: Vec<ManifestItem>,
    pub call_id: String,
}

/// Jointly encodes every prompt of a story in one backend call.
pub fn consolidate_prompts(
    prompts: &[String],
    encoder: &BackendHandle,
    d: usize,
    seed: u64,
) -> Result<(Vec<HiddenState>, String), EngineError> {
    if prompts.is_empty() {
        return Err(EngineError::EmptyPromptSet);
    }
    let req = TextEncodeRequest {
        protocol_version: PROTOCOL_VERSION,
        prompt_group: prompts.to_vec(),
        seed,
    };
    let id = call_id(Capability::TextEncode, &req);
    let resp = encoder
        .call(Capability::TextEncode, |b| b.text_encode(&req))
        .map_err(|e| EngineError::backend(id.clone(), e))?;
    if resp.states.len() != prompts.len() {
        return Err(EngineError::Payload {
            call_id: id,
            message: format!("{} states for {} prompts", resp.states.len(), prompts.len()),
        });
    }
    let states = resp
        .states
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            if s.d != d {
                return Err(EngineError::WidthMismatch { expected: d, got: s.d });
            }
            let tokens = Matrix::from_b64(s.l, s.d, &s.tokens_b64).map_err(|e| EngineError::Payload {
                call_id: id.clone(),
                message: e.to_string(),
            })?;
            if !tokens.is_finite() {
                return Err(EngineError::Payload {
                    call_id: id.clone(),
                    message: "non-finite hidden state".into(),
                });
            }
            Ok(HiddenState { tokens, prompt_index: i })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((states, id))
}

/// Prepends the shot's prefix rows to `h`.
pub fn build_shot_aware(h: &HiddenState, k: &ShotType, table: &ShotPrefixTable) -> Result<ShotAwareState, EngineError> {
    let prefix = table.get(k).map_err(|e| match e {
        PrefixError::UnknownShot(s) => EngineError::UnknownShot(s.to_string()),
        other => EngineError::DimMismatch(other.to_string()),
    })?;
    if h.tokens.cols() != prefix.cols() {
        return Err(EngineError::DimMismatch(format!(
            "hidden width {} vs prefix width {}",
            h.tokens.cols(),
            prefix.cols()
        )));
    }
    let tokens = Matrix::vstack(prefix, &h.tokens).expect("widths checked");
    Ok(ShotAwareState { tokens, shot: k.clone() })
}

/// Encodes the static references unscaled, then the recent frames scaled by
/// `alpha`, in that order.
pub fn assemble_condition(
    rs: &RetrievalSet,
    alpha: f64,
    vae: &BackendHandle,
    assets: &AssetStore,
) -> Result<Condition, EngineError> {
    if rs.is_empty() {
        return Err(EngineError::EmptyCondition);
    }
    let mut manifest = Vec::new();
    let mut images = Vec::new();
    for s in &rs.statics {
        images.push(VaeImage {
            data_b64: b64_encode(&assets.get(&s.asset)?),
            scale: 1.0,
        });
        manifest.push(ManifestItem {
            source: ConditionSource::Static {
                key: s.key.clone(),
                kind: s.kind,
            },
            asset: s.asset.clone(),
            scale: 1.0,
        });
    }
    for r in &rs.recents {
        let scaled = scale_reference(&assets.get(&r.asset)?, alpha)?;
        images.push(VaeImage {
            data_b64: b64_encode(&scaled),
            scale: alpha,
        });
        manifest.push(ManifestItem {
            source: ConditionSource::Frame { index: r.index },
            asset: r.asset.clone(),
            scale: alpha,
        });
    }
    let req = VaeEncodeRequest {
        protocol_version: PROTOCOL_VERSION,
        images,
    };
    let id = call_id(Capability::VaeEncode, &req);
    let resp = vae
        .call(Capability::VaeEncode, |b| b.vae_encode(&req))
        .map_err(|e| EngineError::backend(id.clone(), e))?;
    Ok(Condition {
        latent_id: resp.latent_id,
        digest: resp.digest,
        manifest,
        call_id: id,
    })
}

/// Decodes one keyframe. Returns the image bytes and the call ID.
pub fn generate_keyframe(
    h: &ShotAwareState,
    z: &Condition,
    decoder: &BackendHandle,
    seed: u64,
    decoder_params: &BTreeMap<String, serde_json::Value>,
) -> Result<(Vec<u8>, String), EngineError> {
    let req = DitDecodeRequest {
        protocol_version: PROTOCOL_VERSION,
        state_b64: h.tokens.to_b64(),
        rows: h.tokens.rows(),
        d: h.tokens.cols(),
        latent_id: z.latent_id.clone(),
        seed,
        decoder_params: decoder_params.clone(),
    };
    let id = call_id(Capability::DitDecode, &req);
    let resp = decoder
        .call(Capability::DitDecode, |b| b.dit_decode(&req))
        .map_err(|e| match e {
            BackendError::Timeout(_) => EngineError::DecodeTimeout { call_id: id.clone() },
            other => EngineError::backend(id.clone(), other),
        })?;
    let bytes = b64_decode(&resp.image_b64).map_err(|e| EngineError::Payload {
        call_id: id.clone(),
        message: e.to_string(),
    })?;
    Ok((bytes, id))
}

/// Decode seed of frame `index`, generation `generation`.
pub fn decode_seed(config_seed: u64, index: u32, generation: u32) -> u64 {
    let h = Sha256::new()
        .chain_update(b"decode")
        .chain_update(config_seed.to_le_bytes())
        .chain_update(index.to_le_bytes())
        .chain_update(generation.to_le_bytes())
        .finalize();
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

#[derive(Clone, Debug, PartialEq)]
pub enum EngineEvent {
    Started { total: usize, to_generate: usize },
    FrameStarted { index: u32 },
    FrameDone { index: u32, asset: AssetRef, reused: bool, locked: bool },
    Finished { generated: usize },
}

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Saved after every frame when set.
    pub checkpoint: Option<&'a ProjectDir>,
    pub cancel: Option<&'a AtomicBool>,
    pub on_event: Option<&'a mut dyn FnMut(&EngineEvent)>,
    pub decoder_params: BTreeMap<String, serde_json::Value>,
}

impl RunOptions<'_> {
    fn emit(&mut self, ev: EngineEvent) {
        if let Some(f) = self.on_event.as_mut() {
            f(&ev);
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunReport {
    pub generated: Vec<u32>,
    pub reused: Vec<u32>,
}

fn seed_bank(project: &StoryProject) -> Result<MemoryBank, EngineError> {
    let mut bank = MemoryBank::new(project.config.character_match);
    for entry in &project.roster {
        bank.insert_static(entry.clone(), true)?;
    }
    Ok(bank)
}

/// Generates every script without a current keyframe, reusing the rest.
/// Progress is checkpointed after each frame, so a failed or interrupted
/// run resumes where it stopped.
pub fn run_story(
    project: &mut StoryProject,
    backends: &Backends,
    table: &ShotPrefixTable,
    assets: &AssetStore,
    mut opts: RunOptions<'_>,
) -> Result<RunReport, EngineError> {
    let report = validate_project(project);
    if !report.is_ok() {
        return Err(EngineError::Invalid(report));
    }
    let config = project.config.clone();
    if table.dims() != config.shot_prefix_dims {
        return Err(EngineError::DimMismatch(format!(
            "table is {}x{}, project expects {}x{}",
            table.dims().n,
            table.dims().d,
            config.shot_prefix_dims.n,
            config.shot_prefix_dims.d
        )));
    }
    let mut bank = seed_bank(project)?;
    let to_generate = project
        .scripts
        .iter()
        .filter(|s| project.current_keyframe(s.index).is_none())
        .count();
    opts.emit(EngineEvent::Started {
        total: project.scripts.len(),
        to_generate,
    });

    let prompts: Vec<String> = project.scripts.iter().map(|s| s.prompt.clone()).collect();
    let consolidated = if to_generate > 0 {
        Some(consolidate_prompts(
            &prompts,
            backends.get(Capability::TextEncode).map_err(|e| EngineError::backend(String::new(), e))?,
            config.shot_prefix_dims.d,
            config.seed,
        )?)
    } else {
        None
    };
    let handle = |cap| backends.get(cap).map_err(|e| EngineError::backend(String::new(), e));
    let table_digest = table.digest();
    let mut out = RunReport::default();

    for pos in 0..project.scripts.len() {
        let script = project.scripts[pos].clone();
        let t = script.index;
        if let Some(existing) = project.current_keyframe(t) {
            let (asset, locked) = (existing.asset.clone(), existing.locked);
            bank.insert_keyframe(t, asset.clone(), script.characters.clone(), script.background.clone())?;
            out.reused.push(t);
            opts.emit(EngineEvent::FrameDone {
                index: t,
                asset,
                reused: true,
                locked,
            });
            continue;
        }
        if opts.cancel.is_some_and(|c| c.load(Ordering::SeqCst)) {
            return Err(EngineError::Cancelled {
                completed: out.generated.len(),
            });
        }
        opts.emit(EngineEvent::FrameStarted { index: t });
        let (states, encode_id) = consolidated.as_ref().expect("encoded when frames remain");
        let frame = (|| {
            let rs = bank.retrieve(&script.characters, script.background.as_ref(), config.mu, t)?;
            let z = assemble_condition(&rs, config.alpha, handle(Capability::VaeEncode)?, assets)?;
            let h = build_shot_aware(&states[pos], &script.shot, table)?;
            let generation = project.generations(t);
            let seed = decode_seed(config.seed, t, generation);
            let (bytes, decode_id) =
                generate_keyframe(&h, &z, handle(Capability::DitDecode)?, seed, &opts.decoder_params)?;
            let asset = assets.put(&bytes)?;
            Ok::<_, EngineError>(KeyframeRecord {
                script_index: t,
                asset,
                retrieval_manifest: z.manifest.clone(),
                shot: script.shot.clone(),
                locked: false,
                superseded: false,
                lineage: Lineage {
                    generation,
                    decode_seed: seed,
                    encode_seed: config.seed,
                    prompt_group: prompts.clone(),
                    prompt_position: pos,
                    shot_table_digest: table_digest.clone(),
                    state_digest: h.digest(),
                    latent_id: z.latent_id.clone(),
                    call_ids: vec![encode_id.clone(), z.call_id.clone(), decode_id],
                },
            })
        })();
        let record = frame.map_err(|e| EngineError::Frame {
            index: t,
            completed: out.generated.len(),
            source: Box::new(e),
        })?;
        bank.insert_keyframe(t, record.asset.clone(), script.characters.clone(), script.background.clone())?;
        let asset = record.asset.clone();
        project.keyframes.push(record);
        project.version += 1;
        if let Some(dir) = opts.checkpoint {
            dir.save(project)?;
        }
        out.generated.push(t);
        opts.emit(EngineEvent::FrameDone {
            index: t,
            asset,
            reused: false,
            locked: false,
        });
    }
    opts.emit(EngineEvent::Finished {
        generated: out.generated.len(),
    });
    Ok(out)
}

/// Supersedes every unlocked frame from `from` on, then regenerates them.
pub fn regenerate_from(
    project: &mut StoryProject,
    from: u32,
    backends: &Backends,
    table: &ShotPrefixTable,
    assets: &AssetStore,
    opts: RunOptions<'_>,
) -> Result<RunReport, EngineError> {
    project.supersede_from(from);
    project.version += 1;
    if let Some(dir) = opts.checkpoint {
        dir.save(project)?;
    }
    run_story(project, backends, table, assets, opts)
}

/// Re-runs one keyframe from its lineage and returns the decoded bytes.
pub fn replay_keyframe(
    record: &KeyframeRecord,
    backends: &Backends,
    table: &ShotPrefixTable,
    assets: &AssetStore,
    decoder_params: &BTreeMap<String, serde_json::Value>,
) -> Result<Vec<u8>, EngineError> {
    let lin = &record.lineage;
    let handle = |cap| backends.get(cap).map_err(|e| EngineError::backend(String::new(), e));
    let (states, _) = consolidate_prompts(
        &lin.prompt_group,
        handle(Capability::TextEncode)?,
        table.dims().d,
        lin.encode_seed,
    )?;
    let h = states.get(lin.prompt_position).ok_or(EngineError::ReplayMismatch(record.script_index))?;
    let shaped = build_shot_aware(h, &record.shot, table)?;
    if shaped.digest() != lin.state_digest {
        return Err(EngineError::ReplayMismatch(record.script_index));
    }
    let images = record
        .retrieval_manifest
        .iter()
        .map(|m| {
            let raw = assets.get(&m.asset)?;
            let bytes = if m.scale == 1.0 { raw } else { scale_reference(&raw, m.scale)? };
            Ok(VaeImage {
                data_b64: b64_encode(&bytes),
                scale: m.scale,
            })
        })
        .collect::<Result<Vec<_>, EngineError>>()?;
    let req = VaeEncodeRequest {
        protocol_version: PROTOCOL_VERSION,
        images,
    };
    let id = call_id(Capability::VaeEncode, &req);
    let resp = handle(Capability::VaeEncode)?
        .call(Capability::VaeEncode, |b| b.vae_encode(&req))
        .map_err(|e| EngineError::backend(id.clone(), e))?;
    let z = Condition {
        latent_id: resp.latent_id,
        digest: resp.digest,
        manifest: record.retrieval_manifest.clone(),
        call_id: id,
    };
    let (bytes, _) = generate_keyframe(&shaped, &z, handle(Capability::DitDecode)?, lin.decode_seed, decoder_params)?;
    Ok(bytes)
}
