//! Pipeline operations over a project directory. The CLI and the job
//! workers both call these, so every command and its endpoint share one
//! code path.

use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use vstory_core::asset::{AssetError, AssetStore};
use vstory_core::backend::{BackendError, Backends, Capability};
use vstory_core::benchmark::{load_benchmark, BenchmarkError, BenchmarkIssue, CountMode};
use vstory_core::director::{direct as run_director, DirectorError, DirectorRequest};
use vstory_core::engine::{
    regenerate_from, run_story, EngineError, EngineEvent, RunOptions, RunReport,
};
use vstory_core::eval::fixture::FixtureError;
use vstory_core::eval::report::{
    evaluate_story, EmbeddingCache, EvalOptions, InterPairing, MetricsReport,
};
use vstory_core::eval::EvalError;
use vstory_core::project_io::{ProjectDir, ProjectIoError};
use vstory_core::story::{validate_project, Origin, StoryProject, ValidationReport};
use vstory_core::tuner::dataset::{build_shot_dataset, load_pairs, DatasetError, DatasetParams};
use vstory_core::tuner::optim::{
    tune as run_tune, BackendObjective, Optimizer, TuneError, TuneParams,
};
use vstory_core::tuner::prefix::{
    init_prefix_table, load_table, save_table, PrefixError, ShotPrefixTable,
};
use vstory_core::video::{
    concat, expand as run_expand, ClipParams, ClipRecord, VideoError, VideoManifest,
};

pub const PREFIX_FILE: &str = "shot_prefix.bin";
pub const REPORT_FILE: &str = "report.json";
pub const VIDEO_DIR: &str = "video";
pub const CLIPS_FILE: &str = "clips.json";

#[derive(Debug, Error)]
pub enum OpError {
    #[error("NO_PROJECT: no project at {0}")]
    NoProject(PathBuf),
    #[error("VALIDATION_FAILED: {}", .0.violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(ValidationReport),
    #[error("MISSING_CAPABILITY: {}", .0.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(", "))]
    MissingCapabilities(Vec<Capability>),
    #[error("benchmark has {} issue(s)", .0.len())]
    BenchmarkInvalid(Vec<BenchmarkIssue>),
    #[error(transparent)]
    Project(#[from] ProjectIoError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Director(#[from] DirectorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Fixture(#[from] FixtureError),
    #[error(transparent)]
    Video(#[from] VideoError),
    #[error(transparent)]
    Tune(#[from] TuneError),
    #[error(transparent)]
    Prefix(#[from] PrefixError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Benchmark(BenchmarkError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Asset(#[from] AssetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<BenchmarkError> for OpError {
    fn from(e: BenchmarkError) -> Self {
        match e {
            BenchmarkError::Invalid(issues) => OpError::BenchmarkInvalid(issues),
            other => OpError::Benchmark(other),
        }
    }
}

/// Leading `UPPER_SNAKE` token of a message, if it has one.
fn leading_code(msg: &str) -> Option<String> {
    let code: String = msg
        .chars()
        .take_while(|c| c.is_ascii_uppercase() || *c == '_')
        .collect();
    (code.len() >= 3 && code.contains(|c: char| c.is_ascii_uppercase())).then_some(code)
}

impl OpError {
    /// Machine-readable error code.
    pub fn code(&self) -> String {
        let fixed = match self {
            OpError::Invalid(r) | OpError::Engine(EngineError::Invalid(r))
                if !r.violations.is_empty() =>
            {
                return r.violations[0].code().to_string()
            }
            OpError::BenchmarkInvalid(_) => "BENCHMARK_INVALID",
            OpError::Engine(e) => return engine_code(e),
            OpError::Director(DirectorError::ZeroScripts) => "ZERO_SCRIPTS",
            OpError::Director(DirectorError::UnresolvedReferences(_)) => "UNRESOLVED_REFERENCES",
            OpError::Eval(e) => e.code(),
            OpError::Video(VideoError::MissingKeyframes(_)) => "MISSING_KEYFRAMES",
            OpError::Video(VideoError::NoClips) => "NO_CLIPS",
            OpError::Video(VideoError::InvalidParams) => "INVALID_PARAMS",
            OpError::Tune(TuneError::EmptyDataset) => "EMPTY_DATASET",
            OpError::Tune(TuneError::ZeroIterations | TuneError::ZeroBatch) => "INVALID_PARAMS",
            OpError::Backend(BackendError::MissingCapability { .. }) => "MISSING_CAPABILITY",
            OpError::Backend(_) => "BACKEND_ERROR",
            OpError::Project(ProjectIoError::Migration { .. }) => "MIGRATION_REQUIRED",
            OpError::Project(_) => "PROJECT_IO",
            OpError::Asset(_) => "ASSET_ERROR",
            OpError::Io(_) => "IO_ERROR",
            _ => "",
        };
        if !fixed.is_empty() {
            return fixed.to_string();
        }
        leading_code(&self.to_string()).unwrap_or_else(|| "OPERATION_FAILED".into())
    }

    /// Individual findings, for errors that carry a list.
    pub fn details(&self) -> Vec<String> {
        match self {
            OpError::Invalid(r) | OpError::Engine(EngineError::Invalid(r)) => {
                r.violations.iter().map(|v| v.to_string()).collect()
            }
            OpError::BenchmarkInvalid(issues) => issues
                .iter()
                .map(|i| match &i.story {
                    Some(s) => format!("{} [{s}]: {}", i.code, i.detail),
                    None => format!("{}: {}", i.code, i.detail),
                })
                .collect(),
            OpError::Director(DirectorError::MalformedAfterRepairs { codes, .. }) => codes.clone(),
            OpError::MissingCapabilities(caps) => caps.iter().map(|c| c.to_string()).collect(),
            _ => Vec::new(),
        }
    }

    pub fn is_cancelled(&self) -> bool {
        matches!(self, OpError::Engine(e) if engine_code(e) == "CANCELLED")
    }
}

fn engine_code(e: &EngineError) -> String {
    match e {
        EngineError::Frame { source, .. } => engine_code(source),
        EngineError::Cancelled { .. } => "CANCELLED".into(),
        EngineError::Invalid(_) => "VALIDATION_FAILED".into(),
        EngineError::Backend { source, .. } if source.is_retryable() => {
            "BACKEND_UNREACHABLE".into()
        }
        EngineError::Backend { .. } => "BACKEND_ERROR".into(),
        EngineError::Payload { .. } => "BACKEND_PROTOCOL".into(),
        other => leading_code(&other.to_string()).unwrap_or_else(|| "ENGINE_ERROR".into()),
    }
}

/// Progress events shared by the CLI and the job event streams.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum OpEvent {
    Progress {
        current: u64,
        total: u64,
    },
    FrameDone {
        index: u32,
        asset: String,
        reused: bool,
        locked: bool,
    },
    StageDone {
        stage: String,
    },
    Log {
        message: String,
    },
}

pub type Sink<'a> = &'a mut dyn FnMut(OpEvent);

/// Parameters the CLI's global flags may override.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Overrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<usize>,
}

impl Overrides {
    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }

    /// Applies the overrides; true when the config changed.
    pub fn apply(&self, project: &mut StoryProject) -> bool {
        let before = project.config.clone();
        if let Some(s) = self.seed {
            project.config.seed = s;
        }
        if let Some(a) = self.alpha {
            project.config.alpha = a;
        }
        if let Some(m) = self.mu {
            project.config.mu = m;
        }
        before != project.config
    }
}

pub fn load(dir: &ProjectDir) -> Result<StoryProject, OpError> {
    if !dir.exists() {
        return Err(OpError::NoProject(dir.root().to_path_buf()));
    }
    Ok(dir.load()?)
}

/// The project's prefix table, or a seeded initial table when none has been
/// tuned yet.
pub fn prefix_table(dir: &ProjectDir, project: &StoryProject) -> Result<ShotPrefixTable, OpError> {
    let path = dir.root().join(PREFIX_FILE);
    let vocab = &project.config.shot_vocabulary;
    let dims = project.config.shot_prefix_dims;
    if path.exists() {
        Ok(load_table(&path, vocab, dims)?)
    } else {
        Ok(init_prefix_table(
            vocab,
            dims.d,
            dims.n,
            project.config.seed,
        ))
    }
}

fn require(backends: &Backends, caps: &[Capability]) -> Result<(), OpError> {
    let missing: Vec<Capability> = caps.iter().copied().filter(|c| !backends.has(*c)).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(OpError::MissingCapabilities(missing))
    }
}

/// Capabilities a job kind cannot start without.
pub const GENERATE_CAPS: &[Capability] = &[
    Capability::TextEncode,
    Capability::VaeEncode,
    Capability::DitDecode,
];
pub const DIRECT_CAPS: &[Capability] = &[Capability::LlmComplete];
pub const EXPAND_CAPS: &[Capability] = &[Capability::Ti2v];
pub const TUNE_CAPS: &[Capability] = &[Capability::TuneStep];
pub const DATASET_CAPS: &[Capability] = &[
    Capability::Track,
    Capability::EmbedImage,
    Capability::ShotClassify,
    Capability::Caption,
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectParams {
    pub description: String,
    pub n_scripts: usize,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DirectSummary {
    pub scripts: usize,
    pub characters: usize,
    pub backgrounds: usize,
    pub repair_attempts: u32,
    pub reference_calls: usize,
    pub version: u64,
}

/// Drafts scripts and references into the project, creating it if needed.
/// Existing user-supplied references are kept as pins.
pub fn direct(
    dir: &ProjectDir,
    params: &DirectParams,
    backends: &Backends,
    sink: Sink,
) -> Result<DirectSummary, OpError> {
    require(backends, DIRECT_CAPS)?;
    let mut project = if dir.exists() {
        dir.load()?
    } else {
        let id = dir
            .root()
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("story")
            .to_string();
        StoryProject::new(id, params.description.clone())
    };
    let pins = project
        .roster
        .iter()
        .filter(|r| r.origin == Origin::UserSupplied && r.asset.is_some())
        .cloned()
        .collect();
    let req = DirectorRequest {
        description: params.description.clone(),
        n_scripts: params.n_scripts,
        roster_hints: pins,
        vocabulary: project.config.shot_vocabulary.clone(),
        seed: params.seed.unwrap_or(project.config.seed),
    };
    let assets = dir.assets()?;
    let llm = backends.get(Capability::LlmComplete)?;
    let imgen = backends.get(Capability::ImageGenerate).ok();
    let res = run_director(&mut project, &req, llm, imgen, &assets)?;
    sink(OpEvent::StageDone {
        stage: "scripts".into(),
    });
    let report = validate_project(&project);
    if !report.is_ok() {
        return Err(OpError::Invalid(report));
    }
    dir.save(&project)?;
    sink(OpEvent::StageDone {
        stage: "references".into(),
    });
    let count = |k| project.roster.iter().filter(|r| r.kind == k).count();
    Ok(DirectSummary {
        scripts: project.scripts.len(),
        characters: count(vstory_core::story::RefKind::Character),
        backgrounds: count(vstory_core::story::RefKind::Background),
        repair_attempts: res.draft.repair_attempts,
        reference_calls: res.references.calls,
        version: project.version,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub generated: Vec<u32>,
    pub reused: Vec<u32>,
    pub version: u64,
}

fn engine_sink<'a>(sink: &'a mut dyn FnMut(OpEvent)) -> impl FnMut(&EngineEvent) + 'a {
    let mut total = 0u64;
    let mut done = 0u64;
    move |e: &EngineEvent| match e {
        EngineEvent::Started { total: t, .. } => {
            total = *t as u64;
            sink(OpEvent::Progress { current: 0, total });
        }
        EngineEvent::FrameStarted { .. } => {}
        EngineEvent::FrameDone {
            index,
            asset,
            reused,
            locked,
        } => {
            done += 1;
            sink(OpEvent::FrameDone {
                index: *index,
                asset: asset.sha256.clone(),
                reused: *reused,
                locked: *locked,
            });
            sink(OpEvent::Progress {
                current: done,
                total,
            });
        }
        EngineEvent::Finished { .. } => sink(OpEvent::StageDone {
            stage: "keyframes".into(),
        }),
    }
}

fn prepare(dir: &ProjectDir, overrides: &Overrides) -> Result<StoryProject, OpError> {
    let mut project = load(dir)?;
    if overrides.apply(&mut project) {
        let report = validate_project(&project);
        if !report.is_ok() {
            return Err(OpError::Invalid(report));
        }
        project.version += 1;
        dir.save(&project)?;
    }
    Ok(project)
}

/// Generates every missing keyframe, checkpointing after each frame.
pub fn generate(
    dir: &ProjectDir,
    backends: &Backends,
    overrides: &Overrides,
    cancel: Option<&AtomicBool>,
    sink: Sink,
) -> Result<GenerateSummary, OpError> {
    require(backends, GENERATE_CAPS)?;
    let mut project = prepare(dir, overrides)?;
    let table = prefix_table(dir, &project)?;
    let assets = dir.assets()?;
    let mut on = engine_sink(sink);
    let opts = RunOptions {
        checkpoint: Some(dir),
        cancel,
        on_event: Some(&mut on),
        ..Default::default()
    };
    let RunReport { generated, reused } = run_story(&mut project, backends, &table, &assets, opts)?;
    dir.save(&project)?;
    Ok(GenerateSummary {
        generated,
        reused,
        version: project.version,
    })
}

/// Supersedes unlocked frames from `from` on and regenerates them.
pub fn regenerate(
    dir: &ProjectDir,
    from: u32,
    backends: &Backends,
    overrides: &Overrides,
    cancel: Option<&AtomicBool>,
    sink: Sink,
) -> Result<GenerateSummary, OpError> {
    require(backends, GENERATE_CAPS)?;
    let mut project = prepare(dir, overrides)?;
    let table = prefix_table(dir, &project)?;
    let assets = dir.assets()?;
    let mut on = engine_sink(sink);
    let opts = RunOptions {
        checkpoint: Some(dir),
        cancel,
        on_event: Some(&mut on),
        ..Default::default()
    };
    let RunReport { generated, reused } =
        regenerate_from(&mut project, from, backends, &table, &assets, opts)?;
    dir.save(&project)?;
    Ok(GenerateSummary {
        generated,
        reused,
        version: project.version,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    #[serde(default)]
    pub pairing: InterPairing,
}

/// Scores the story and writes `report.json` next to the project.
pub fn evaluate(
    dir: &ProjectDir,
    backends: &Backends,
    params: &EvalParams,
    sink: Sink,
) -> Result<MetricsReport, OpError> {
    let project = load(dir)?;
    let assets = dir.assets()?;
    let cache = EmbeddingCache::new();
    let report = evaluate_story(
        &project,
        backends,
        &assets,
        &cache,
        &EvalOptions {
            pairing: params.pairing,
        },
    )?;
    let mut bytes = serde_json::to_vec_pretty(&report).map_err(std::io::Error::other)?;
    bytes.push(b'\n');
    vstory_core::asset::write_atomic(&dir.root().join(REPORT_FILE), &bytes)?;
    sink(OpEvent::StageDone {
        stage: "evaluate".into(),
    });
    Ok(report)
}

pub fn read_report(dir: &ProjectDir) -> Result<Option<MetricsReport>, OpError> {
    let path = dir.root().join(REPORT_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read(path)?;
    Ok(Some(
        serde_json::from_slice(&text).map_err(std::io::Error::other)?,
    ))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExpandSummary {
    pub clips: Vec<ClipRecord>,
    pub manifest: VideoManifest,
}

/// One clip per keyframe, then the concat manifest under `video/`.
pub fn expand(
    dir: &ProjectDir,
    backends: &Backends,
    params: &ClipParams,
    sink: Sink,
) -> Result<ExpandSummary, OpError> {
    require(backends, EXPAND_CAPS)?;
    let project = load(dir)?;
    let assets = dir.assets()?;
    let clips = run_expand(&project, backends.get(Capability::Ti2v)?, params, &assets)?;
    let total = clips.len() as u64;
    for (i, c) in clips.iter().enumerate() {
        match &c.error {
            Some(e) => sink(OpEvent::Log {
                message: format!("clip {} failed: {e}", c.index),
            }),
            None => sink(OpEvent::Log {
                message: format!("clip {} ready after {} retries", c.index, c.retries),
            }),
        }
        sink(OpEvent::Progress {
            current: i as u64 + 1,
            total,
        });
    }
    let out = dir.root().join(VIDEO_DIR);
    std::fs::create_dir_all(&out)?;
    let mut bytes = serde_json::to_vec_pretty(&clips).map_err(std::io::Error::other)?;
    bytes.push(b'\n');
    vstory_core::asset::write_atomic(&out.join(CLIPS_FILE), &bytes)?;
    let manifest = concat(&clips, &assets, &out)?;
    sink(OpEvent::StageDone {
        stage: "expand".into(),
    });
    Ok(ExpandSummary { clips, manifest })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneSettings {
    pub dataset: PathBuf,
    #[serde(default = "default_iters")]
    pub iters: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

fn default_iters() -> usize {
    TuneParams::default().iters
}

fn default_lr() -> f64 {
    1e-3
}

fn default_batch() -> usize {
    TuneParams::default().batch_size
}

fn default_checkpoint_every() -> usize {
    TuneParams::default().checkpoint_every
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TuneSummary {
    pub iterations: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    pub checkpoints: usize,
    pub table_digest: String,
    pub table: PathBuf,
}

/// Tunes the project's prefix table on a pair dataset through `tune_step`
/// and writes the result to `shot_prefix.bin`.
pub fn tune(
    dir: &ProjectDir,
    settings: &TuneSettings,
    backends: &Backends,
    sink: Sink,
) -> Result<TuneSummary, OpError> {
    require(backends, TUNE_CAPS)?;
    let project = load(dir)?;
    let pairs = load_pairs(&settings.dataset)?;
    let table = prefix_table(dir, &project)?;
    let path = dir.root().join(PREFIX_FILE);
    let params = TuneParams {
        iters: settings.iters,
        batch_size: settings.batch_size,
        seed: settings.seed,
        optimizer: Optimizer::adam(settings.lr),
        checkpoint_every: settings.checkpoint_every,
        checkpoint_path: Some(dir.root().join("shot_prefix.ckpt.bin")),
    };
    let mut objective =
        BackendObjective::new(backends.get(Capability::TuneStep)?.clone(), settings.seed);
    let out = run_tune(&table, &pairs, &mut objective, &params)?;
    save_table(&out.table, &path)?;
    sink(OpEvent::Progress {
        current: out.losses.len() as u64,
        total: settings.iters as u64,
    });
    sink(OpEvent::StageDone {
        stage: "tune".into(),
    });
    Ok(TuneSummary {
        iterations: out.losses.len(),
        first_loss: out.losses.first().copied().unwrap_or(f64::NAN),
        final_loss: out.final_loss,
        checkpoints: out.checkpoints,
        table_digest: out.table.digest(),
        table: path,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSettings {
    pub clips_dir: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub tau: Option<u32>,
    #[serde(default)]
    pub theta_id: Option<f64>,
    #[serde(default)]
    pub max_pairs_per_track: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub clips: usize,
    pub pairs: usize,
    pub rejections: usize,
    pub rejection_reasons: std::collections::BTreeMap<String, usize>,
    pub out_dir: PathBuf,
}

pub fn build_dataset(
    settings: &DatasetSettings,
    backends: &Backends,
    sink: Sink,
) -> Result<DatasetSummary, OpError> {
    require(backends, DATASET_CAPS)?;
    let mut params = DatasetParams {
        seed: settings.seed,
        max_pairs_per_track: settings.max_pairs_per_track,
        ..DatasetParams::default()
    };
    if let Some(t) = settings.tau {
        params.tau = t;
    }
    if let Some(t) = settings.theta_id {
        params.theta_id = t;
    }
    let build = build_shot_dataset(&settings.clips_dir, &settings.out_dir, &params, backends)?;
    let mut reasons = std::collections::BTreeMap::new();
    for r in &build.rejections {
        let v = serde_json::to_value(r).map_err(std::io::Error::other)?;
        let reason = v["reason"].as_str().unwrap_or("UNKNOWN").to_string();
        *reasons.entry(reason).or_insert(0) += 1;
    }
    sink(OpEvent::StageDone {
        stage: "dataset".into(),
    });
    Ok(DatasetSummary {
        clips: build.clips.len(),
        pairs: build.pairs.len(),
        rejections: build.rejections.len(),
        rejection_reasons: reasons,
        out_dir: settings.out_dir.clone(),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchSummary {
    pub name: String,
    pub stories: usize,
    pub scripts: usize,
}

pub fn bench_validate(root: &Path, strict: bool) -> Result<BenchSummary, OpError> {
    let mode = if strict {
        CountMode::Strict
    } else {
        CountMode::Declared
    };
    let b = load_benchmark(root, mode)?;
    Ok(BenchSummary {
        name: serde_json::to_value(b.header.name)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default(),
        stories: b.stories.len(),
        scripts: b.script_count(),
    })
}

/// Content-addressed store of a project directory.
pub fn assets_of(dir: &ProjectDir) -> Result<AssetStore, OpError> {
    Ok(dir.assets()?)
}
