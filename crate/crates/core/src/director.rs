//! Story description to roster and scripts, via an LLM backend with a strict
//! JSON contract and bounded repair, then reference images via an
//! image-generation backend.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::asset::{AssetError, AssetStore};
use crate::backend::{call_id, BackendError, BackendHandle, Capability};
use crate::protocol::{ImageGenerateRequest, LlmMessage, LlmRequest, PROTOCOL_VERSION};
use crate::story::{
    validate_project, Origin, RefKey, RefKind, ReferenceEntry, Script, ShotOrigin, ShotVocabulary, StoryProject,
};
use crate::tensor::b64_decode;

pub const REPAIR_BUDGET: u32 = 3;

#[derive(Debug, Error)]
pub enum DirectorError {
    #[error("n_scripts must be at least 1")]
    ZeroScripts,
    #[error("BACKEND_UNREACHABLE in {call_id}: {source}")]
    BackendUnreachable {
        call_id: String,
        #[source]
        source: BackendError,
    },
    #[error("MALFORMED_AFTER_REPAIRS({attempts}): {codes:?}")]
    MalformedAfterRepairs {
        attempts: u32,
        codes: Vec<String>,
        last_raw: String,
    },
    #[error("reference generation left mentioned keys unresolved: {0:?}")]
    UnresolvedReferences(Vec<ReferenceFailure>),
    #[error(transparent)]
    Asset(#[from] AssetError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectorRequest {
    pub description: String,
    pub n_scripts: usize,
    /// User-pinned references; these win over director proposals.
    #[serde(default)]
    pub roster_hints: Vec<ReferenceEntry>,
    pub vocabulary: ShotVocabulary,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RosterSpec {
    pub key: RefKey,
    pub kind: RefKind,
    pub caption: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectorOutput {
    pub roster: Vec<RosterSpec>,
    pub scripts: Vec<Script>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectorDraft {
    pub raw_response: String,
    pub parsed: Option<DirectorOutput>,
    pub repair_attempts: u32,
    /// Validator codes of every rejected round, oldest first.
    pub rejected: Vec<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceFailure {
    pub key: RefKey,
    pub kind: RefKind,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReferenceOutcome {
    pub entries: Vec<ReferenceEntry>,
    pub failures: Vec<ReferenceFailure>,
    pub calls: usize,
}

fn system_prompt(vocab: &ShotVocabulary) -> String {
    let labels: Vec<&str> = vocab.iter().map(|s| s.label()).collect();
    format!(
        "You are a film director writing a storyboard. Reply with one JSON document and nothing else:\n\
         {{\"characters\":[{{\"key\":string,\"caption\":string}}],\
         \"backgrounds\":[{{\"key\":string,\"caption\":string}}],\
         \"scripts\":[{{\"t\":int,\"prompt\":string,\"characters\":[string],\"background\":string|null,\"shot\":string}}]}}\n\
         Scripts are numbered from 1. Every mentioned key must be declared. Each script has at most one background. \
         The shot must be one of: {}.",
        labels.join(", ")
    )
}

fn user_prompt(req: &DirectorRequest) -> String {
    let labels: Vec<&str> = req.vocabulary.iter().map(|s| s.label()).collect();
    let mut s = format!(
        "Number of scripts: {}\nAllowed shot types: {}\n",
        req.n_scripts,
        labels.join(", ")
    );
    for h in &req.roster_hints {
        let kind = match h.kind {
            RefKind::Character => "character",
            RefKind::Background => "background",
        };
        s.push_str(&format!("Pinned {kind}: {} | {}\n", h.key, h.caption));
    }
    s.push_str("Story description:\n");
    s.push_str(req.description.trim());
    s.push('\n');
    s
}

fn json_slice(raw: &str) -> &str {
    match (raw.find('{'), raw.rfind('}')) {
        (Some(a), Some(b)) if a < b => &raw[a..=b],
        _ => raw,
    }
}

fn str_field<'a>(v: &'a Value, name: &str) -> Option<&'a str> {
    v.get(name).and_then(Value::as_str)
}

/// Parses and validates one LLM reply. Errors are validator codes.
pub fn parse_director_output(raw: &str, req: &DirectorRequest) -> Result<DirectorOutput, Vec<String>> {
    let doc: Value = serde_json::from_str(json_slice(raw)).map_err(|_| vec!["MALFORMED_JSON".to_string()])?;
    let mut codes = BTreeSet::new();
    let mut roster: Vec<RosterSpec> = Vec::new();

    for (field, kind) in [("characters", RefKind::Character), ("backgrounds", RefKind::Background)] {
        let Some(items) = doc.get(field).and_then(Value::as_array) else {
            codes.insert(format!("MISSING_FIELD({field})"));
            continue;
        };
        for item in items {
            match (str_field(item, "key").map(RefKey::new), str_field(item, "caption")) {
                (Some(Ok(key)), caption) => roster.push(RosterSpec {
                    key,
                    kind,
                    caption: caption.unwrap_or_default().to_string(),
                }),
                _ => {
                    codes.insert(format!("MALFORMED_ROSTER_ENTRY({field})"));
                }
            }
        }
    }
    for pin in &req.roster_hints {
        roster.retain(|r| !(r.key == pin.key && r.kind == pin.kind));
        roster.push(RosterSpec {
            key: pin.key.clone(),
            kind: pin.kind,
            caption: pin.caption.clone(),
        });
    }

    let mut scripts = Vec::new();
    match doc.get("scripts").and_then(Value::as_array) {
        None => {
            codes.insert("MISSING_FIELD(scripts)".into());
        }
        Some(items) => {
            if items.len() != req.n_scripts {
                codes.insert(format!("SCRIPT_COUNT({} != {})", items.len(), req.n_scripts));
            }
            for (pos, item) in items.iter().enumerate() {
                let index = item
                    .get("t")
                    .and_then(Value::as_u64)
                    .map(|t| t as u32)
                    .unwrap_or(pos as u32 + 1);
                let prompt = str_field(item, "prompt").unwrap_or_default().to_string();
                let mut characters = Vec::new();
                for c in item.get("characters").and_then(Value::as_array).into_iter().flatten() {
                    match c.as_str().map(RefKey::new) {
                        Some(Ok(k)) => characters.push(k),
                        _ => {
                            codes.insert(format!("MALFORMED_MENTION({index})"));
                        }
                    }
                }
                let background = match item.get("background") {
                    None | Some(Value::Null) => None,
                    Some(Value::String(s)) if s.trim().is_empty() => None,
                    Some(Value::String(s)) => RefKey::new(s).ok(),
                    Some(Value::Array(a)) if a.len() > 1 => {
                        codes.insert(format!("MULTIPLE_BACKGROUNDS({index})"));
                        None
                    }
                    Some(Value::Array(a)) => a.first().and_then(Value::as_str).and_then(|s| RefKey::new(s).ok()),
                    Some(_) => {
                        codes.insert(format!("MALFORMED_BACKGROUND({index})"));
                        None
                    }
                };
                let shot = match str_field(item, "shot").map(|s| req.vocabulary.parse(s)) {
                    Some(Ok(s)) => s,
                    Some(Err(_)) => {
                        codes.insert(format!("UNKNOWN_SHOT({index})"));
                        continue;
                    }
                    None => {
                        codes.insert(format!("MISSING_FIELD(shot@{index})"));
                        continue;
                    }
                };
                scripts.push(Script {
                    index,
                    prompt,
                    characters,
                    background,
                    shot,
                    shot_origin: ShotOrigin::Director,
                });
            }
        }
    }

    let mut draft = StoryProject::new("draft", req.description.clone());
    draft.config.shot_vocabulary = req.vocabulary.clone();
    draft.roster = roster
        .iter()
        .map(|r| ReferenceEntry {
            key: r.key.clone(),
            kind: r.kind,
            asset: None,
            caption: r.caption.clone(),
            origin: Origin::DirectorGenerated,
        })
        .collect();
    draft.scripts = scripts.clone();
    for v in validate_project(&draft).violations {
        codes.insert(v.to_string());
    }
    if codes.is_empty() {
        Ok(DirectorOutput { roster, scripts })
    } else {
        Err(codes.into_iter().collect())
    }
}

/// Asks the LLM for roster and scripts, re-prompting with the validator's
/// codes up to [`REPAIR_BUDGET`] times.
pub fn generate_scripts(req: &DirectorRequest, llm: &BackendHandle) -> Result<DirectorDraft, DirectorError> {
    if req.n_scripts == 0 {
        return Err(DirectorError::ZeroScripts);
    }
    let mut messages = vec![
        LlmMessage {
            role: "system".into(),
            content: system_prompt(&req.vocabulary),
        },
        LlmMessage {
            role: "user".into(),
            content: user_prompt(req),
        },
    ];
    let mut rejected = Vec::new();
    let mut attempt = 0;
    loop {
        let llm_req = LlmRequest {
            protocol_version: PROTOCOL_VERSION,
            messages: messages.clone(),
            seed: req.seed,
        };
        let id = call_id(Capability::LlmComplete, &llm_req);
        let raw = llm
            .call(Capability::LlmComplete, |b| b.llm_complete(&llm_req))
            .map_err(|source| DirectorError::BackendUnreachable { call_id: id, source })?
            .text;
        match parse_director_output(&raw, req) {
            Ok(parsed) => {
                return Ok(DirectorDraft {
                    raw_response: raw,
                    parsed: Some(parsed),
                    repair_attempts: attempt,
                    rejected,
                })
            }
            Err(codes) if attempt >= REPAIR_BUDGET => {
                return Err(DirectorError::MalformedAfterRepairs {
                    attempts: attempt,
                    codes,
                    last_raw: raw,
                })
            }
            Err(codes) => {
                tracing::info!(attempt, ?codes, "director output rejected, repairing");
                messages.push(LlmMessage {
                    role: "assistant".into(),
                    content: raw,
                });
                messages.push(LlmMessage {
                    role: "user".into(),
                    content: format!(
                        "The previous output was rejected with these errors: {}. \
                         Return the corrected JSON document only.",
                        codes.join("; ")
                    ),
                });
                rejected.push(codes);
                attempt += 1;
            }
        }
    }
}

fn kind_str(kind: RefKind) -> &'static str {
    match kind {
        RefKind::Character => "character",
        RefKind::Background => "background",
    }
}

/// Produces one reference per spec. Pinned hints pass through without a
/// backend call. Fails only when a key in `mentioned` ends up without an image.
pub fn generate_reference_assets(
    specs: &[RosterSpec],
    hints: &[ReferenceEntry],
    mentioned: &BTreeSet<(RefKind, RefKey)>,
    imgen: Option<&BackendHandle>,
    assets: &AssetStore,
    seed: u64,
) -> Result<ReferenceOutcome, DirectorError> {
    let pinned: BTreeMap<(RefKind, &RefKey), &ReferenceEntry> = hints.iter().map(|h| ((h.kind, &h.key), h)).collect();
    let mut out = ReferenceOutcome::default();
    for spec in specs {
        if let Some(pin) = pinned.get(&(spec.kind, &spec.key)) {
            out.entries.push((*pin).clone());
            continue;
        }
        let req = ImageGenerateRequest {
            protocol_version: PROTOCOL_VERSION,
            prompt: spec.caption.clone(),
            key: spec.key.to_string(),
            kind: kind_str(spec.kind).into(),
            seed,
        };
        let result = match imgen {
            None => Err("no image_generate backend configured".to_string()),
            Some(h) => {
                out.calls += 1;
                h.call(Capability::ImageGenerate, |b| b.image_generate(&req))
                    .map_err(|e| format!("{}: {e}", call_id(Capability::ImageGenerate, &req)))
                    .and_then(|r| b64_decode(&r.image_b64).map_err(|e| e.to_string()))
                    .and_then(|bytes| assets.put(&bytes).map_err(|e| e.to_string()))
            }
        };
        let asset = match result {
            Ok(a) => Some(a),
            Err(error) => {
                out.failures.push(ReferenceFailure {
                    key: spec.key.clone(),
                    kind: spec.kind,
                    error,
                });
                None
            }
        };
        out.entries.push(ReferenceEntry {
            key: spec.key.clone(),
            kind: spec.kind,
            asset,
            caption: spec.caption.clone(),
            origin: Origin::DirectorGenerated,
        });
    }
    let fatal: Vec<ReferenceFailure> = out
        .failures
        .iter()
        .filter(|f| mentioned.contains(&(f.kind, f.key.clone())))
        .cloned()
        .collect();
    if !fatal.is_empty() {
        return Err(DirectorError::UnresolvedReferences(fatal));
    }
    Ok(out)
}

/// Every (kind, key) mentioned by the scripts.
pub fn mentioned_keys(scripts: &[Script]) -> BTreeSet<(RefKind, RefKey)> {
    let mut set = BTreeSet::new();
    for s in scripts {
        for c in &s.characters {
            set.insert((RefKind::Character, c.clone()));
        }
        if let Some(b) = &s.background {
            set.insert((RefKind::Background, b.clone()));
        }
    }
    set
}

#[derive(Clone, Debug)]
pub struct DirectResult {
    pub draft: DirectorDraft,
    pub references: ReferenceOutcome,
}

/// Full stage one: scripts, then references, written into `project`.
pub fn direct(
    project: &mut StoryProject,
    req: &DirectorRequest,
    llm: &BackendHandle,
    imgen: Option<&BackendHandle>,
    assets: &AssetStore,
) -> Result<DirectResult, DirectorError> {
    let draft = generate_scripts(req, llm)?;
    let parsed = draft.parsed.clone().expect("successful drafts are parsed");
    let references = generate_reference_assets(
        &parsed.roster,
        &req.roster_hints,
        &mentioned_keys(&parsed.scripts),
        imgen,
        assets,
        req.seed,
    )?;
    project.description = req.description.clone();
    project.config.shot_vocabulary = req.vocabulary.clone();
    project.roster = references.entries.clone();
    project.scripts = parsed.scripts;
    project.keyframes.clear();
    project.version += 1;
    Ok(DirectResult { draft, references })
}
