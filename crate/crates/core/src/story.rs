//! Stories, scripts, references and keyframes, plus project validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asset::AssetRef;

pub const SCHEMA_VERSION: &str = "1";

/// Default shot-type vocabulary: the five scale classes, widest last.
pub const DEFAULT_SHOT_LABELS: [&str; 5] = ["extreme-close-up", "close-up", "medium", "full", "long"];

/// Trims, case-folds and collapses inner whitespace.
pub fn canonical_key(raw: &str) -> String {
    raw.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn canonical_shot(raw: &str) -> String {
    raw.trim()
        .to_lowercase()
        .split(|c: char| c.is_whitespace() || c == '_' || c == '-')
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join("-")
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StoryError {
    #[error("UNKNOWN_SHOT: {0:?} is not in the shot vocabulary")]
    UnknownShot(String),
    #[error("empty key")]
    EmptyKey,
}

/// A canonical mention key (trimmed, case-folded).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct RefKey(String);

impl RefKey {
    pub fn new(raw: &str) -> Result<Self, StoryError> {
        let key = canonical_key(raw);
        if key.is_empty() {
            return Err(StoryError::EmptyKey);
        }
        Ok(Self(key))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for RefKey {
    type Error = StoryError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Self::new(&s)
    }
}

impl From<RefKey> for String {
    fn from(k: RefKey) -> Self {
        k.0
    }
}

impl fmt::Display for RefKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A case-normalized shot label. Membership in a vocabulary is checked by
/// [`ShotVocabulary::parse`] and by project validation, not on construction.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub struct ShotType(String);

impl ShotType {
    pub fn label(&self) -> &str {
        &self.0
    }

    pub(crate) fn unchecked(raw: &str) -> Self {
        Self(canonical_shot(raw))
    }
}

impl From<String> for ShotType {
    fn from(s: String) -> Self {
        Self::unchecked(&s)
    }
}

impl From<ShotType> for String {
    fn from(s: ShotType) -> Self {
        s.0
    }
}

impl fmt::Display for ShotType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Ordered set of shot labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ShotVocabulary(Vec<ShotType>);

impl Default for ShotVocabulary {
    fn default() -> Self {
        shot_vocabulary()
    }
}

/// The built-in vocabulary, in fixed order.
pub fn shot_vocabulary() -> ShotVocabulary {
    ShotVocabulary(DEFAULT_SHOT_LABELS.iter().map(|l| ShotType::unchecked(l)).collect())
}

impl ShotVocabulary {
    pub fn new<I, S>(labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut seen = BTreeSet::new();
        let labels = labels
            .into_iter()
            .map(|l| ShotType::unchecked(l.as_ref()))
            .filter(|s| !s.0.is_empty() && seen.insert(s.clone()))
            .collect();
        Self(labels)
    }

    pub fn parse(&self, raw: &str) -> Result<ShotType, StoryError> {
        let shot = ShotType::unchecked(raw);
        if self.contains(&shot) {
            Ok(shot)
        } else {
            Err(StoryError::UnknownShot(raw.to_string()))
        }
    }

    pub fn contains(&self, shot: &ShotType) -> bool {
        self.0.contains(shot)
    }

    pub fn index_of(&self, shot: &ShotType) -> Option<usize> {
        self.0.iter().position(|s| s == shot)
    }

    pub fn labels(&self) -> &[ShotType] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ShotType> {
        self.0.iter()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefKind {
    Character,
    Background,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    UserSupplied,
    DirectorGenerated,
}

/// Who picked a script's shot type.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShotOrigin {
    #[default]
    Director,
    User,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Script {
    /// 1-based position in the story.
    pub index: u32,
    pub prompt: String,
    #[serde(default)]
    pub characters: Vec<RefKey>,
    #[serde(default)]
    pub background: Option<RefKey>,
    pub shot: ShotType,
    #[serde(default)]
    pub shot_origin: ShotOrigin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEntry {
    pub key: RefKey,
    pub kind: RefKind,
    /// Absent until the reference image has been supplied or generated.
    #[serde(default)]
    pub asset: Option<AssetRef>,
    #[serde(default)]
    pub caption: String,
    pub origin: Origin,
}

/// Where one conditioning image came from.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionSource {
    Static { key: RefKey, kind: RefKind },
    Frame { index: u32 },
}

/// One entry of the ordered sequence of images encoded into a keyframe's condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub source: ConditionSource,
    pub asset: AssetRef,
    pub scale: f64,
}

/// What is needed to replay a keyframe on the mock backend.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Lineage {
    /// 0 for the first generation of this index, +1 per regeneration.
    pub generation: u32,
    pub decode_seed: u64,
    pub encode_seed: u64,
    /// The full consolidated prompt group at generation time.
    pub prompt_group: Vec<String>,
    /// Position of this frame's prompt within `prompt_group`.
    pub prompt_position: usize,
    pub shot_table_digest: String,
    pub state_digest: String,
    pub latent_id: String,
    pub call_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyframeRecord {
    pub script_index: u32,
    pub asset: AssetRef,
    pub retrieval_manifest: Vec<ManifestItem>,
    pub shot: ShotType,
    #[serde(default)]
    pub locked: bool,
    #[serde(default)]
    pub superseded: bool,
    pub lineage: Lineage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefixDims {
    /// Embedding width.
    pub d: usize,
    /// Prefix token count.
    pub n: usize,
}

impl Default for PrefixDims {
    fn default() -> Self {
        Self { d: 2048, n: 30 }
    }
}

/// How recent frames are matched against a query's character set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CharacterMatch {
    /// Any shared character.
    #[default]
    Intersect,
    /// Identical character sets.
    Exact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Consistency ratio applied to recent frames, in (0, 1].
    pub alpha: f64,
    /// Number of recent frames retrieved.
    pub mu: usize,
    pub shot_prefix_dims: PrefixDims,
    pub seed: u64,
    #[serde(default)]
    pub backend_endpoints: BTreeMap<String, String>,
    #[serde(default)]
    pub character_match: CharacterMatch,
    #[serde(default)]
    pub shot_vocabulary: ShotVocabulary,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            alpha: 0.75,
            mu: 1,
            shot_prefix_dims: PrefixDims::default(),
            seed: 0,
            backend_endpoints: BTreeMap::new(),
            character_match: CharacterMatch::Intersect,
            shot_vocabulary: shot_vocabulary(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoryProject {
    pub schema_version: String,
    pub id: String,
    /// Bumped on every persisted mutation; used for optimistic concurrency.
    #[serde(default)]
    pub version: u64,
    pub description: String,
    pub roster: Vec<ReferenceEntry>,
    pub scripts: Vec<Script>,
    pub keyframes: Vec<KeyframeRecord>,
    pub config: PipelineConfig,
}

impl StoryProject {
    pub fn new(id: impl Into<String>, description: impl Into<String>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION.to_string(),
            id: id.into(),
            version: 0,
            description: description.into(),
            roster: Vec::new(),
            scripts: Vec::new(),
            keyframes: Vec::new(),
            config: PipelineConfig::default(),
        }
    }

    pub fn script(&self, index: u32) -> Option<&Script> {
        self.scripts.iter().find(|s| s.index == index)
    }

    pub fn reference(&self, kind: RefKind, key: &RefKey) -> Option<&ReferenceEntry> {
        self.roster.iter().find(|r| r.kind == kind && &r.key == key)
    }

    /// The non-superseded keyframe for `index`, if any.
    pub fn current_keyframe(&self, index: u32) -> Option<&KeyframeRecord> {
        self.keyframes
            .iter()
            .rev()
            .find(|k| k.script_index == index && !k.superseded)
    }

    pub fn current_keyframe_mut(&mut self, index: u32) -> Option<&mut KeyframeRecord> {
        self.keyframes
            .iter_mut()
            .rev()
            .find(|k| k.script_index == index && !k.superseded)
    }

    /// Current keyframes in script order.
    pub fn current_keyframes(&self) -> Vec<&KeyframeRecord> {
        let mut frames: Vec<_> = self.keyframes.iter().filter(|k| !k.superseded).collect();
        frames.sort_by_key(|k| k.script_index);
        frames
    }

    /// Number of keyframes ever produced for `index`, superseded ones included.
    pub fn generations(&self, index: u32) -> u32 {
        self.keyframes.iter().filter(|k| k.script_index == index).count() as u32
    }

    /// Marks every unlocked current keyframe with index >= `from` superseded.
    /// Returns the indices affected.
    pub fn supersede_from(&mut self, from: u32) -> Vec<u32> {
        let mut affected = Vec::new();
        for k in self.keyframes.iter_mut() {
            if k.script_index >= from && !k.superseded && !k.locked {
                k.superseded = true;
                affected.push(k.script_index);
            }
        }
        affected
    }
}

/// One problem found by [`validate_project`].
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "code", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Violation {
    UnresolvedMention { script: u32, key: String, kind: RefKind },
    DuplicateKey { key: String, kind: RefKind },
    IndexGap { missing: u32 },
    DuplicateIndex { index: u32 },
    InvalidIndex { index: u32 },
    ScriptOrder { position: usize, index: u32 },
    UnknownShot { script: u32, label: String },
    EmptyPrompt { script: u32 },
    DuplicateMention { script: u32, key: String },
    MultipleBackgrounds { script: u32 },
    KeyframeUnknownScript { index: u32 },
    MultipleCurrentKeyframes { index: u32 },
    InvalidConfig { field: String, reason: String },
    SchemaVersion { found: String },
}

impl Violation {
    pub fn code(&self) -> &'static str {
        match self {
            Violation::UnresolvedMention { .. } => "UNRESOLVED_MENTION",
            Violation::DuplicateKey { .. } => "DUPLICATE_KEY",
            Violation::IndexGap { .. } => "INDEX_GAP",
            Violation::DuplicateIndex { .. } => "DUPLICATE_INDEX",
            Violation::InvalidIndex { .. } => "INVALID_INDEX",
            Violation::ScriptOrder { .. } => "SCRIPT_ORDER",
            Violation::UnknownShot { .. } => "UNKNOWN_SHOT",
            Violation::EmptyPrompt { .. } => "EMPTY_PROMPT",
            Violation::DuplicateMention { .. } => "DUPLICATE_MENTION",
            Violation::MultipleBackgrounds { .. } => "MULTIPLE_BACKGROUNDS",
            Violation::KeyframeUnknownScript { .. } => "KEYFRAME_UNKNOWN_SCRIPT",
            Violation::MultipleCurrentKeyframes { .. } => "MULTIPLE_CURRENT_KEYFRAMES",
            Violation::InvalidConfig { .. } => "INVALID_CONFIG",
            Violation::SchemaVersion { .. } => "SCHEMA_VERSION",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnresolvedMention { script, key, kind } => {
                write!(f, "UNRESOLVED_MENTION({key}) in script {script} ({kind:?})")
            }
            Violation::DuplicateKey { key, kind } => write!(f, "DUPLICATE_KEY({key}, {kind:?})"),
            Violation::IndexGap { missing } => write!(f, "INDEX_GAP({missing})"),
            Violation::DuplicateIndex { index } => write!(f, "DUPLICATE_INDEX({index})"),
            Violation::InvalidIndex { index } => write!(f, "INVALID_INDEX({index})"),
            Violation::ScriptOrder { position, index } => {
                write!(f, "SCRIPT_ORDER(index {index} at position {position})")
            }
            Violation::UnknownShot { script, label } => {
                write!(f, "UNKNOWN_SHOT({label}) in script {script}")
            }
            Violation::EmptyPrompt { script } => write!(f, "EMPTY_PROMPT in script {script}"),
            Violation::DuplicateMention { script, key } => {
                write!(f, "DUPLICATE_MENTION({key}) in script {script}")
            }
            Violation::MultipleBackgrounds { script } => {
                write!(f, "MULTIPLE_BACKGROUNDS in script {script}")
            }
            Violation::KeyframeUnknownScript { index } => {
                write!(f, "KEYFRAME_UNKNOWN_SCRIPT({index})")
            }
            Violation::MultipleCurrentKeyframes { index } => {
                write!(f, "MULTIPLE_CURRENT_KEYFRAMES({index})")
            }
            Violation::InvalidConfig { field, reason } => {
                write!(f, "INVALID_CONFIG({field}): {reason}")
            }
            Violation::SchemaVersion { found } => write!(f, "SCHEMA_VERSION({found})"),
        }
    }
}

/// Non-fatal findings.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "code", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Warning {
    /// Script with no character mentions (pure scenery).
    NoCharacters { script: u32 },
    /// Roster entry without an image yet.
    MissingAsset { key: String, kind: RefKind },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub warnings: Vec<Warning>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn codes(&self) -> BTreeSet<&'static str> {
        self.violations.iter().map(Violation::code).collect()
    }
}

/// Collects every structural problem in `project`. Never fails.
pub fn validate_project(project: &StoryProject) -> ValidationReport {
    let mut report = ValidationReport::default();
    let v = &mut report.violations;

    if project.schema_version != SCHEMA_VERSION {
        v.push(Violation::SchemaVersion {
            found: project.schema_version.clone(),
        });
    }

    let cfg = &project.config;
    if !(cfg.alpha > 0.0 && cfg.alpha <= 1.0) {
        v.push(Violation::InvalidConfig {
            field: "alpha".into(),
            reason: format!("{} is outside (0, 1]", cfg.alpha),
        });
    }
    if cfg.shot_prefix_dims.d == 0 || cfg.shot_prefix_dims.n == 0 {
        v.push(Violation::InvalidConfig {
            field: "shot_prefix_dims".into(),
            reason: "d and N must be at least 1".into(),
        });
    }
    if cfg.shot_vocabulary.is_empty() {
        v.push(Violation::InvalidConfig {
            field: "shot_vocabulary".into(),
            reason: "empty vocabulary".into(),
        });
    }

    let mut seen = BTreeSet::new();
    for entry in &project.roster {
        if !seen.insert((entry.kind, entry.key.clone())) {
            v.push(Violation::DuplicateKey {
                key: entry.key.to_string(),
                kind: entry.kind,
            });
        }
        if entry.asset.is_none() {
            report.warnings.push(Warning::MissingAsset {
                key: entry.key.to_string(),
                kind: entry.kind,
            });
        }
    }

    let mut indices = BTreeSet::new();
    for (pos, script) in project.scripts.iter().enumerate() {
        let t = script.index;
        if t == 0 {
            v.push(Violation::InvalidIndex { index: 0 });
        } else if !indices.insert(t) {
            v.push(Violation::DuplicateIndex { index: t });
        }
        if pos > 0 && project.scripts[pos - 1].index > t {
            v.push(Violation::ScriptOrder { position: pos, index: t });
        }
        if script.prompt.trim().is_empty() {
            v.push(Violation::EmptyPrompt { script: t });
        }
        if !cfg.shot_vocabulary.contains(&script.shot) {
            v.push(Violation::UnknownShot {
                script: t,
                label: script.shot.to_string(),
            });
        }
        let mut mentioned = BTreeSet::new();
        for key in &script.characters {
            if !mentioned.insert(key) {
                v.push(Violation::DuplicateMention {
                    script: t,
                    key: key.to_string(),
                });
            } else if !seen.contains(&(RefKind::Character, key.clone())) {
                v.push(Violation::UnresolvedMention {
                    script: t,
                    key: key.to_string(),
                    kind: RefKind::Character,
                });
            }
        }
        if let Some(bg) = &script.background {
            if !seen.contains(&(RefKind::Background, bg.clone())) {
                v.push(Violation::UnresolvedMention {
                    script: t,
                    key: bg.to_string(),
                    kind: RefKind::Background,
                });
            }
        }
        if script.characters.is_empty() {
            report.warnings.push(Warning::NoCharacters { script: t });
        }
    }
    if let Some(&max) = indices.iter().next_back() {
        for missing in (1..max).filter(|i| !indices.contains(i)) {
            v.push(Violation::IndexGap { missing });
        }
    }

    let mut current: BTreeMap<u32, usize> = BTreeMap::new();
    for k in &project.keyframes {
        if !indices.contains(&k.script_index) {
            v.push(Violation::KeyframeUnknownScript {
                index: k.script_index,
            });
        }
        if !k.superseded {
            *current.entry(k.script_index).or_default() += 1;
        }
    }
    for (index, count) in current {
        if count > 1 {
            v.push(Violation::MultipleCurrentKeyframes { index });
        }
    }

    v.sort();
    v.dedup();
    report.warnings.sort();
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(key: &str, kind: RefKind) -> ReferenceEntry {
        ReferenceEntry {
            key: RefKey::new(key).unwrap(),
            kind,
            asset: None,
            caption: format!("{key} caption"),
            origin: Origin::UserSupplied,
        }
    }

    fn script(t: u32, chars: &[&str], bg: Option<&str>, shot: &str) -> Script {
        Script {
            index: t,
            prompt: format!("beat {t}"),
            characters: chars.iter().map(|c| RefKey::new(c).unwrap()).collect(),
            background: bg.map(|b| RefKey::new(b).unwrap()),
            shot: ShotType::unchecked(shot),
            shot_origin: ShotOrigin::Director,
        }
    }

    fn eight_script_project() -> StoryProject {
        let mut p = StoryProject::new("p", "a story");
        p.roster = vec![
            entry("hero", RefKind::Character),
            entry("villain", RefKind::Character),
            entry("park", RefKind::Background),
        ];
        let shots = shot_vocabulary();
        p.scripts = (1..=8)
            .map(|t| {
                script(
                    t,
                    if t % 2 == 0 { &["hero", "villain"] } else { &["hero"] },
                    Some("park"),
                    shots.labels()[t as usize % 5].label(),
                )
            })
            .collect();
        p
    }

    #[test]
    fn vocabulary_is_fixed_and_ordered() {
        let labels: Vec<_> = shot_vocabulary().iter().map(|s| s.to_string()).collect();
        assert_eq!(labels, ["extreme-close-up", "close-up", "medium", "full", "long"]);
    }

    #[test]
    fn shot_parsing() {
        let vocab = shot_vocabulary();
        assert_eq!(vocab.parse("Close-Up").unwrap().label(), "close-up");
        assert_eq!(vocab.parse(" extreme close_up ").unwrap().label(), "extreme-close-up");
        assert_eq!(
            vocab.parse("dutch-angle"),
            Err(StoryError::UnknownShot("dutch-angle".into()))
        );
    }

    #[test]
    fn shot_serde_roundtrip() {
        for shot in shot_vocabulary().iter() {
            let text = serde_json::to_string(shot).unwrap();
            let back: ShotType = serde_json::from_str(&text).unwrap();
            assert_eq!(&back, shot);
        }
    }

    #[test]
    fn keys_are_canonical() {
        assert_eq!(RefKey::new("  Hero ").unwrap(), RefKey::new("hero").unwrap());
        assert_eq!(RefKey::new("Old   Man").unwrap().as_str(), "old man");
        assert!(RefKey::new("   ").is_err());
        let k: RefKey = serde_json::from_str("\"HERO\"").unwrap();
        assert_eq!(k.as_str(), "hero");
    }

    #[test]
    fn well_formed_project_is_clean() {
        let report = validate_project(&eight_script_project());
        assert!(report.violations.is_empty(), "{:?}", report.violations);
    }

    #[test]
    fn unresolved_mention() {
        let mut p = eight_script_project();
        p.roster.retain(|r| r.key.as_str() != "hero");
        let report = validate_project(&p);
        assert!(report.violations.contains(&Violation::UnresolvedMention {
            script: 1,
            key: "hero".into(),
            kind: RefKind::Character
        }));
    }

    #[test]
    fn index_gap() {
        let mut p = eight_script_project();
        p.scripts.truncate(4);
        p.scripts.remove(2);
        let report = validate_project(&p);
        assert_eq!(report.violations, vec![Violation::IndexGap { missing: 3 }]);
    }

    #[test]
    fn character_key_does_not_resolve_background_mention() {
        let mut p = eight_script_project();
        p.scripts[0].background = Some(RefKey::new("hero").unwrap());
        let report = validate_project(&p);
        assert_eq!(report.codes().into_iter().collect::<Vec<_>>(), ["UNRESOLVED_MENTION"]);
    }

    #[test]
    fn scenery_script_is_a_warning() {
        let mut p = eight_script_project();
        p.scripts[2].characters.clear();
        let report = validate_project(&p);
        assert!(report.is_ok());
        assert!(report.warnings.contains(&Warning::NoCharacters { script: 3 }));
    }

    #[test]
    fn violation_codes_serialize_machine_readably() {
        let v = Violation::IndexGap { missing: 3 };
        assert_eq!(
            serde_json::to_string(&v).unwrap(),
            r#"{"code":"INDEX_GAP","missing":3}"#
        );
    }
}
