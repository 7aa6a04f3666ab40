//! Per-story report assembly over analysis backends.

use std::collections::{BTreeMap, HashMap};

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use super::*;
use crate::asset::{AssetRef, AssetStore};
use crate::backend::{Backends, Capability};
use crate::protocol::*;
use crate::story::{RefKind, StoryProject};
use crate::tensor::b64_encode;

/// A metric value, or the reason it could not be computed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl Score {
    pub fn ok(v: f64) -> Self {
        Self {
            value: Some(v),
            reason: None,
        }
    }

    pub fn null(reason: impl Into<String>) -> Self {
        Self {
            value: None,
            reason: Some(reason.into()),
        }
    }

    fn from_result(r: Result<f64, String>) -> Self {
        match r {
            Ok(v) => Self::ok(v),
            Err(e) => Self::null(e),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub index: u32,
    pub asset_sha256: String,
    pub clip_t: Score,
    #[serde(default)]
    pub predicted_shot: Option<String>,
    #[serde(default)]
    pub sta_hit: Option<bool>,
    pub iqs: Score,
    pub ias: Score,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoryMetrics {
    pub inter_fg: Score,
    pub inter_bg: Score,
    pub intra_fg: Score,
    pub intra_bg: Score,
    pub avg_consistency: Score,
    pub clip_t: Score,
    pub id_sim: Score,
    pub id_sim_excluded_frames: usize,
    pub sta: Score,
    pub iqs: Score,
    pub ias: Score,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub story_id: String,
    pub per_frame: Vec<FrameMetrics>,
    pub per_story: StoryMetrics,
}

/// Means over stories of every non-null story score.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub stories: usize,
    pub means: BTreeMap<String, Score>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterPairing {
    /// Every reference against every frame.
    #[default]
    CrossProduct,
    /// Each frame only against the references its script mentions.
    MentionMatched,
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub pairing: InterPairing,
}

#[derive(Clone, Debug)]
enum Cached {
    Vector(Vec<f32>),
    Region(Vec<f32>, Vec<f32>, f64),
    Faces(Vec<Vec<f32>>),
    Shot(String),
    Aesthetics(f64, f64),
}

/// Analysis results keyed by (content hash, capability). Failures are cached
/// too, so each pair is requested at most once.
#[derive(Default)]
pub struct EmbeddingCache {
    inner: RwLock<HashMap<(String, Capability), Result<Cached, String>>>,
}

impl EmbeddingCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get_or(
        &self,
        key: &str,
        cap: Capability,
        f: impl FnOnce() -> Result<Cached, String>,
    ) -> Result<Cached, String> {
        let k = (key.to_string(), cap);
        if let Some(v) = self.inner.read().get(&k) {
            return v.clone();
        }
        let mut w = self.inner.write();
        if let Some(v) = w.get(&k) {
            return v.clone();
        }
        let v = f();
        w.insert(k, v.clone());
        v
    }
}

struct Ctx<'a> {
    backends: &'a Backends,
    assets: &'a AssetStore,
    cache: &'a EmbeddingCache,
}

impl Ctx<'_> {
    fn image_b64(&self, asset: &AssetRef) -> Result<String, String> {
        self.assets.get(asset).map(|b| b64_encode(&b)).map_err(|e| e.to_string())
    }

    fn call<T>(&self, cap: Capability, f: impl Fn(&dyn crate::backend::ModelBackend) -> crate::backend::BackendResult<T>) -> Result<T, String> {
        self.backends
            .get(cap)
            .and_then(|h| h.call(cap, f))
            .map_err(|e| format!("BACKEND_ERROR({cap}): {e}"))
    }

    fn region(&self, asset: &AssetRef) -> Result<RegionEmbedding, String> {
        let c = self.cache.get_or(&asset.sha256, Capability::Segment, || {
            let req = ImageRequest {
                protocol_version: PROTOCOL_VERSION,
                image_b64: self.image_b64(asset)?,
            };
            let r = self.call(Capability::Segment, |b| b.segment(&req))?;
            Ok(Cached::Region(r.fg, r.bg, r.mask_coverage))
        })?;
        let Cached::Region(fg, bg, cov) = c else { unreachable!() };
        Ok(RegionEmbedding {
            fg: EmbeddingVector::from_f32(&fg).map_err(|e| e.to_string())?,
            bg: EmbeddingVector::from_f32(&bg).map_err(|e| e.to_string())?,
            mask_coverage: cov,
        })
    }

    fn image_embedding(&self, asset: &AssetRef) -> Result<EmbeddingVector, String> {
        let c = self.cache.get_or(&asset.sha256, Capability::EmbedImage, || {
            let req = EmbedImageRequest {
                protocol_version: PROTOCOL_VERSION,
                image_b64: self.image_b64(asset)?,
                bbox: None,
            };
            Ok(Cached::Vector(self.call(Capability::EmbedImage, |b| b.embed_image(&req))?.vector))
        })?;
        let Cached::Vector(v) = c else { unreachable!() };
        EmbeddingVector::from_f32(&v).map_err(|e| e.to_string())
    }

    fn text_embedding(&self, text: &str) -> Result<EmbeddingVector, String> {
        let key = crate::asset::sha256_hex(text.as_bytes());
        let c = self.cache.get_or(&key, Capability::EmbedText, || {
            let req = EmbedTextRequest {
                protocol_version: PROTOCOL_VERSION,
                text: text.to_string(),
            };
            Ok(Cached::Vector(self.call(Capability::EmbedText, |b| b.embed_text(&req))?.vector))
        })?;
        let Cached::Vector(v) = c else { unreachable!() };
        EmbeddingVector::from_f32(&v).map_err(|e| e.to_string())
    }

    fn faces(&self, asset: &AssetRef) -> Result<Vec<EmbeddingVector>, String> {
        let c = self.cache.get_or(&asset.sha256, Capability::FaceEmbed, || {
            let req = ImageRequest {
                protocol_version: PROTOCOL_VERSION,
                image_b64: self.image_b64(asset)?,
            };
            Ok(Cached::Faces(self.call(Capability::FaceEmbed, |b| b.face_embed(&req))?.faces))
        })?;
        let Cached::Faces(f) = c else { unreachable!() };
        f.into_iter()
            .map(|v| EmbeddingVector::from_f32(&v).map_err(|e| e.to_string()))
            .collect()
    }

    fn shot(&self, asset: &AssetRef, labels: &[String]) -> Result<String, String> {
        let c = self.cache.get_or(&asset.sha256, Capability::ShotClassify, || {
            let req = ShotClassifyRequest {
                protocol_version: PROTOCOL_VERSION,
                image_b64: self.image_b64(asset)?,
                labels: labels.to_vec(),
            };
            Ok(Cached::Shot(self.call(Capability::ShotClassify, |b| b.shot_classify(&req))?.label))
        })?;
        let Cached::Shot(s) = c else { unreachable!() };
        Ok(s)
    }

    fn aesthetics(&self, asset: &AssetRef) -> Result<(f64, f64), String> {
        let c = self.cache.get_or(&asset.sha256, Capability::Aesthetics, || {
            let req = ImageRequest {
                protocol_version: PROTOCOL_VERSION,
                image_b64: self.image_b64(asset)?,
            };
            let r = self.call(Capability::Aesthetics, |b| b.aesthetics(&req))?;
            Ok(Cached::Aesthetics(r.iqs, r.ias))
        })?;
        let Cached::Aesthetics(i, a) = c else { unreachable!() };
        Ok((i, a))
    }
}

fn mean_score(values: &[Result<f64, String>]) -> Score {
    if let Some(Err(e)) = values.iter().find(|v| v.is_err()) {
        return Score::null(e.clone());
    }
    if values.is_empty() {
        return Score::null(EvalError::EmptySet.code());
    }
    let sum: f64 = values.iter().map(|v| *v.as_ref().expect("checked")).sum();
    Score::ok(sum / values.len() as f64)
}

/// Computes every metric for a story whose scripts all have keyframes.
/// Backend failures become null scores with a reason.
pub fn evaluate_story(
    project: &StoryProject,
    backends: &Backends,
    assets: &AssetStore,
    cache: &EmbeddingCache,
    opts: &EvalOptions,
) -> Result<MetricsReport, EvalError> {
    let missing: Vec<u32> = project
        .scripts
        .iter()
        .filter(|s| project.current_keyframe(s.index).is_none())
        .map(|s| s.index)
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::MissingKeyframes(missing));
    }
    let ctx = Ctx { backends, assets, cache };
    let labels: Vec<String> = project.config.shot_vocabulary.iter().map(|s| s.to_string()).collect();
    let frames: Vec<_> = project
        .scripts
        .iter()
        .map(|s| (s, project.current_keyframe(s.index).expect("checked")))
        .collect();

    let mut per_frame = Vec::with_capacity(frames.len());
    let (mut clip_ts, mut iqss, mut iass) = (Vec::new(), Vec::new(), Vec::new());
    let (mut predicted, mut targets, mut shot_err) = (Vec::new(), Vec::new(), None);
    for (script, kf) in &frames {
        let ct = ctx
            .text_embedding(&script.prompt)
            .and_then(|t| Ok((t, ctx.image_embedding(&kf.asset)?)))
            .and_then(|(t, i)| clip_t(&t, &i).map_err(|e| e.to_string()));
        let shot = ctx.shot(&kf.asset, &labels);
        let aes = ctx.aesthetics(&kf.asset);
        match &shot {
            Ok(label) => match project.config.shot_vocabulary.parse(label) {
                Ok(p) => {
                    predicted.push(p);
                    targets.push(script.shot.clone());
                }
                Err(_) => shot_err = Some(format!("UNKNOWN_SHOT({label})")),
            },
            Err(e) => shot_err = Some(e.clone()),
        }
        per_frame.push(FrameMetrics {
            index: script.index,
            asset_sha256: kf.asset.sha256.clone(),
            clip_t: Score::from_result(ct.clone()),
            predicted_shot: shot.as_ref().ok().cloned(),
            sta_hit: shot.as_ref().ok().map(|l| l == script.shot.label()),
            iqs: Score::from_result(aes.clone().map(|a| a.0)),
            ias: Score::from_result(aes.clone().map(|a| a.1)),
        });
        clip_ts.push(ct);
        iqss.push(aes.clone().map(|a| a.0));
        iass.push(aes.map(|a| a.1));
    }

    let gens: Result<Vec<RegionEmbedding>, String> = frames.iter().map(|(_, kf)| ctx.region(&kf.asset)).collect();
    let mut ref_regions: Vec<(RefKind, crate::story::RefKey, Result<RegionEmbedding, String>)> = Vec::new();
    for r in &project.roster {
        let mentioned = project.scripts.iter().any(|s| match r.kind {
            RefKind::Character => s.characters.contains(&r.key),
            RefKind::Background => s.background.as_ref() == Some(&r.key),
        });
        if !mentioned {
            continue;
        }
        let emb = match &r.asset {
            Some(a) => ctx.region(a),
            None => Err(format!("reference {} has no image", r.key)),
        };
        ref_regions.push((r.kind, r.key.clone(), emb));
    }

    let inter = |kind: RefKind, region: Region| -> Result<f64, String> {
        let gens = gens.as_ref().map_err(|e| e.clone())?;
        let mut refs = Vec::new();
        for (k, key, emb) in &ref_regions {
            if *k == kind {
                refs.push((key, emb.as_ref().map_err(|e| e.clone())?));
            }
        }
        let pairs: Vec<(&RegionEmbedding, &RegionEmbedding)> = match opts.pairing {
            InterPairing::CrossProduct => refs
                .iter()
                .flat_map(|(_, r)| gens.iter().map(move |g| (*r, g)))
                .collect(),
            InterPairing::MentionMatched => frames
                .iter()
                .zip(gens)
                .flat_map(|((s, _), g)| {
                    refs.iter()
                        .filter(|(key, _)| match kind {
                            RefKind::Character => s.characters.contains(key),
                            RefKind::Background => s.background.as_ref() == Some(*key),
                        })
                        .map(move |(_, r)| (*r, g))
                })
                .collect(),
        };
        inter_consistency_pairs(&pairs, region).map_err(|e| e.code().to_string())
    };
    let intra = |region: Region| -> Result<f64, String> {
        let gens = gens.as_ref().map_err(|e| e.clone())?;
        intra_consistency(gens, region).map_err(|e| e.code().to_string())
    };

    let inter_fg = Score::from_result(inter(RefKind::Character, Region::Fg));
    let inter_bg = Score::from_result(inter(RefKind::Background, Region::Bg));
    let intra_fg = Score::from_result(intra(Region::Fg));
    let intra_bg = Score::from_result(intra(Region::Bg));
    let avg_consistency = match (inter_fg.value, inter_bg.value, intra_fg.value, intra_bg.value) {
        (Some(a), Some(b), Some(c), Some(d)) => Score::ok(average_consistency(a, b, c, d)),
        _ => Score::null("component score missing"),
    };

    let faces: Result<Vec<Vec<EmbeddingVector>>, String> = frames.iter().map(|(_, kf)| ctx.faces(&kf.asset)).collect();
    let (id_sim_score, excluded) = match faces {
        Err(e) => (Score::null(e), 0),
        Ok(f) => match id_sim(&f) {
            Ok(r) => (Score::ok(r.value), r.excluded_frames),
            Err(e) => (
                Score::null(e.code()),
                f.iter().filter(|x| x.is_empty()).count(),
            ),
        },
    };
    let sta_score = match shot_err {
        Some(e) => Score::null(e),
        None => Score::from_result(sta(&predicted, &targets).map_err(|e| e.code().to_string())),
    };

    Ok(MetricsReport {
        story_id: project.id.clone(),
        per_frame,
        per_story: StoryMetrics {
            inter_fg,
            inter_bg,
            intra_fg,
            intra_bg,
            avg_consistency,
            clip_t: mean_score(&clip_ts),
            id_sim: id_sim_score,
            id_sim_excluded_frames: excluded,
            sta: sta_score,
            iqs: mean_score(&iqss),
            ias: mean_score(&iass),
        },
    })
}

fn story_fields(m: &StoryMetrics) -> [(&'static str, &Score); 10] {
    [
        ("inter_fg", &m.inter_fg),
        ("inter_bg", &m.inter_bg),
        ("intra_fg", &m.intra_fg),
        ("intra_bg", &m.intra_bg),
        ("avg_consistency", &m.avg_consistency),
        ("clip_t", &m.clip_t),
        ("id_sim", &m.id_sim),
        ("sta", &m.sta),
        ("iqs", &m.iqs),
        ("ias", &m.ias),
    ]
}

/// Benchmark-level means; a metric null in every story stays null.
pub fn aggregate(reports: &[MetricsReport]) -> AggregateMetrics {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in reports {
        for (name, s) in story_fields(&r.per_story) {
            let e = sums.entry(name.to_string()).or_default();
            if let Some(v) = s.value {
                e.0 += v;
                e.1 += 1;
            }
        }
    }
    AggregateMetrics {
        stories: reports.len(),
        means: sums
            .into_iter()
            .map(|(k, (s, n))| {
                let score = if n == 0 {
                    Score::null("no story produced this metric")
                } else {
                    Score::ok(s / n as f64)
                };
                (k, score)
            })
            .collect(),
    }
}

/// One CSV row per story.
pub fn report_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from("story_id");
    if let Some(first) = reports.first() {
        for (name, _) in story_fields(&first.per_story) {
            out.push(',');
            out.push_str(name);
        }
    }
    out.push('\n');
    for r in reports {
        out.push_str(&r.story_id);
        for (_, s) in story_fields(&r.per_story) {
            out.push(',');
            if let Some(v) = s.value {
                out.push_str(&format!("{v:.6}"));
            }
        }
        out.push('\n');
    }
    out
}
