//! Consistency and alignment metrics.

pub mod fixture;
pub mod report;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::story::ShotType;

pub use fixture::{FixtureBackend, FixtureError};
pub use report::{
    aggregate, evaluate_story, report_csv, AggregateMetrics, EmbeddingCache, EvalOptions, FrameMetrics, InterPairing,
    MetricsReport, Score, StoryMetrics,
};

#[derive(Clone, Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("DIM_MISMATCH: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("ZERO_VECTOR")]
    ZeroVector,
    #[error("EMPTY_SET")]
    EmptySet,
    #[error("FEWER_THAN_TWO")]
    FewerThanTwo,
    #[error("INSUFFICIENT_FACES: {usable} frames with faces, {excluded} without")]
    InsufficientFaces { usable: usize, excluded: usize },
    #[error("LENGTH_MISMATCH: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("MISSING_KEYFRAMES: {0:?}")]
    MissingKeyframes(Vec<u32>),
}

impl EvalError {
    pub fn code(&self) -> &'static str {
        match self {
            EvalError::DimMismatch(..) => "DIM_MISMATCH",
            EvalError::ZeroVector => "ZERO_VECTOR",
            EvalError::EmptySet => "EMPTY_SET",
            EvalError::FewerThanTwo => "FEWER_THAN_TWO",
            EvalError::InsufficientFaces { .. } => "INSUFFICIENT_FACES",
            EvalError::LengthMismatch(..) => "LENGTH_MISMATCH",
            EvalError::MissingKeyframes(_) => "MISSING_KEYFRAMES",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl EmbeddingVector {
    pub fn raw(values: Vec<f64>) -> Self {
        Self {
            values,
            normalized: false,
        }
    }

    /// L2-normalizes on ingestion.
    pub fn normalized(values: Vec<f64>) -> Result<Self, EvalError> {
        let norm = values.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(EvalError::ZeroVector);
        }
        Ok(Self {
            values: values.iter().map(|x| x / norm).collect(),
            normalized: true,
        })
    }

    pub fn from_f32(values: &[f32]) -> Result<Self, EvalError> {
        Self::normalized(values.iter().map(|&x| x as f64).collect())
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

fn cosine_f64(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.is_empty() {
        return None;
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Cosine similarity of f32 vectors, computed in f64; `None` for zero
/// vectors or unequal lengths.
pub fn cosine_raw(a: &[f32], b: &[f32]) -> Option<f64> {
    let a: Vec<f64> = a.iter().map(|&x| x as f64).collect();
    let b: Vec<f64> = b.iter().map(|&x| x as f64).collect();
    cosine_f64(&a, &b)
}

pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EvalError> {
    if a.dim() != b.dim() {
        return Err(EvalError::DimMismatch(a.dim(), b.dim()));
    }
    cosine_f64(&a.values, &b.values).ok_or(EvalError::ZeroVector)
}

/// Text-image alignment: cosine of the two embeddings.
pub fn clip_t(text: &EmbeddingVector, image: &EmbeddingVector) -> Result<f64, EvalError> {
    cosine(text, image)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionEmbedding {
    pub fg: EmbeddingVector,
    pub bg: EmbeddingVector,
    pub mask_coverage: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Fg,
    Bg,
}

impl RegionEmbedding {
    pub fn region(&self, r: Region) -> &EmbeddingVector {
        match r {
            Region::Fg => &self.fg,
            Region::Bg => &self.bg,
        }
    }
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Mean cosine over every (reference, generated) pair.
pub fn inter_consistency(refs: &[RegionEmbedding], gens: &[RegionEmbedding], region: Region) -> Result<f64, EvalError> {
    let pairs: Vec<(&RegionEmbedding, &RegionEmbedding)> =
        refs.iter().flat_map(|r| gens.iter().map(move |g| (r, g))).collect();
    inter_consistency_pairs(&pairs, region)
}

/// Mean cosine over explicit (reference, generated) pairs.
pub fn inter_consistency_pairs(pairs: &[(&RegionEmbedding, &RegionEmbedding)], region: Region) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let sims = pairs
        .iter()
        .map(|(r, g)| cosine(r.region(region), g.region(region)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(mean(sims).expect("non-empty"))
}

/// Mean cosine over all unordered pairs of distinct frames.
pub fn intra_consistency(gens: &[RegionEmbedding], region: Region) -> Result<f64, EvalError> {
    if gens.len() < 2 {
        return Err(EvalError::FewerThanTwo);
    }
    let mut sims = Vec::with_capacity(gens.len() * (gens.len() - 1) / 2);
    for i in 0..gens.len() {
        for j in i + 1..gens.len() {
            sims.push(cosine(gens[i].region(region), gens[j].region(region))?);
        }
    }
    Ok(mean(sims).expect("at least one pair"))
}

pub fn average_consistency(inter_fg: f64, inter_bg: f64, intra_fg: f64, intra_bg: f64) -> f64 {
    (inter_fg + inter_bg + intra_fg + intra_bg) / 4.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdSim {
    pub value: f64,
    /// Frames without any detected face.
    pub excluded_frames: usize,
    pub matched_pairs: usize,
}

/// Greedy max-similarity matching of faces between two frames. Returns the
/// matched similarities.
pub fn greedy_face_match(a: &[EmbeddingVector], b: &[EmbeddingVector]) -> Result<Vec<f64>, EvalError> {
    let mut sims = Vec::with_capacity(a.len() * b.len());
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            sims.push((cosine(x, y)?, i, j));
        }
    }
    sims.sort_by(|p, q| q.0.total_cmp(&p.0).then(p.1.cmp(&q.1)).then(p.2.cmp(&q.2)));
    let (mut used_a, mut used_b) = (vec![false; a.len()], vec![false; b.len()]);
    let mut out = Vec::new();
    for (s, i, j) in sims {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            out.push(s);
        }
    }
    Ok(out)
}

/// Identity similarity over frames' detected faces: greedy matching per
/// frame pair, all matched similarities averaged together.
pub fn id_sim(faces: &[Vec<EmbeddingVector>]) -> Result<IdSim, EvalError> {
    let usable: Vec<&Vec<EmbeddingVector>> = faces.iter().filter(|f| !f.is_empty()).collect();
    let excluded = faces.len() - usable.len();
    if usable.len() < 2 {
        return Err(EvalError::InsufficientFaces {
            usable: usable.len(),
            excluded,
        });
    }
    let mut all = Vec::new();
    for i in 0..usable.len() {
        for j in i + 1..usable.len() {
            all.extend(greedy_face_match(usable[i], usable[j])?);
        }
    }
    Ok(IdSim {
        value: mean(all.iter().copied()).expect("every usable pair matches at least one face"),
        excluded_frames: excluded,
        matched_pairs: all.len(),
    })
}

/// Fraction of exact shot-label matches.
pub fn sta(predicted: &[ShotType], target: &[ShotType]) -> Result<f64, EvalError> {
    if predicted.len() != target.len() {
        return Err(EvalError::LengthMismatch(predicted.len(), target.len()));
    }
    if predicted.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let hits = predicted.iter().zip(target).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / predicted.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> EmbeddingVector {
        EmbeddingVector::raw(x.to_vec())
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&v(&[1.0, 0.0]), &v(&[1.0, 0.0])).unwrap(), 1.0);
        assert_eq!(cosine(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        let c = cosine(&v(&[1.0, 2.0, 2.0]), &v(&[2.0, 1.0, 2.0])).unwrap();
        assert!((c - 8.0 / 9.0).abs() < 1e-12);
        assert_eq!(cosine(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])), Err(EvalError::ZeroVector));
        assert_eq!(cosine(&v(&[1.0]), &v(&[1.0, 0.0])), Err(EvalError::DimMismatch(1, 2)));
    }

    #[test]
    fn normalization() {
        let n = EmbeddingVector::normalized(vec![3.0, 4.0]).unwrap();
        let norm: f64 = n.values.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert!(EmbeddingVector::normalized(vec![0.0; 3]).is_err());
    }

    #[test]
    fn sta_examples() {
        let s = |l: &str| ShotType::unchecked(l);
        let a: Vec<_> = (0..8).map(|i| s(if i < 3 { "medium" } else { "long" })).collect();
        let b: Vec<_> = (0..8).map(|_| s("medium")).collect();
        assert_eq!(sta(&a, &b).unwrap(), 0.375);
        assert_eq!(sta(&b, &b).unwrap(), 1.0);
        assert_eq!(sta(&a[..2], &b), Err(EvalError::LengthMismatch(2, 8)));
    }
}
