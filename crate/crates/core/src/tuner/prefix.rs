//! Shot-type prefix table and the `shot_prefix.v1` file format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "SHOTPFX1"
//! format       u32      1
//! version      u32      table version
//! d, n         u32, u32
//! vocab        u32 count, then per label: u16 length + UTF-8 bytes
//! iterations   u64
//! dataset      32 bytes dataset digest (zeros when untrained)
//! matrices     count * n * d f32, in vocab order, row-major
//! checksum     32 bytes SHA-256 of everything above
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::asset::write_atomic;
use crate::story::{PrefixDims, ShotType, ShotVocabulary};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 8] = b"SHOTPFX1";
pub const FORMAT_VERSION: u32 = 1;
/// Standard deviation of the initial prefix values.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum PrefixError {
    #[error("UNKNOWN_SHOT: {0} has no prefix entry")]
    UnknownShot(ShotType),
    #[error("DIM_MISMATCH: table is d={found_d}, N={found_n}; expected d={expected_d}, N={expected_n}")]
    DimMismatch {
        found_d: usize,
        found_n: usize,
        expected_d: usize,
        expected_n: usize,
    },
    #[error("VOCAB_MISMATCH: unexpected {extra:?}, missing {missing:?}")]
    VocabMismatch { extra: Vec<String>, missing: Vec<String> },
    #[error("not a shot_prefix.v1 file: {0}")]
    Format(String),
    #[error("checksum mismatch: file is corrupt")]
    Checksum,
    #[error("table holds non-finite values")]
    NonFinite,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub iterations: u64,
    /// Hex SHA-256 of the training manifest, if any.
    pub dataset_digest: Option<String>,
}

/// One N x d prefix per shot label.
#[derive(Clone, Debug, PartialEq)]
pub struct ShotPrefixTable {
    dims: PrefixDims,
    vocab: ShotVocabulary,
    entries: Vec<Matrix>,
    pub version: u32,
    pub training_meta: TrainingMeta,
}

impl ShotPrefixTable {
    pub fn zeros(vocab: &ShotVocabulary, dims: PrefixDims) -> Self {
        Self {
            dims,
            vocab: vocab.clone(),
            entries: vec![Matrix::zeros(dims.n, dims.d); vocab.len()],
            version: 1,
            training_meta: TrainingMeta::default(),
        }
    }

    pub fn dims(&self) -> PrefixDims {
        self.dims
    }

    pub fn vocab(&self) -> &ShotVocabulary {
        &self.vocab
    }

    pub fn entries(&self) -> &[Matrix] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Matrix] {
        &mut self.entries
    }

    pub fn get(&self, shot: &ShotType) -> Result<&Matrix, PrefixError> {
        self.vocab
            .index_of(shot)
            .map(|i| &self.entries[i])
            .ok_or_else(|| PrefixError::UnknownShot(shot.clone()))
    }

    /// Drops `shot` from the table (used to exercise unknown-shot paths).
    pub fn without(&self, shot: &ShotType) -> Self {
        let keep: Vec<usize> = (0..self.vocab.len())
            .filter(|&i| &self.vocab.labels()[i] != shot)
            .collect();
        Self {
            dims: self.dims,
            vocab: ShotVocabulary::new(keep.iter().map(|&i| self.vocab.labels()[i].label())),
            entries: keep.iter().map(|&i| self.entries[i].clone()).collect(),
            version: self.version,
            training_meta: self.training_meta.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(Matrix::is_finite)
    }

    /// SHA-256 of the encoded table, checksum excluded.
    pub fn digest(&self) -> String {
        let bytes = self.to_bytes();
        hex::encode(&bytes[bytes.len() - 32..])
    }

    /// Checks the table against the configured dims and vocabulary.
    pub fn check_compatible(&self, vocab: &ShotVocabulary, dims: PrefixDims) -> Result<(), PrefixError> {
        if self.dims != dims {
            return Err(PrefixError::DimMismatch {
                found_d: self.dims.d,
                found_n: self.dims.n,
                expected_d: dims.d,
                expected_n: dims.n,
            });
        }
        let extra: Vec<String> = self
            .vocab
            .iter()
            .filter(|s| !vocab.contains(s))
            .map(|s| s.to_string())
            .collect();
        let missing: Vec<String> = vocab
            .iter()
            .filter(|s| !self.vocab.contains(s))
            .map(|s| s.to_string())
            .collect();
        if !extra.is_empty() || !missing.is_empty() {
            return Err(PrefixError::VocabMismatch { extra, missing });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.dims.d as u32).to_le_bytes());
        out.extend_from_slice(&(self.dims.n as u32).to_le_bytes());
        out.extend_from_slice(&(self.vocab.len() as u32).to_le_bytes());
        for label in self.vocab.iter() {
            let b = label.label().as_bytes();
            out.extend_from_slice(&(b.len() as u16).to_le_bytes());
            out.extend_from_slice(b);
        }
        out.extend_from_slice(&self.training_meta.iterations.to_le_bytes());
        let mut digest = [0u8; 32];
        if let Some(d) = &self.training_meta.dataset_digest {
            if let Ok(raw) = hex::decode(d) {
                if raw.len() == 32 {
                    digest.copy_from_slice(&raw);
                }
            }
        }
        out.extend_from_slice(&digest);
        for m in &self.entries {
            out.extend_from_slice(&m.to_le_bytes());
        }
        let checksum = Sha256::digest(&out);
        out.extend_from_slice(&checksum);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PrefixError> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..8] != MAGIC {
            return Err(PrefixError::Format("bad magic".into()));
        }
        let (body, checksum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != checksum {
            return Err(PrefixError::Checksum);
        }
        let mut r = Reader { buf: body, pos: 8 };
        let format = r.u32()?;
        if format != FORMAT_VERSION {
            return Err(PrefixError::Format(format!("format version {format}")));
        }
        let version = r.u32()?;
        let d = r.u32()? as usize;
        let n = r.u32()? as usize;
        let count = r.u32()? as usize;
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let raw = r.take(len)?;
            labels.push(
                String::from_utf8(raw.to_vec()).map_err(|_| PrefixError::Format("label is not UTF-8".into()))?,
            );
        }
        let iterations = r.u64()?;
        let digest = r.take(32)?;
        let dataset_digest = digest.iter().any(|&b| b != 0).then(|| hex::encode(digest));
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let raw = r.take(n * d * 4)?;
            entries.push(Matrix::from_le_bytes(n, d, raw).map_err(|e| PrefixError::Format(e.to_string()))?);
        }
        if r.pos != body.len() {
            return Err(PrefixError::Format("trailing bytes".into()));
        }
        let vocab = ShotVocabulary::new(&labels);
        if vocab.len() != labels.len() {
            return Err(PrefixError::Format("duplicate labels".into()));
        }
        let table = Self {
            dims: PrefixDims { d, n },
            vocab,
            entries,
            version,
            training_meta: TrainingMeta {
                iterations,
                dataset_digest,
            },
        };
        if !table.is_finite() {
            return Err(PrefixError::NonFinite);
        }
        Ok(table)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PrefixError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| PrefixError::Format("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16, PrefixError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, PrefixError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, PrefixError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Seeded initialisation with values drawn i.i.d. from N(0, 0.02^2).
pub fn init_prefix_table(vocab: &ShotVocabulary, d: usize, n: usize, seed: u64) -> ShotPrefixTable {
    assert!(d >= 1 && n >= 1, "prefix dims must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
    let dims = PrefixDims { d, n };
    let mut table = ShotPrefixTable::zeros(vocab, dims);
    for m in table.entries.iter_mut() {
        for v in m.as_mut_slice() {
            *v = normal.sample(&mut rng) as f32;
        }
    }
    table
}

pub fn save_table(table: &ShotPrefixTable, path: impl AsRef<Path>) -> Result<(), PrefixError> {
    write_atomic(path.as_ref(), &table.to_bytes())?;
    Ok(())
}

/// Loads a table and checks it against the current configuration.
pub fn load_table(
    path: impl AsRef<Path>,
    vocab: &ShotVocabulary,
    dims: PrefixDims,
) -> Result<ShotPrefixTable, PrefixError> {
    let table = ShotPrefixTable::from_bytes(&fs::read(path)?)?;
    table.check_compatible(vocab, dims)?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::story::shot_vocabulary;

    #[test]
    fn init_is_seeded() {
        let v = shot_vocabulary();
        let a = init_prefix_table(&v, 2048, 30, 7);
        let b = init_prefix_table(&v, 2048, 30, 7);
        let c = init_prefix_table(&v, 2048, 30, 8);
        assert_eq!(a.entries().len(), 5);
        assert!(a.entries().iter().all(|m| m.rows() == 30 && m.cols() == 2048));
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn init_sample_mean_is_near_zero() {
        let t = init_prefix_table(&shot_vocabulary(), 2048, 30, 7);
        let values: Vec<f64> = t.entries().iter().flat_map(|m| m.as_slice()).map(|&v| v as f64).collect();
        let count = values.len() as f64;
        let mean = values.iter().sum::<f64>() / count;
        assert!(mean.abs() < 3.0 * INIT_STD / count.sqrt(), "mean {mean}");
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
        assert!((var.sqrt() - INIT_STD).abs() < 1e-3);
    }

    #[test]
    fn file_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let mut t = init_prefix_table(&shot_vocabulary(), 16, 3, 1);
        t.training_meta = TrainingMeta {
            iterations: 4000,
            dataset_digest: Some(crate::asset::sha256_hex(b"data")),
        };
        save_table(&t, &path).unwrap();
        let back = load_table(&path, &shot_vocabulary(), PrefixDims { d: 16, n: 3 }).unwrap();
        assert_eq!(back.to_bytes(), t.to_bytes());
        assert_eq!(back, t);
    }

    #[test]
    fn dim_and_vocab_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        save_table(&init_prefix_table(&shot_vocabulary(), 1024, 30, 1), &path).unwrap();
        assert!(matches!(
            load_table(&path, &shot_vocabulary(), PrefixDims { d: 2048, n: 30 }),
            Err(PrefixError::DimMismatch { found_d: 1024, .. })
        ));

        let mut labels: Vec<String> = shot_vocabulary().iter().map(|s| s.to_string()).collect();
        labels.push("dutch-angle".into());
        save_table(&init_prefix_table(&ShotVocabulary::new(&labels), 8, 2, 1), &path).unwrap();
        match load_table(&path, &shot_vocabulary(), PrefixDims { d: 8, n: 2 }) {
            Err(PrefixError::VocabMismatch { extra, missing }) => {
                assert_eq!(extra, ["dutch-angle"]);
                assert!(missing.is_empty());
            }
            other => panic!("expected vocab mismatch, got {other:?}"),
        }
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = init_prefix_table(&shot_vocabulary(), 8, 2, 1).to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        assert!(matches!(ShotPrefixTable::from_bytes(&bytes), Err(PrefixError::Checksum)));
    }
}
