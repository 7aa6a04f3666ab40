//! Content-addressed asset storage.
//!
//! Every image, clip or other binary blob is stored as `<sha256>.<ext>` and
//! referenced by its digest. Metadata never refers to a mutable path.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AssetError {
    #[error("asset {sha256} is corrupt: stored bytes hash to {actual}")]
    Corrupt { sha256: String, actual: String },
    #[error("asset {sha256} is missing from {dir}")]
    Missing { sha256: String, dir: PathBuf },
    #[error("not a valid sha256 digest: {0:?}")]
    BadDigest(String),
    #[error("image inspection failed: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Hex-encoded SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Raw SHA-256 of `bytes`.
pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

/// Handle to a stored blob.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AssetRef {
    pub sha256: String,
    pub ext: String,
}

impl AssetRef {
    pub fn file_name(&self) -> String {
        format!("{}.{}", self.sha256, self.ext)
    }
}

pub fn is_sha256_hex(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

/// File extension guessed from the encoded bytes.
pub fn sniff_ext(bytes: &[u8]) -> &'static str {
    match image::guess_format(bytes) {
        Ok(image::ImageFormat::Png) => "png",
        Ok(image::ImageFormat::Jpeg) => "jpg",
        Ok(image::ImageFormat::WebP) => "webp",
        Ok(image::ImageFormat::Gif) => "gif",
        _ if bytes.len() > 8 && &bytes[4..8] == b"ftyp" => "mp4",
        _ => "bin",
    }
}

/// Width and height of an encoded image, read from its header only.
pub fn image_dims(bytes: &[u8]) -> Result<(u32, u32), AssetError> {
    image::ImageReader::new(std::io::Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| AssetError::Image(e.to_string()))?
        .into_dimensions()
        .map_err(|e| AssetError::Image(e.to_string()))
}

/// A directory of content-addressed blobs.
#[derive(Clone, Debug)]
pub struct AssetStore {
    dir: PathBuf,
}

impl AssetStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, AssetError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_of(&self, asset: &AssetRef) -> PathBuf {
        self.dir.join(asset.file_name())
    }

    /// Stores `bytes`, sniffing the extension. Idempotent.
    pub fn put(&self, bytes: &[u8]) -> Result<AssetRef, AssetError> {
        self.put_with_ext(bytes, sniff_ext(bytes))
    }

    pub fn put_with_ext(&self, bytes: &[u8], ext: &str) -> Result<AssetRef, AssetError> {
        let asset = AssetRef {
            sha256: sha256_hex(bytes),
            ext: ext.to_string(),
        };
        let path = self.path_of(&asset);
        if !path.exists() {
            write_atomic(&path, bytes)?;
        }
        Ok(asset)
    }

    pub fn contains(&self, asset: &AssetRef) -> bool {
        self.path_of(asset).exists()
    }

    /// Reads an asset and checks its digest.
    pub fn get(&self, asset: &AssetRef) -> Result<Vec<u8>, AssetError> {
        if !is_sha256_hex(&asset.sha256) {
            return Err(AssetError::BadDigest(asset.sha256.clone()));
        }
        let path = self.path_of(asset);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(AssetError::Missing {
                    sha256: asset.sha256.clone(),
                    dir: self.dir.clone(),
                })
            }
            Err(e) => return Err(e.into()),
        };
        let actual = sha256_hex(&bytes);
        if actual != asset.sha256 {
            return Err(AssetError::Corrupt {
                sha256: asset.sha256.clone(),
                actual,
            });
        }
        Ok(bytes)
    }

    pub fn verify(&self, asset: &AssetRef) -> Result<(), AssetError> {
        self.get(asset).map(|_| ())
    }

    /// Looks an asset up by digest alone, whatever its extension.
    pub fn find(&self, sha256: &str) -> Result<Option<AssetRef>, AssetError> {
        if !is_sha256_hex(sha256) {
            return Err(AssetError::BadDigest(sha256.to_string()));
        }
        for entry in fs::read_dir(&self.dir)? {
            let name = entry?.file_name();
            let name = name.to_string_lossy();
            if let Some((stem, ext)) = name.split_once('.') {
                if stem == sha256 && !ext.ends_with("tmp") {
                    return Ok(Some(AssetRef {
                        sha256: sha256.to_string(),
                        ext: ext.to_string(),
                    }));
                }
            }
        }
        Ok(None)
    }
}

/// Writes through a sibling temp file and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(
        ".{}.{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("file"),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn put_get_roundtrip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let store = AssetStore::open(dir.path()).unwrap();
        let asset = store.put(b"hello").unwrap();
        assert_eq!(
            asset.sha256,
            "2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824"
        );
        assert_eq!(asset.ext, "bin");
        assert_eq!(store.get(&asset).unwrap(), b"hello");
        assert_eq!(store.find(&asset.sha256).unwrap(), Some(asset.clone()));

        fs::write(store.path_of(&asset), b"tampered").unwrap();
        assert!(matches!(store.get(&asset), Err(AssetError::Corrupt { .. })));
    }

    #[test]
    fn missing_asset() {
        let dir = tempfile::tempdir().unwrap();
        let store = AssetStore::open(dir.path()).unwrap();
        let asset = AssetRef {
            sha256: "0".repeat(64),
            ext: "png".into(),
        };
        assert!(matches!(store.get(&asset), Err(AssetError::Missing { .. })));
    }
}
