//! Visual reference memory bank.
//!
//! A per-story key-value store holding the static character/background
//! references and the log of generated keyframes. Retrieval is structured:
//! the script's mention keys select the static images, and the `mu` most
//! recent keyframes that share a character and the background are added as
//! temporal conditioning.

use std::collections::{BTreeMap, BTreeSet};

use image::imageops::FilterType;
use thiserror::Error;

use crate::asset::AssetRef;
use crate::story::{CharacterMatch, RefKey, RefKind, ReferenceEntry};

#[derive(Debug, Error, PartialEq)]
pub enum MemoryError {
    #[error("DUPLICATE_KEY: {kind:?} {key} is already in the bank")]
    DuplicateKey { key: RefKey, kind: RefKind },
    #[error("OUT_OF_ORDER_INSERT: frame {index} is not after frame {last}")]
    OutOfOrderInsert { index: u32, last: u32 },
    #[error("UNRESOLVED_KEY: {kind:?} {key}")]
    UnresolvedKey { key: RefKey, kind: RefKind },
    #[error("reference {key} has no image")]
    MissingAsset { key: RefKey },
    #[error("NONPOSITIVE_ALPHA: {0}")]
    NonPositiveAlpha(f64),
    #[error("alpha {0} is above 1")]
    AlphaAboveOne(f64),
    #[error("image scaling failed: {0}")]
    Image(String),
}

/// One generated keyframe as seen by retrieval.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameEntry {
    pub index: u32,
    pub asset: AssetRef,
    pub characters: BTreeSet<RefKey>,
    pub background: Option<RefKey>,
    pub superseded: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StaticRef {
    pub key: RefKey,
    pub kind: RefKind,
    pub asset: AssetRef,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecentFrame {
    pub index: u32,
    pub asset: AssetRef,
}

/// References selected for one script.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RetrievalSet {
    /// Queried characters in mention order, then the background.
    pub statics: Vec<StaticRef>,
    /// Most recent first.
    pub recents: Vec<RecentFrame>,
}

impl RetrievalSet {
    pub fn is_empty(&self) -> bool {
        self.statics.is_empty() && self.recents.is_empty()
    }
}

#[derive(Clone, Debug, Default)]
pub struct MemoryBank {
    statics: BTreeMap<(RefKind, RefKey), ReferenceEntry>,
    frames: Vec<FrameEntry>,
    matching: CharacterMatch,
}

impl MemoryBank {
    pub fn new(matching: CharacterMatch) -> Self {
        Self {
            matching,
            ..Self::default()
        }
    }

    /// Adds a static reference. Keys are canonical by construction, so
    /// `"Hero "` and `"hero"` land on the same slot.
    pub fn insert_static(&mut self, entry: ReferenceEntry, replace: bool) -> Result<(), MemoryError> {
        let slot = (entry.kind, entry.key.clone());
        if !replace && self.statics.contains_key(&slot) {
            return Err(MemoryError::DuplicateKey {
                key: entry.key,
                kind: entry.kind,
            });
        }
        self.statics.insert(slot, entry);
        Ok(())
    }

    pub fn lookup(&self, kind: RefKind, key: &RefKey) -> Option<&ReferenceEntry> {
        self.statics.get(&(kind, key.clone()))
    }

    pub fn frames(&self) -> &[FrameEntry] {
        &self.frames
    }

    fn last_live_index(&self) -> Option<u32> {
        self.frames
            .iter()
            .filter(|f| !f.superseded)
            .map(|f| f.index)
            .max()
    }

    /// Appends a keyframe; its index must exceed every live frame's index.
    pub fn insert_keyframe(
        &mut self,
        index: u32,
        asset: AssetRef,
        characters: impl IntoIterator<Item = RefKey>,
        background: Option<RefKey>,
    ) -> Result<(), MemoryError> {
        if let Some(last) = self.last_live_index() {
            if index <= last {
                return Err(MemoryError::OutOfOrderInsert { index, last });
            }
        }
        self.frames.push(FrameEntry {
            index,
            asset,
            characters: characters.into_iter().collect(),
            background,
            superseded: false,
        });
        Ok(())
    }

    /// Marks every live frame with index >= `from` superseded.
    pub fn supersede_from(&mut self, from: u32) {
        for f in self.frames.iter_mut().filter(|f| f.index >= from) {
            f.superseded = true;
        }
    }

    fn shares_characters(&self, frame: &FrameEntry, query: &BTreeSet<RefKey>) -> bool {
        match self.matching {
            CharacterMatch::Intersect => !frame.characters.is_disjoint(query),
            CharacterMatch::Exact => !query.is_empty() && &frame.characters == query,
        }
    }

    /// Structured retrieval for the script at position `t`.
    pub fn retrieve(
        &self,
        characters: &[RefKey],
        background: Option<&RefKey>,
        mu: usize,
        t: u32,
    ) -> Result<RetrievalSet, MemoryError> {
        let mut statics = Vec::with_capacity(characters.len() + 1);
        let queried = characters
            .iter()
            .map(|k| (RefKind::Character, k))
            .chain(background.map(|b| (RefKind::Background, b)));
        for (kind, key) in queried {
            let entry = self
                .lookup(kind, key)
                .ok_or_else(|| MemoryError::UnresolvedKey {
                    key: key.clone(),
                    kind,
                })?;
            let asset = entry
                .asset
                .clone()
                .ok_or_else(|| MemoryError::MissingAsset { key: key.clone() })?;
            statics.push(StaticRef {
                key: key.clone(),
                kind,
                asset,
            });
        }

        let query: BTreeSet<RefKey> = characters.iter().cloned().collect();
        // Frames without a background never match.
        let recents = match background {
            None => Vec::new(),
            Some(bg) => self
                .frames
                .iter()
                .rev()
                .filter(|f| {
                    !f.superseded
                        && f.index < t
                        && f.background.as_ref() == Some(bg)
                        && self.shares_characters(f, &query)
                })
                .take(mu)
                .map(|f| RecentFrame {
                    index: f.index,
                    asset: f.asset.clone(),
                })
                .collect(),
        };
        Ok(RetrievalSet { statics, recents })
    }
}

/// Output dimensions of [`scale_reference`].
pub fn scaled_dims(width: u32, height: u32, alpha: f64) -> (u32, u32) {
    let scale = |v: u32| ((alpha * v as f64).round() as u32).max(1);
    (scale(width), scale(height))
}

fn check_alpha(alpha: f64) -> Result<(), MemoryError> {
    if alpha.is_nan() || alpha <= 0.0 {
        return Err(MemoryError::NonPositiveAlpha(alpha));
    }
    if alpha > 1.0 {
        return Err(MemoryError::AlphaAboveOne(alpha));
    }
    Ok(())
}

/// Scales each spatial dimension by `alpha`. `alpha == 1` returns the input
/// bytes untouched; anything else is re-encoded as PNG.
pub fn scale_reference(image_bytes: &[u8], alpha: f64) -> Result<Vec<u8>, MemoryError> {
    check_alpha(alpha)?;
    if alpha == 1.0 {
        return Ok(image_bytes.to_vec());
    }
    let img = image::load_from_memory(image_bytes).map_err(|e| MemoryError::Image(e.to_string()))?;
    let (w, h) = scaled_dims(img.width(), img.height(), alpha);
    let resized = img.resize_exact(w, h, FilterType::Triangle);
    let mut out = std::io::Cursor::new(Vec::new());
    resized
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| MemoryError::Image(e.to_string()))?;
    Ok(out.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asset::sha256_hex;
    use crate::story::Origin;

    fn key(s: &str) -> RefKey {
        RefKey::new(s).unwrap()
    }

    fn asset(tag: &str) -> AssetRef {
        AssetRef {
            sha256: sha256_hex(tag.as_bytes()),
            ext: "png".into(),
        }
    }

    fn reference(k: &str, kind: RefKind) -> ReferenceEntry {
        ReferenceEntry {
            key: key(k),
            kind,
            asset: Some(asset(k)),
            caption: String::new(),
            origin: Origin::UserSupplied,
        }
    }

    fn bank() -> MemoryBank {
        let mut b = MemoryBank::new(CharacterMatch::Intersect);
        for (k, kind) in [
            ("hero", RefKind::Character),
            ("villain", RefKind::Character),
            ("park", RefKind::Background),
            ("castle", RefKind::Background),
        ] {
            b.insert_static(reference(k, kind), false).unwrap();
        }
        b
    }

    fn logged_bank() -> MemoryBank {
        let mut b = bank();
        b.insert_keyframe(1, asset("f1"), [key("hero")], Some(key("park"))).unwrap();
        b.insert_keyframe(2, asset("f2"), [key("villain")], Some(key("park"))).unwrap();
        b.insert_keyframe(3, asset("f3"), [key("hero")], Some(key("castle"))).unwrap();
        b
    }

    fn indices(rs: &RetrievalSet) -> Vec<u32> {
        rs.recents.iter().map(|r| r.index).collect()
    }

    #[test]
    fn static_insert_lookup_and_duplicates() {
        let mut b = MemoryBank::default();
        let hero = reference("hero", RefKind::Character);
        b.insert_static(hero.clone(), false).unwrap();
        assert_eq!(b.lookup(RefKind::Character, &key("hero")), Some(&hero));
        assert!(matches!(
            b.insert_static(hero.clone(), false),
            Err(MemoryError::DuplicateKey { .. })
        ));
        b.insert_static(hero, true).unwrap();
    }

    #[test]
    fn uncanonical_key_is_stored_canonically() {
        let mut b = MemoryBank::default();
        let mut e = reference("x", RefKind::Character);
        e.key = RefKey::new("Hero ").unwrap();
        b.insert_static(e, false).unwrap();
        assert!(b.lookup(RefKind::Character, &key("hero")).is_some());
    }

    #[test]
    fn keyframes_must_arrive_in_order() {
        let mut b = bank();
        b.insert_keyframe(1, asset("a"), [key("hero")], None).unwrap();
        b.insert_keyframe(2, asset("b"), [key("hero")], None).unwrap();
        assert_eq!(b.frames().len(), 2);

        let mut b = bank();
        b.insert_keyframe(2, asset("b"), [key("hero")], None).unwrap();
        assert_eq!(
            b.insert_keyframe(1, asset("a"), [key("hero")], None),
            Err(MemoryError::OutOfOrderInsert { index: 1, last: 2 })
        );
    }

    #[test]
    fn superseded_frames_are_not_retrieved() {
        let mut b = bank();
        b.insert_keyframe(1, asset("f1"), [key("hero")], Some(key("park"))).unwrap();
        b.insert_keyframe(2, asset("f2"), [key("hero")], Some(key("park"))).unwrap();
        b.supersede_from(2);
        b.insert_keyframe(2, asset("f2b"), [key("hero")], Some(key("park"))).unwrap();
        let rs = b.retrieve(&[key("hero")], Some(&key("park")), 5, 3).unwrap();
        assert_eq!(
            rs.recents,
            vec![
                RecentFrame { index: 2, asset: asset("f2b") },
                RecentFrame { index: 1, asset: asset("f1") }
            ]
        );
    }

    #[test]
    fn empty_log_gives_statics_only() {
        let rs = bank().retrieve(&[key("hero")], Some(&key("park")), 1, 1).unwrap();
        assert_eq!(rs.statics.len(), 2);
        assert!(rs.recents.is_empty());
    }

    #[test]
    fn single_subject_query() {
        let rs = logged_bank()
            .retrieve(&[key("hero")], Some(&key("park")), 2, 4)
            .unwrap();
        assert_eq!(indices(&rs), [1]);
    }

    #[test]
    fn multi_subject_query() {
        let rs = logged_bank()
            .retrieve(&[key("hero"), key("villain")], Some(&key("park")), 2, 4)
            .unwrap();
        assert_eq!(indices(&rs), [2, 1]);
        let keys: Vec<_> = rs.statics.iter().map(|s| s.key.as_str()).collect();
        assert_eq!(keys, ["hero", "villain", "park"]);
    }

    #[test]
    fn exact_match_mode() {
        let mut b = bank();
        b.matching = CharacterMatch::Exact;
        b.insert_keyframe(1, asset("f1"), [key("hero"), key("villain")], Some(key("park"))).unwrap();
        b.insert_keyframe(2, asset("f2"), [key("hero")], Some(key("park"))).unwrap();
        let rs = b.retrieve(&[key("hero")], Some(&key("park")), 2, 3).unwrap();
        assert_eq!(indices(&rs), [2]);
    }

    #[test]
    fn unresolved_key() {
        assert!(matches!(
            bank().retrieve(&[key("ghost")], None, 1, 1),
            Err(MemoryError::UnresolvedKey { .. })
        ));
    }

    fn png(w: u32, h: u32) -> Vec<u8> {
        let img = image::RgbImage::from_fn(w, h, |x, y| image::Rgb([(x % 256) as u8, (y % 256) as u8, 7]));
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png).unwrap();
        out.into_inner()
    }

    #[test]
    fn scaling_rules() {
        let img = png(64, 48);
        assert_eq!(scale_reference(&img, 1.0).unwrap(), img);
        let half = scale_reference(&img, 0.5).unwrap();
        assert_eq!(crate::asset::image_dims(&half).unwrap(), (32, 24));
        assert_eq!(scaled_dims(1024, 1024, 0.5), (512, 512));
        assert_eq!(scaled_dims(1024, 768, 0.75), (768, 576));
        assert_eq!(scale_reference(&img, 0.0), Err(MemoryError::NonPositiveAlpha(0.0)));
        assert_eq!(scale_reference(&img, -1.0), Err(MemoryError::NonPositiveAlpha(-1.0)));
    }
}
