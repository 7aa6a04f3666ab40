mod common;

use std::collections::BTreeSet;

use common::key;
use image::{Rgb, RgbImage};
use proptest::prelude::*;
use vstory_core::asset::{sha256_hex, AssetRef};
use vstory_core::memory::{scale_reference, scaled_dims, MemoryBank, MemoryError};
use vstory_core::mock::encode_png;
use vstory_core::story::*;

const CHARS: [&str; 4] = ["ana", "ben", "cai", "dee"];
const BGS: [&str; 3] = ["park", "pier", "cave"];

#[derive(Clone, Debug)]
struct LogFrame {
    index: u32,
    chars: BTreeSet<usize>,
    bg: Option<usize>,
    superseded: bool,
}

fn asset(tag: &str) -> AssetRef {
    AssetRef {
        sha256: sha256_hex(tag.as_bytes()),
        ext: "png".into(),
    }
}

fn bank(log: &[LogFrame], matching: CharacterMatch) -> MemoryBank {
    let mut b = MemoryBank::new(matching);
    for (names, kind) in [(&CHARS[..], RefKind::Character), (&BGS[..], RefKind::Background)] {
        for n in names {
            b.insert_static(
                ReferenceEntry {
                    key: key(n),
                    kind,
                    asset: Some(asset(n)),
                    caption: String::new(),
                    origin: Origin::UserSupplied,
                },
                false,
            )
            .unwrap();
        }
    }
    let mut superseded_from = None;
    for f in log {
        b.insert_keyframe(
            f.index,
            asset(&format!("f{}", f.index)),
            f.chars.iter().map(|&c| key(CHARS[c])),
            f.bg.map(|g| key(BGS[g])),
        )
        .unwrap();
        if f.superseded && superseded_from.is_none() {
            superseded_from = Some(f.index);
        }
    }
    if let Some(from) = superseded_from {
        b.supersede_from(from);
    }
    b
}

/// Brute force: filter, sort most recent first, truncate.
fn oracle(log: &[LogFrame], chars: &BTreeSet<usize>, bg: Option<usize>, mu: usize, t: u32, exact: bool) -> Vec<u32> {
    let Some(bg) = bg else { return Vec::new() };
    let cut = log.iter().find(|f| f.superseded).map(|f| f.index).unwrap_or(u32::MAX);
    let mut hits: Vec<u32> = log
        .iter()
        .filter(|f| f.index < cut && f.index < t && f.bg == Some(bg))
        .filter(|f| {
            if exact {
                !chars.is_empty() && &f.chars == chars
            } else {
                !f.chars.is_disjoint(chars)
            }
        })
        .map(|f| f.index)
        .collect();
    hits.sort_unstable_by(|a, b| b.cmp(a));
    hits.truncate(mu);
    hits
}

fn log_strategy() -> impl Strategy<Value = Vec<LogFrame>> {
    prop::collection::vec(
        (
            1u32..4,
            prop::collection::btree_set(0usize..4, 0..3),
            prop::option::weighted(0.9, 0usize..3),
        ),
        0..64,
    )
    .prop_flat_map(|frames| {
        let n = frames.len();
        (Just(frames), 0..=n)
    })
    .prop_map(|(frames, cut)| {
        let mut index = 0;
        frames
            .into_iter()
            .enumerate()
            .map(|(i, (step, chars, bg))| {
                index += step;
                LogFrame {
                    index,
                    chars,
                    bg,
                    superseded: i >= cut,
                }
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn retrieve_matches_oracle(
        log in log_strategy(),
        chars in prop::collection::btree_set(0usize..4, 0..4),
        bg in prop::option::weighted(0.9, 0usize..3),
        mu in 0usize..6,
        t_extra in 0u32..200,
        exact in any::<bool>(),
    ) {
        let matching = if exact { CharacterMatch::Exact } else { CharacterMatch::Intersect };
        let b = bank(&log, matching);
        let t = t_extra + 1;
        let qc: Vec<RefKey> = chars.iter().map(|&c| key(CHARS[c])).collect();
        let qb = bg.map(|g| key(BGS[g]));
        let rs = b.retrieve(&qc, qb.as_ref(), mu, t).unwrap();
        let got: Vec<u32> = rs.recents.iter().map(|r| r.index).collect();
        prop_assert_eq!(got, oracle(&log, &chars, bg, mu, t, exact));
        prop_assert_eq!(rs.statics.len(), qc.len() + usize::from(qb.is_some()));
        for (s, k) in rs.statics.iter().zip(qc.iter().chain(qb.iter())) {
            prop_assert_eq!(&s.key, k);
        }
    }
}

#[test]
fn query_with_unknown_key_fails() {
    let b = bank(&[], CharacterMatch::Intersect);
    let err = b.retrieve(&[key("zed")], None, 1, 1).unwrap_err();
    assert!(matches!(err, MemoryError::UnresolvedKey { .. }));
}

#[test]
fn out_of_order_after_supersede_is_allowed() {
    let mut b = bank(&[], CharacterMatch::Intersect);
    b.insert_keyframe(1, asset("a"), [key("ana")], Some(key("park"))).unwrap();
    b.insert_keyframe(2, asset("b"), [key("ana")], Some(key("park"))).unwrap();
    b.supersede_from(2);
    b.insert_keyframe(2, asset("b2"), [key("ana")], Some(key("park"))).unwrap();
    let rs = b.retrieve(&[key("ana")], Some(&key("park")), 5, 3).unwrap();
    let got: Vec<_> = rs.recents.iter().map(|r| r.asset.clone()).collect();
    assert_eq!(got, vec![asset("b2"), asset("a")]);
}

fn png(w: u32, h: u32) -> Vec<u8> {
    encode_png(&RgbImage::from_fn(w, h, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, 77])))
}

#[test]
fn alpha_grid_dimension_rule() {
    for (w, h) in [(1024, 1024), (1024, 768), (333, 97), (1, 1)] {
        let bytes = png(w, h);
        for alpha in [0.125, 0.25, 0.5, 0.75, 1.0] {
            let out = scale_reference(&bytes, alpha).unwrap();
            let img = image::load_from_memory(&out).unwrap();
            let want = (
                ((alpha * w as f64).round() as u32).max(1),
                ((alpha * h as f64).round() as u32).max(1),
            );
            assert_eq!((img.width(), img.height()), want, "{w}x{h} at {alpha}");
            assert_eq!(scaled_dims(w, h, alpha), want);
            if alpha == 1.0 {
                assert_eq!(out, bytes);
            }
        }
    }
    assert_eq!(scaled_dims(1024, 768, 0.75), (768, 576));
    assert_eq!(scaled_dims(1024, 1024, 0.5), (512, 512));
    assert!(matches!(scale_reference(&png(4, 4), 0.0), Err(MemoryError::NonPositiveAlpha(_))));
    assert!(matches!(scale_reference(&png(4, 4), 1.5), Err(MemoryError::AlphaAboveOne(_))));
}
