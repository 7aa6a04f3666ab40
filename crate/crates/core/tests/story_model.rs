mod common;

use common::*;
use proptest::prelude::*;
use vstory_core::asset::AssetStore;
use vstory_core::project_io::{decode_project, encode_project, load_project, save_project, ProjectIoError};
use vstory_core::story::*;

fn eight(assets: &AssetStore) -> StoryProject {
    let shots = ["long", "full", "medium", "close-up", "extreme-close-up", "medium", "full", "long"];
    let specs: Vec<(&[&str], Option<&str>, &str)> = (0..8)
        .map(|i| {
            let c: &[&str] = if i % 2 == 0 { &["hero"] } else { &["hero", "villain"] };
            (c, Some(if i < 4 { "park" } else { "castle" }), shots[i])
        })
        .collect();
    project(assets, &specs)
}

#[test]
fn eight_script_project_is_clean() {
    let dir = tempfile::tempdir().unwrap();
    let p = eight(&AssetStore::open(dir.path()).unwrap());
    let r = validate_project(&p);
    assert!(r.violations.is_empty(), "{:?}", r.violations);
}

#[test]
fn every_violation_is_collected() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = eight(&AssetStore::open(dir.path()).unwrap());
    p.scripts[0].characters.push(key("ghost"));
    p.scripts[1].prompt = "  ".into();
    p.scripts.remove(2);
    p.config.alpha = 0.0;
    let codes = validate_project(&p).codes();
    for c in ["UNRESOLVED_MENTION", "EMPTY_PROMPT", "INDEX_GAP", "INVALID_CONFIG"] {
        assert!(codes.contains(c), "missing {c} in {codes:?}");
    }
}

#[test]
fn indices_one_two_four_report_gap_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = eight(&AssetStore::open(dir.path()).unwrap());
    p.scripts.truncate(4);
    p.scripts.remove(2);
    let r = validate_project(&p);
    assert!(r.violations.contains(&Violation::IndexGap { missing: 3 }));
}

#[test]
fn keyframe_constraints() {
    let dir = tempfile::tempdir().unwrap();
    let assets = AssetStore::open(dir.path()).unwrap();
    let mut p = eight(&assets);
    let k = KeyframeRecord {
        script_index: 9,
        asset: p.roster[0].asset.clone().unwrap(),
        retrieval_manifest: vec![],
        shot: shot("medium"),
        locked: false,
        superseded: false,
        lineage: Lineage::default(),
    };
    p.keyframes.push(k.clone());
    let mut k2 = k.clone();
    k2.script_index = 1;
    p.keyframes.push(k2.clone());
    p.keyframes.push(k2);
    let codes = validate_project(&p).codes();
    assert!(codes.contains("KEYFRAME_UNKNOWN_SCRIPT"));
    assert!(codes.contains("MULTIPLE_CURRENT_KEYFRAMES"));
}

#[test]
fn roundtrip_with_references_and_keyframes() {
    let dir = tempfile::tempdir().unwrap();
    let assets = AssetStore::open(dir.path().join("assets")).unwrap();
    let mut p = project(
        &assets,
        &[
            (&["hero"], Some("park"), "medium"),
            (&["hero"], Some("park"), "long"),
            (&["hero"], Some("park"), "full"),
        ],
    );
    p.roster.truncate(3);
    p.roster.remove(1);
    for t in 1..=3u32 {
        p.keyframes.push(KeyframeRecord {
            script_index: t,
            asset: p.roster[0].asset.clone().unwrap(),
            retrieval_manifest: vec![ManifestItem {
                source: ConditionSource::Frame { index: t.saturating_sub(1) },
                asset: p.roster[1].asset.clone().unwrap(),
                scale: 0.75,
            }],
            shot: p.scripts[t as usize - 1].shot.clone(),
            locked: t == 2,
            superseded: false,
            lineage: Lineage {
                generation: 0,
                decode_seed: t as u64 * 31,
                encode_seed: 7,
                prompt_group: p.scripts.iter().map(|s| s.prompt.clone()).collect(),
                prompt_position: t as usize - 1,
                shot_table_digest: "ab".into(),
                state_digest: "cd".into(),
                latent_id: "ef".into(),
                call_ids: vec!["text_encode:0011223344556677".into()],
            },
        });
    }
    save_project(&p, dir.path()).unwrap();
    let back = load_project(dir.path()).unwrap();
    assert_eq!(back, p);
    assert_eq!(encode_project(&back).unwrap(), std::fs::read(dir.path().join("project.json")).unwrap());
}

#[test]
fn schema_version_zero_is_refused() {
    let mut v = serde_json::to_value(StoryProject::new("x", "y")).unwrap();
    v["schema_version"] = "0".into();
    let err = decode_project(&serde_json::to_vec(&v).unwrap()).unwrap_err();
    assert!(matches!(err, ProjectIoError::Migration { .. }), "{err:?}");
}

#[test]
fn shipped_schema_names_every_top_level_field() {
    let schema: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fixtures().join("../docs/schemas/project.schema.json")).unwrap()).unwrap();
    let v = serde_json::to_value(StoryProject::new("x", "y")).unwrap();
    let props = schema["properties"].as_object().unwrap();
    for k in v.as_object().unwrap().keys() {
        assert!(props.contains_key(k), "schema lacks {k}");
    }
}

fn label() -> impl Strategy<Value = String> {
    prop::sample::select(DEFAULT_SHOT_LABELS.to_vec()).prop_map(str::to_string)
}

proptest! {
    #[test]
    fn shot_labels_roundtrip_through_any_case(l in label(), upper in any::<bool>(), pad in 0usize..3) {
        let v = shot_vocabulary();
        let raw = format!("{}{}{}", " ".repeat(pad), if upper { l.to_uppercase() } else { l.clone() }, " ".repeat(pad));
        let s = v.parse(&raw).unwrap();
        prop_assert_eq!(s.label(), l.as_str());
        prop_assert_eq!(v.parse(&s.to_string()).unwrap(), s.clone());
        let json = serde_json::to_string(&s).unwrap();
        prop_assert_eq!(serde_json::from_str::<ShotType>(&json).unwrap(), s);
    }

    #[test]
    fn keys_canonicalize_idempotently(raw in "[ ]{0,2}[A-Za-z][A-Za-z0-9_-]{0,8}[ ]{0,2}") {
        let k = RefKey::new(&raw).unwrap();
        prop_assert_eq!(RefKey::new(k.as_str()).unwrap(), k.clone());
        prop_assert_eq!(k.as_str(), raw.trim().to_lowercase());
    }
}
