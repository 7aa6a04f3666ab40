#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use vstory_core::asset::AssetStore;
use vstory_core::backend::{BackendHandle, Backends};
use vstory_core::mock::{synthetic_reference, MockBackend};
use vstory_core::story::*;

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn key(s: &str) -> RefKey {
    RefKey::new(s).unwrap()
}

pub fn shot(s: &str) -> ShotType {
    shot_vocabulary().parse(s).unwrap()
}

pub fn reference(assets: &AssetStore, k: &str, kind: RefKind) -> ReferenceEntry {
    let kind_s = if kind == RefKind::Character { "character" } else { "background" };
    ReferenceEntry {
        key: key(k),
        kind,
        asset: Some(assets.put(&synthetic_reference(k, kind_s, 0)).unwrap()),
        caption: format!("{k} reference"),
        origin: Origin::UserSupplied,
    }
}

pub fn script(t: u32, chars: &[&str], bg: Option<&str>, s: &str) -> Script {
    Script {
        index: t,
        prompt: format!("beat {t} with {}", chars.join(" and ")),
        characters: chars.iter().map(|c| key(c)).collect(),
        background: bg.map(key),
        shot: shot(s),
        shot_origin: ShotOrigin::User,
    }
}

/// hero/villain at park/castle; each script is (characters, background, shot).
pub fn project(assets: &AssetStore, scripts: &[(&[&str], Option<&str>, &str)]) -> StoryProject {
    let mut p = StoryProject::new("test", "a test story");
    p.roster = vec![
        reference(assets, "hero", RefKind::Character),
        reference(assets, "villain", RefKind::Character),
        reference(assets, "park", RefKind::Background),
        reference(assets, "castle", RefKind::Background),
    ];
    p.scripts = scripts
        .iter()
        .enumerate()
        .map(|(i, (c, b, s))| script(i as u32 + 1, c, *b, s))
        .collect();
    p
}

pub fn mock_backends(dim: usize) -> (Arc<MockBackend>, Backends) {
    let mock = Arc::new(MockBackend::new(dim));
    let backends = Backends::single(BackendHandle::in_process(mock.clone()));
    (mock, backends)
}
