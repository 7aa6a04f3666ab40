mod common;

use std::time::Duration;

use common::*;
use vstory_core::asset::{sha256_hex, AssetRef, AssetStore};
use vstory_core::backend::{BackendError, Capability};
use vstory_core::engine::{run_story, RunOptions};
use vstory_core::mock::MockCall;
use vstory_core::tensor::b64_decode;
use vstory_core::story::{PrefixDims, StoryProject};
use vstory_core::tuner::init_prefix_table;
use vstory_core::video::*;

fn generated(assets: &AssetStore) -> (StoryProject, std::sync::Arc<vstory_core::mock::MockBackend>, vstory_core::backend::Backends) {
    let mut p = project(
        assets,
        &[
            (&["hero"], Some("park"), "medium"),
            (&["hero", "villain"], Some("park"), "full"),
            (&["villain"], Some("castle"), "long"),
        ],
    );
    p.config.shot_prefix_dims = PrefixDims { d: 32, n: 4 };
    let table = init_prefix_table(&p.config.shot_vocabulary, 32, 4, 1);
    let (mock, b) = mock_backends(32);
    run_story(&mut p, &b, &table, assets, RunOptions::default()).unwrap();
    mock.reset_log();
    (p, mock, b)
}

fn params() -> ClipParams {
    ClipParams {
        duration_frames: 32,
        fps: 16,
        retry_delay: Duration::ZERO,
        ..ClipParams::default()
    }
}

#[test]
fn each_clip_sees_only_its_own_keyframe() {
    let dir = tempfile::tempdir().unwrap();
    let assets = AssetStore::open(dir.path()).unwrap();
    let (p, mock, b) = generated(&assets);
    let clips = expand(&p, b.get(Capability::Ti2v).unwrap(), &params(), &assets).unwrap();
    assert_eq!(clips.len(), 3);
    let calls: Vec<_> = mock
        .calls()
        .into_iter()
        .filter_map(|c| match c {
            MockCall::Ti2v(r) => Some(r),
            _ => None,
        })
        .collect();
    assert_eq!(calls.len(), 3);
    for s in &p.scripts {
        let kf = p.current_keyframe(s.index).unwrap();
        let want = assets.get(&kf.asset).unwrap();
        let call = calls.iter().find(|c| c.prompt == s.prompt).unwrap();
        assert_eq!(b64_decode(&call.image_b64).unwrap(), want);
        let others = p.scripts.iter().filter(|o| o.index != s.index);
        for o in others {
            assert!(!call.prompt.contains(&o.prompt));
        }
    }
    for (c, s) in clips.iter().zip(&p.scripts) {
        assert_eq!(c.index, s.index);
        assert!(c.source.is_some() && c.error.is_none());
        assert_eq!(c.retries, 0);
    }
}

#[test]
fn expansion_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let assets = AssetStore::open(dir.path()).unwrap();
    let (p, _, b) = generated(&assets);
    let h = b.get(Capability::Ti2v).unwrap();
    let a = expand(&p, h, &params(), &assets).unwrap();
    let again = expand(&p, h, &params(), &assets).unwrap();
    assert_eq!(a, again);
    let other = expand(&p, h, &ClipParams { seed: 1, ..params() }, &assets).unwrap();
    assert_ne!(a[0].source, other[0].source);
}

#[test]
fn transient_failures_are_retried_and_counted() {
    let dir = tempfile::tempdir().unwrap();
    let assets = AssetStore::open(dir.path()).unwrap();
    let (p, mock, b) = generated(&assets);
    let target = p.scripts[1].prompt.clone();
    mock.fail_matching(
        Capability::Ti2v,
        2,
        BackendError::Unreachable("flaky".into()),
        move |c| matches!(c, MockCall::Ti2v(r) if r.prompt == target),
    );
    let clips = expand(&p, b.get(Capability::Ti2v).unwrap(), &params(), &assets).unwrap();
    assert_eq!(clips.iter().map(|c| c.retries).collect::<Vec<_>>(), vec![0, 2, 0]);
    assert!(clips.iter().all(|c| c.source.is_some()));
}

#[test]
fn exhausted_retries_leave_a_gap() {
    let dir = tempfile::tempdir().unwrap();
    let assets = AssetStore::open(dir.path()).unwrap();
    let (p, mock, b) = generated(&assets);
    let target = p.scripts[2].prompt.clone();
    mock.fail_matching(
        Capability::Ti2v,
        10,
        BackendError::Unreachable("down".into()),
        move |c| matches!(c, MockCall::Ti2v(r) if r.prompt == target),
    );
    let p2 = ClipParams { retries: 1, ..params() };
    let clips = expand(&p, b.get(Capability::Ti2v).unwrap(), &p2, &assets).unwrap();
    assert!(clips[2].source.is_none());
    assert!(clips[2].error.as_deref().unwrap().starts_with("ti2v:"));
    let out = tempfile::tempdir().unwrap();
    let m = concat(&clips, &assets, out.path()).unwrap();
    assert_eq!(m.gaps, vec![3]);
    assert_eq!(m.clips.len(), 2);
}

#[test]
fn concat_sums_durations_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let assets = AssetStore::open(dir.path()).unwrap();
    let (p, _, b) = generated(&assets);
    let mut clips = expand(&p, b.get(Capability::Ti2v).unwrap(), &params(), &assets).unwrap();
    clips.reverse();
    let out = tempfile::tempdir().unwrap();
    let m = concat(&clips, &assets, out.path()).unwrap();
    assert_eq!(m.clips.iter().map(|c| c.index).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert!((m.total_duration_s - 6.0).abs() < 1e-12);
    assert!(!m.passthrough);
    assert!(m.mux_command.contains(&"concat".to_string()));
    let list = std::fs::read_to_string(&m.concat_file).unwrap();
    assert_eq!(list.matches("duration 2").count(), 3);
    let written: VideoManifest =
        serde_json::from_str(&std::fs::read_to_string(out.path().join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(written, m);
    let again = concat(&clips, &assets, out.path()).unwrap();
    assert_eq!(again.checksum, m.checksum);
}

fn record(index: u32, fps: u32, frames: u32) -> ClipRecord {
    ClipRecord {
        index,
        keyframe: AssetRef {
            sha256: sha256_hex(&[index as u8]),
            ext: "png".into(),
        },
        source: Some(ClipSource::Url(format!("https://clips.example/{index}.mp4"))),
        frames,
        fps,
        width: Some(64),
        height: Some(64),
        retries: 0,
        call_id: String::new(),
        error: None,
    }
}

#[test]
fn mixed_frame_rates_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let assets = AssetStore::open(dir.path()).unwrap();
    let out = tempfile::tempdir().unwrap();
    let clips = vec![record(1, 16, 32), record(2, 24, 48)];
    assert!(matches!(concat(&clips, &assets, out.path()), Err(VideoError::HeterogeneousClips(_))));
    let mut sized = vec![record(1, 16, 32), record(2, 16, 32)];
    sized[1].width = Some(128);
    assert!(matches!(concat(&sized, &assets, out.path()), Err(VideoError::HeterogeneousClips(_))));
}

#[test]
fn single_clip_passes_through() {
    let dir = tempfile::tempdir().unwrap();
    let assets = AssetStore::open(dir.path()).unwrap();
    let out = tempfile::tempdir().unwrap();
    let m = concat(&[record(1, 16, 40)], &assets, out.path()).unwrap();
    assert!(m.passthrough);
    assert!((m.total_duration_s - 2.5).abs() < 1e-12);
    assert!(m.mux_command.contains(&"https://clips.example/1.mp4".to_string()));
    assert!(!m.mux_command.contains(&"concat".to_string()));
}

#[test]
fn precondition_errors() {
    let dir = tempfile::tempdir().unwrap();
    let assets = AssetStore::open(dir.path()).unwrap();
    let p = project(&assets, &[(&["hero"], Some("park"), "medium")]);
    assert!(matches!(clip_jobs(&p, &params()), Err(VideoError::NoKeyframes)));
    let (mut g, _, _) = generated(&assets);
    assert!(matches!(
        clip_jobs(&g, &ClipParams { fps: 0, ..params() }),
        Err(VideoError::InvalidParams)
    ));
    g.scripts.push(script(4, &["hero"], Some("park"), "long"));
    assert!(matches!(clip_jobs(&g, &params()), Err(VideoError::MissingKeyframes(m)) if m == vec![4]));
    let out = tempfile::tempdir().unwrap();
    assert!(matches!(concat(&[], &assets, out.path()), Err(VideoError::NoClips)));
}
