mod common;

use std::path::Path;
use std::sync::Arc;

use common::fixtures;
use vstory_core::backend::{BackendHandle, Capability};
use vstory_core::benchmark::*;
use vstory_core::mock::MockBackend;
use vstory_core::project_io::ProjectDir;

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for e in std::fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        let dest = to.join(e.file_name());
        if e.path().is_dir() {
            copy_dir(&e.path(), &dest);
        } else {
            std::fs::copy(e.path(), dest).unwrap();
        }
    }
}

fn codes(err: &BenchmarkError) -> Vec<&str> {
    err.issues().iter().map(|i| i.code.as_str()).collect()
}

#[test]
fn mini_benchmarks_load_under_declared_counts() {
    let msb = load_benchmark(&fixtures().join("msb-mini"), CountMode::Declared).unwrap();
    assert_eq!(msb.header.name, BenchmarkKind::Msb);
    assert_eq!((msb.stories.len(), msb.script_count()), (2, 16));
    let m2sb = load_benchmark(&fixtures().join("m2sb-mini"), CountMode::Declared).unwrap();
    assert_eq!(m2sb.header.name, BenchmarkKind::M2sb);
    for s in &m2sb.stories {
        assert!(s.scripts.iter().any(|t| t.characters.len() >= 2));
    }
    assert!(msb.assets().is_ok());
}

#[test]
fn strict_mode_demands_full_size() {
    let err = load_benchmark(&fixtures().join("msb-mini"), CountMode::Strict).unwrap_err();
    let c = codes(&err);
    assert!(!c.is_empty() && c.iter().all(|c| *c == "COUNT_MISMATCH"), "{c:?}");
}

#[test]
fn short_story_is_reported_with_its_id() {
    let dir = tempfile::tempdir().unwrap();
    copy_dir(&fixtures().join("msb-mini"), dir.path());
    let story = ProjectDir::with_assets_dir(dir.path().join("stories/story-002"), dir.path().join("assets"));
    let mut p = story.load().unwrap();
    p.scripts.pop();
    story.save(&p).unwrap();
    let err = load_benchmark(dir.path(), CountMode::Declared).unwrap_err();
    let issues = err.issues();
    assert_eq!(issues.len(), 1, "{issues:?}");
    assert_eq!(issues[0].code, "COUNT_MISMATCH");
    assert_eq!(issues[0].story.as_deref(), Some("story-002"));
}

#[test]
fn single_subject_story_violates_m2sb() {
    let err = load_benchmark(&fixtures().join("m2sb-invalid"), CountMode::Declared).unwrap_err();
    let issues = err.issues();
    assert!(issues.iter().any(|i| i.code == "MULTISUBJECT_VIOLATION"), "{issues:?}");
    assert!(issues.iter().all(|i| i.code == "MULTISUBJECT_VIOLATION"));
}

#[test]
fn every_problem_is_collected() {
    let dir = tempfile::tempdir().unwrap();
    copy_dir(&fixtures().join("m2sb-invalid"), dir.path());
    std::fs::write(dir.path().join("stories/story-001/project.json"), b"{").unwrap();
    let err = load_benchmark(dir.path(), CountMode::Declared).unwrap_err();
    let c = codes(&err);
    assert!(c.contains(&"LOAD_FAILED"), "{c:?}");
    assert!(c.len() >= 2, "{c:?}");
}

#[test]
fn construct_round_trips_through_load() {
    let dir = tempfile::tempdir().unwrap();
    let mock = Arc::new(MockBackend::new(32));
    let h = BackendHandle::in_process(mock.clone());
    let descriptions: Vec<String> = (0..3).map(|i| format!("story number {i} about two friends")).collect();
    let stories = construct_benchmark(dir.path(), BenchmarkKind::Msb, &descriptions, 4, &h, Some(&h), 11).unwrap();
    assert_eq!(stories.len(), 3);
    let loaded = load_benchmark(dir.path(), CountMode::Declared).unwrap();
    assert_eq!(loaded.stories, stories);
    assert_eq!(mock.count(Capability::LlmComplete), 3);
}
