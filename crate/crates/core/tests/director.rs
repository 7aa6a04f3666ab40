mod common;

use std::sync::Arc;

use common::*;
use vstory_core::asset::AssetStore;
use vstory_core::backend::{BackendError, BackendHandle, Capability, RetryPolicy};
use vstory_core::director::*;
use vstory_core::mock::MockBackend;
use vstory_core::story::*;

fn fixture(name: &str) -> String {
    std::fs::read_to_string(fixtures().join("director").join(name)).unwrap()
}

fn request(n: usize) -> DirectorRequest {
    DirectorRequest {
        description: "A keeper and a gull share a stormy night at the lighthouse.".into(),
        n_scripts: n,
        roster_hints: vec![],
        vocabulary: shot_vocabulary(),
        seed: 5,
    }
}

fn llm() -> (Arc<MockBackend>, BackendHandle) {
    let mock = Arc::new(MockBackend::new(64));
    (mock.clone(), BackendHandle::in_process(mock).with_retry(RetryPolicy::none()))
}

#[test]
fn golden_payload_parses_to_eight_scripts() {
    let (mock, h) = llm();
    mock.script_llm([fixture("golden_8.json")]);
    let draft = generate_scripts(&request(8), &h).unwrap();
    let out = draft.parsed.unwrap();
    assert_eq!(out.scripts.len(), 8);
    assert_eq!(draft.repair_attempts, 0);
    let chars = out.roster.iter().filter(|r| r.kind == RefKind::Character).count();
    let bgs = out.roster.iter().filter(|r| r.kind == RefKind::Background).count();
    assert_eq!((chars, bgs), (2, 1));
    assert_eq!(out.scripts[6].shot, shot("extreme-close-up"));
    assert_eq!(out.scripts[2].characters, vec![key("nora"), key("pip")]);
    assert!(out.scripts.iter().all(|s| s.shot_origin == ShotOrigin::Director));
}

#[test]
fn unknown_shot_is_repaired_once() {
    let (mock, h) = llm();
    mock.script_llm([fixture("aerial_shot.json"), fixture("golden_8.json")]);
    let draft = generate_scripts(&request(8), &h).unwrap();
    assert_eq!(draft.repair_attempts, 1);
    assert!(draft.rejected[0].iter().any(|c| c.starts_with("UNKNOWN_SHOT")));
    // The repair turn carries the validator codes back to the model.
    let calls = mock.calls();
    let last = calls
        .iter()
        .filter_map(|c| match c {
            vstory_core::mock::MockCall::Llm(r) => Some(r),
            _ => None,
        })
        .last()
        .unwrap();
    assert_eq!(last.messages.len(), 4);
    assert!(last.messages[3].content.contains("UNKNOWN_SHOT"));
}

#[test]
fn garbage_exhausts_the_repair_budget() {
    let (mock, h) = llm();
    mock.script_llm((0..=REPAIR_BUDGET).map(|i| format!("no json here {i}")));
    match generate_scripts(&request(8), &h) {
        Err(DirectorError::MalformedAfterRepairs { attempts, codes, .. }) => {
            assert_eq!(attempts, REPAIR_BUDGET);
            assert!(codes.contains(&"MALFORMED_JSON".to_string()));
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(mock.count(Capability::LlmComplete), REPAIR_BUDGET as u64 + 1);
}

#[test]
fn zero_scripts_and_unreachable_llm() {
    let (mock, h) = llm();
    assert!(matches!(generate_scripts(&request(0), &h), Err(DirectorError::ZeroScripts)));
    mock.set_offline(true);
    let err = generate_scripts(&request(3), &h).unwrap_err();
    assert!(matches!(err, DirectorError::BackendUnreachable { ref call_id, .. } if call_id.starts_with("llm_complete:")));
}

#[test]
fn parser_rejections() {
    let req = request(8);
    let good: serde_json::Value = serde_json::from_str(&fixture("golden_8.json")).unwrap();

    let mut count = good.clone();
    count["scripts"].as_array_mut().unwrap().pop();
    let codes = parse_director_output(&count.to_string(), &req).unwrap_err();
    assert!(codes.iter().any(|c| c == "SCRIPT_COUNT(7 != 8)"), "{codes:?}");

    let mut bgs = good.clone();
    bgs["scripts"][0]["background"] = serde_json::json!(["lighthouse", "sea"]);
    let codes = parse_director_output(&bgs.to_string(), &req).unwrap_err();
    assert!(codes.iter().any(|c| c.starts_with("MULTIPLE_BACKGROUNDS")), "{codes:?}");

    let mut undeclared = good.clone();
    undeclared["scripts"][1]["characters"] = serde_json::json!(["ghost"]);
    let codes = parse_director_output(&undeclared.to_string(), &req).unwrap_err();
    assert!(codes.iter().any(|c| c.contains("UNRESOLVED_MENTION")), "{codes:?}");

    let mut missing = good.clone();
    missing.as_object_mut().unwrap().remove("scripts");
    let codes = parse_director_output(&missing.to_string(), &req).unwrap_err();
    assert!(codes.iter().any(|c| c.starts_with("MISSING_FIELD")), "{codes:?}");

    // Prose around the document is tolerated.
    let wrapped = format!("Here you go:\n```json\n{}\n```", good);
    assert!(parse_director_output(&wrapped, &req).is_ok());
}

#[test]
fn reference_generation_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let assets = AssetStore::open(dir.path()).unwrap();
    let (mock, h) = llm();
    let specs: Vec<RosterSpec> = ["nora", "pip"]
        .iter()
        .map(|k| RosterSpec {
            key: key(k),
            kind: RefKind::Character,
            caption: format!("{k} portrait"),
        })
        .collect();
    let mentioned = specs.iter().map(|s| (s.kind, s.key.clone())).collect();
    let a = generate_reference_assets(&specs, &[], &mentioned, Some(&h), &assets, 1).unwrap();
    let b = generate_reference_assets(&specs, &[], &mentioned, Some(&h), &assets, 1).unwrap();
    assert_eq!(a.entries.len(), 2);
    assert_eq!(a.entries, b.entries);
    assert_ne!(a.entries[0].asset, a.entries[1].asset);
    assert!(a.entries.iter().all(|e| e.origin == Origin::DirectorGenerated));
    assert_eq!(mock.count(Capability::ImageGenerate), 4);
}

#[test]
fn pins_win_and_need_no_backend() {
    let dir = tempfile::tempdir().unwrap();
    let assets = AssetStore::open(dir.path()).unwrap();
    let pin = reference(&assets, "nora", RefKind::Character);
    let specs = vec![RosterSpec {
        key: key("nora"),
        kind: RefKind::Character,
        caption: "director's idea".into(),
    }];
    let mentioned = [(RefKind::Character, key("nora"))].into_iter().collect();
    let (mock, h) = llm();
    mock.set_offline(true);
    let out = generate_reference_assets(&specs, &[pin.clone()], &mentioned, Some(&h), &assets, 0).unwrap();
    assert_eq!(out.entries, vec![pin.clone()]);
    assert_eq!(out.calls, 0);
    assert_eq!(mock.count(Capability::ImageGenerate), 0);
    let out = generate_reference_assets(&specs, &[pin.clone()], &mentioned, None, &assets, 0).unwrap();
    assert_eq!(out.entries, vec![pin]);
}

#[test]
fn failed_mentioned_reference_is_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let assets = AssetStore::open(dir.path()).unwrap();
    let (mock, h) = llm();
    mock.fail_next(Capability::ImageGenerate, 1, BackendError::Unreachable("down".into()));
    let specs = vec![RosterSpec {
        key: key("pip"),
        kind: RefKind::Character,
        caption: "a gull".into(),
    }];
    let mentioned = [(RefKind::Character, key("pip"))].into_iter().collect();
    assert!(matches!(
        generate_reference_assets(&specs, &[], &mentioned, Some(&h), &assets, 0),
        Err(DirectorError::UnresolvedReferences(f)) if f.len() == 1
    ));
}

#[test]
fn direct_fills_a_valid_project_with_auto_llm() {
    let dir = tempfile::tempdir().unwrap();
    let assets = AssetStore::open(dir.path()).unwrap();
    let (_, h) = llm();
    let mut req = request(5);
    req.roster_hints = vec![reference(&assets, "keeper", RefKind::Character)];
    let mut p = StoryProject::new("d", "");
    let res = direct(&mut p, &req, &h, Some(&h), &assets).unwrap();
    assert_eq!(p.scripts.len(), 5);
    assert!(validate_project(&p).is_ok(), "{:?}", validate_project(&p));
    assert!(p.roster.iter().all(|r| r.asset.is_some()));
    assert!(p.reference(RefKind::Character, &key("keeper")).is_some());
    assert_eq!(res.draft.repair_attempts, 0);
}
