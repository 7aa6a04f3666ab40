mod common;

use std::collections::BTreeSet;

use common::{fixtures, mock_backends};
use serde_json::Value;
use vstory_core::backend::Capability;
use vstory_core::tuner::dataset::PROVENANCE_FILE;
use vstory_core::tuner::{build_shot_dataset, load_pairs, DatasetParams, Rejection};

type PairKey = (String, u32, u32, u32);

/// Every (clip, track, a, b) with gap > tau and identity cosine >= theta,
/// computed from the fixture's ground truth pixel counts.
fn oracle(tau: u32, theta: f64) -> BTreeSet<PairKey> {
    let mut out = BTreeSet::new();
    for clip in ["clip-a", "clip-b"] {
        let truth: Value =
            serde_json::from_str(&std::fs::read_to_string(fixtures().join("clips").join(clip).join("truth.json")).unwrap())
                .unwrap();
        for track in truth["tracks"].as_array().unwrap() {
            let id = track["track_id"].as_u64().unwrap() as u32;
            let obs: Vec<(u32, f64, f64)> = track["observations"]
                .as_array()
                .unwrap()
                .iter()
                .map(|o| {
                    (
                        o["frame"].as_u64().unwrap() as u32,
                        o["pixels_a"].as_f64().unwrap(),
                        o["pixels_b"].as_f64().unwrap(),
                    )
                })
                .collect();
            for (i, a) in obs.iter().enumerate() {
                for b in &obs[i + 1..] {
                    let cos = (a.1 * b.1 + a.2 * b.2) / ((a.1 * a.1 + a.2 * a.2).sqrt() * (b.1 * b.1 + b.2 * b.2).sqrt());
                    if b.0 - a.0 > tau && cos >= theta {
                        out.insert((clip.to_string(), id, a.0, b.0));
                    }
                }
            }
        }
    }
    out
}

fn run(tau: u32, theta: f64) -> (vstory_core::tuner::DatasetBuild, tempfile::TempDir) {
    let (_, b) = mock_backends(64);
    let out = tempfile::tempdir().unwrap();
    let params = DatasetParams {
        tau,
        theta_id: theta,
        ..DatasetParams::default()
    };
    (build_shot_dataset(&fixtures().join("clips"), out.path(), &params, &b).unwrap(), out)
}

#[test]
fn accepted_pairs_equal_brute_force() {
    for (tau, theta) in [(10, 0.85), (20, 0.92), (5, 0.97)] {
        let (build, out) = run(tau, theta);
        let got: BTreeSet<PairKey> = build
            .pairs
            .iter()
            .map(|p| (p.source_clip_id.clone(), p.track_id, p.reference_index, p.target_index))
            .collect();
        let want = oracle(tau, theta);
        assert!(!want.is_empty());
        assert_eq!(got, want, "tau={tau} theta={theta}");
        assert_eq!(got.len(), build.pairs.len());
        for p in &build.pairs {
            assert!(p.temporal_gap > tau && p.identity_score >= theta);
            assert!(p.caption.contains("figure"));
        }
        assert_eq!(load_pairs(&out.path().join("pairs.jsonl")).unwrap(), build.pairs);
        let prov = std::fs::read_to_string(out.path().join(PROVENANCE_FILE)).unwrap();
        let kinds: Vec<String> = prov
            .lines()
            .map(|l| serde_json::from_str::<Value>(l).unwrap()["kind"].as_str().unwrap().to_string())
            .collect();
        assert_eq!(kinds.first().unwrap(), "header");
        assert_eq!(kinds.last().unwrap(), "summary");
    }
}

#[test]
fn tau_beyond_clip_length_rejects_every_track() {
    let (build, _) = run(40, 0.85);
    assert!(build.pairs.is_empty());
    assert_eq!(build.rejections.len(), 6);
    assert!(build.rejections.iter().all(|r| matches!(r, Rejection::GapTooLarge { .. })));
}

#[test]
fn theta_above_one_rejects_every_candidate() {
    let (build, _) = run(10, 1.01);
    assert!(build.pairs.is_empty());
    assert!(!build.rejections.is_empty());
    assert!(build
        .rejections
        .iter()
        .all(|r| matches!(r, Rejection::LowIdentitySimilarity { score, .. } if *score <= 1.0)));
    let json = serde_json::to_value(&build.rejections[0]).unwrap();
    assert_eq!(json["reason"], "LOW_IDENTITY_SIMILARITY");
}

#[test]
fn sampling_cap_is_seeded_and_bounded() {
    let (_, b) = mock_backends(64);
    let go = |seed| {
        let out = tempfile::tempdir().unwrap();
        let params = DatasetParams {
            tau: 5,
            theta_id: 0.0,
            max_pairs_per_track: Some(4),
            seed,
            ..DatasetParams::default()
        };
        build_shot_dataset(&fixtures().join("clips"), out.path(), &params, &b).unwrap().pairs
    };
    let a = go(1);
    assert_eq!(a, go(1));
    assert_eq!(a.len(), 6 * 4);
}

#[test]
fn missing_capability_fails_before_any_work() {
    let (mock, mut b) = mock_backends(64);
    b.remove(Capability::Caption);
    let out = tempfile::tempdir().unwrap();
    assert!(build_shot_dataset(&fixtures().join("clips"), out.path(), &DatasetParams::default(), &b).is_err());
    assert_eq!(mock.count(Capability::Track), 0);
}
