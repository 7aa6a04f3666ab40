//! Regenerates everything under `fixtures/`.
//!
//! cargo run -p vstory-core --example make_fixtures -- fixtures

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use vstory_core::asset::{sha256_hex, AssetStore};
use vstory_core::benchmark::{write_benchmark, BenchmarkHeader, BenchmarkKind};
use vstory_core::eval::fixture::FixtureLine;
use vstory_core::mock::{encode_png, synthetic_reference};
use vstory_core::project_io::ProjectDir;
use vstory_core::story::*;

fn key(s: &str) -> RefKey {
    RefKey::new(s).unwrap()
}

fn shot(s: &str) -> ShotType {
    shot_vocabulary().parse(s).unwrap()
}

fn reference(assets: &AssetStore, k: &str, kind: RefKind, caption: &str) -> ReferenceEntry {
    let kind_s = if kind == RefKind::Character { "character" } else { "background" };
    let asset = assets.put(&synthetic_reference(k, kind_s, 0)).unwrap();
    ReferenceEntry {
        key: key(k),
        kind,
        asset: Some(asset),
        caption: caption.into(),
        origin: Origin::UserSupplied,
    }
}

fn script(t: u32, prompt: &str, chars: &[&str], bg: Option<&str>, s: &str) -> Script {
    Script {
        index: t,
        prompt: prompt.into(),
        characters: chars.iter().map(|c| key(c)).collect(),
        background: bg.map(key),
        shot: shot(s),
        shot_origin: ShotOrigin::User,
    }
}

fn generate_fixtures(root: &Path) {
    let stories: [(&str, &str, &[(&str, RefKind)], Vec<Script>); 3] = [
        (
            "harbor",
            "Mira and Otto repair a boat at the harbor.",
            &[("mira", RefKind::Character), ("otto", RefKind::Character), ("harbor", RefKind::Background)],
            vec![
                script(1, "mira inspects the hull at the harbor", &["mira"], Some("harbor"), "medium"),
                script(2, "otto hands mira a wrench at the harbor", &["mira", "otto"], Some("harbor"), "full"),
                script(3, "mira smiles at the finished boat", &["mira"], Some("harbor"), "close-up"),
            ],
        ),
        (
            "forest",
            "Lena follows a fox through the forest and finds a cabin.",
            &[("lena", RefKind::Character), ("fox", RefKind::Character), ("forest", RefKind::Background), ("cabin", RefKind::Background)],
            vec![
                script(1, "lena walks into the forest", &["lena"], Some("forest"), "long"),
                script(2, "a fox watches lena from the ferns", &["fox", "lena"], Some("forest"), "medium"),
                script(3, "lena reaches the cabin door", &["lena"], Some("cabin"), "full"),
                script(4, "the fox sleeps by the cabin fire", &["fox"], Some("cabin"), "extreme-close-up"),
            ],
        ),
        (
            "rooftop",
            "Kai and Juno watch a meteor shower from a rooftop.",
            &[("kai", RefKind::Character), ("juno", RefKind::Character), ("rooftop", RefKind::Background)],
            vec![
                script(1, "kai climbs onto the rooftop", &["kai"], Some("rooftop"), "full"),
                script(2, "juno joins kai with blankets", &["juno", "kai"], Some("rooftop"), "medium"),
                script(3, "the first meteor streaks overhead", &[], Some("rooftop"), "long"),
                script(4, "juno points at the sky", &["juno"], Some("rooftop"), "close-up"),
                script(5, "kai and juno laugh together", &["kai", "juno"], Some("rooftop"), "medium"),
            ],
        ),
    ];
    for (id, desc, roster, scripts) in stories {
        let dir = ProjectDir::new(root.join("generate").join(id));
        let assets = dir.assets().unwrap();
        let mut p = StoryProject::new(id, desc);
        p.roster = roster
            .iter()
            .map(|(k, kind)| reference(&assets, k, *kind, &format!("{k} reference")))
            .collect();
        p.scripts = scripts;
        assert!(validate_project(&p).is_ok(), "{:?}", validate_project(&p));
        dir.save(&p).unwrap();
    }
}

fn bench_story(assets: &AssetStore, id: &str, multi: bool) -> StoryProject {
    let mut p = StoryProject::new(id, format!("benchmark story {id}"));
    p.roster = vec![
        reference(assets, "ada", RefKind::Character, "ada, a courier"),
        reference(assets, "bo", RefKind::Character, "bo, a mechanic"),
        reference(assets, "market", RefKind::Background, "a night market"),
    ];
    let shots = ["long", "full", "medium", "close-up", "extreme-close-up", "medium", "full", "long"];
    p.scripts = (1..=8)
        .map(|t| {
            let chars: &[&str] = match (multi, t % 3) {
                (true, 0) => &["ada", "bo"],
                (_, 1) => &["ada"],
                _ => &["bo"],
            };
            script(
                t,
                &format!("{} at the market, beat {t}", chars.join(" and ")),
                chars,
                Some("market"),
                shots[t as usize - 1],
            )
        })
        .collect();
    p
}

fn bench_fixtures(root: &Path) {
    for (name, kind, multi) in [
        ("msb-mini", BenchmarkKind::Msb, [true, false]),
        ("m2sb-mini", BenchmarkKind::M2sb, [true, true]),
        ("m2sb-invalid", BenchmarkKind::M2sb, [true, false]),
    ] {
        let dir = root.join(name);
        let assets = AssetStore::open(dir.join("assets")).unwrap();
        let stories: Vec<_> = multi
            .iter()
            .enumerate()
            .map(|(i, m)| bench_story(&assets, &format!("story-{:03}", i + 1), *m))
            .collect();
        let header = BenchmarkHeader {
            name: kind,
            stories: stories.len(),
            scripts_per_story: 8,
        };
        write_benchmark(&dir, &header, &stories).unwrap();
    }
}

const BOX: u32 = 16;
const FRAME: u32 = 64;

/// One identity per colour channel; boxes are split into a top part in
/// colour A (`quarters` quarters of the rows) and a bottom part in colour B.
fn draw_frame(frame: u32, obs: &[(usize, u32, u32)]) -> RgbImage {
    let mut img = RgbImage::from_fn(FRAME, FRAME, |x, y| {
        let v = (60 + (x + y + frame) % 80) as u8;
        Rgb([v, v, v])
    });
    for &(ch, y0, quarters) in obs {
        let x0 = 4 + ch as u32 * 20;
        for y in 0..BOX {
            for x in 0..BOX {
                let mut px = [16u8, 16, 16];
                px[ch] = 220;
                if y >= quarters * BOX / 4 {
                    px[(ch + 1) % 3] = 80;
                }
                img.put_pixel(x0 + x, y0 + y, Rgb(px));
            }
        }
    }
    img
}

fn clip_fixtures(root: &Path) {
    for (name, frames, seed) in [("clip-a", 40u32, 11u64), ("clip-b", 32, 12)] {
        let dir = root.join("clips").join(name);
        let frames_dir = dir.join("frames");
        fs::create_dir_all(&frames_dir).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut truth: Vec<Vec<serde_json::Value>> = vec![Vec::new(); 3];
        for f in 0..frames {
            let mut obs = Vec::new();
            for (ch, track) in truth.iter_mut().enumerate() {
                if rng.random_bool(0.8) {
                    let y0 = rng.random_range(0..=FRAME - BOX);
                    let quarters = rng.random_range(0..=4u32);
                    obs.push((ch, y0, quarters));
                    track.push(json!({
                        "frame": f,
                        "bbox": {"x": 4 + ch as u32 * 20, "y": y0, "w": BOX, "h": BOX},
                        "pixels_a": quarters * BOX / 4 * BOX,
                        "pixels_b": (BOX - quarters * BOX / 4) * BOX,
                    }));
                }
            }
            fs::write(frames_dir.join(format!("{f:03}.png")), encode_png(&draw_frame(f, &obs))).unwrap();
        }
        let tracks: Vec<_> = truth
            .into_iter()
            .enumerate()
            .map(|(ch, obs)| json!({"track_id": ch + 1, "observations": obs}))
            .collect();
        let doc = json!({"clip": name, "frames": frames, "tracks": tracks});
        fs::write(dir.join("truth.json"), serde_json::to_string_pretty(&doc).unwrap() + "\n").unwrap();
    }
}

fn norm(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let (a, b) = (norm(a), norm(b));
    a.iter().zip(&b).map(|(x, y)| x * y).sum()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn eval_fixture(root: &Path) {
    let dir = ProjectDir::new(root.join("eval-story"));
    let assets = dir.assets().unwrap();
    let mut p = StoryProject::new("eval-story", "A small story with precomputed embeddings.");
    p.roster = vec![
        reference(&assets, "hero", RefKind::Character, "the hero"),
        reference(&assets, "sidekick", RefKind::Character, "the sidekick"),
        reference(&assets, "park", RefKind::Background, "a park"),
    ];
    p.scripts = vec![
        script(1, "hero walks in the park", &["hero"], Some("park"), "medium"),
        script(2, "hero and sidekick talk", &["hero", "sidekick"], Some("park"), "close-up"),
        script(3, "sidekick leaves the park", &["sidekick"], Some("park"), "long"),
    ];
    let frames: Vec<_> = (1..=3u32)
        .map(|t| assets.put(&synthetic_reference(&format!("frame-{t}"), "character", 99)).unwrap())
        .collect();
    for (t, a) in frames.iter().enumerate() {
        p.keyframes.push(KeyframeRecord {
            script_index: t as u32 + 1,
            asset: a.clone(),
            retrieval_manifest: Vec::new(),
            shot: p.scripts[t].shot.clone(),
            locked: false,
            superseded: false,
            lineage: Lineage::default(),
        });
    }
    dir.save(&p).unwrap();

    let sha = |e: &ReferenceEntry| e.asset.as_ref().unwrap().sha256.clone();
    let (hero, side, park) = (sha(&p.roster[0]), sha(&p.roster[1]), sha(&p.roster[2]));
    let fsha: Vec<String> = frames.iter().map(|a| a.sha256.clone()).collect();

    let fg: Vec<(&String, [f64; 4])> = vec![
        (&hero, [1.0, 2.0, 0.0, 1.0]),
        (&side, [0.0, 1.0, 3.0, 1.0]),
        (&park, [1.0, 1.0, 1.0, 1.0]),
        (&fsha[0], [1.0, 2.0, 1.0, 1.0]),
        (&fsha[1], [1.0, 2.0, 2.0, 1.0]),
        (&fsha[2], [0.0, 1.0, 2.0, 2.0]),
    ];
    let bg: Vec<(&String, [f64; 4])> = vec![
        (&hero, [2.0, 0.0, 1.0, 0.0]),
        (&side, [1.0, 1.0, 0.0, 2.0]),
        (&park, [3.0, 1.0, 0.0, 1.0]),
        (&fsha[0], [3.0, 1.0, 1.0, 1.0]),
        (&fsha[1], [2.0, 1.0, 0.0, 1.0]),
        (&fsha[2], [3.0, 2.0, 0.0, 1.0]),
    ];
    let image_emb = [[1.0, 0.0, 1.0], [1.0, 1.0, 0.0], [0.0, 1.0, 2.0]];
    let text_emb = [[1.0, 0.0, 2.0], [2.0, 1.0, 0.0], [1.0, 1.0, 1.0]];
    let faces: [Vec<[f64; 3]>; 3] = [
        vec![[1.0, 2.0, 2.0]],
        vec![[2.0, 1.0, 2.0], [0.0, 0.0, 1.0]],
        vec![],
    ];
    // Scores in vocabulary order: extreme-close-up, close-up, medium, full, long.
    let shot_scores = [
        [0.0, 0.1, 0.7, 0.2, 0.0],
        [0.1, 0.8, 0.1, 0.0, 0.0],
        [0.0, 0.0, 0.1, 0.6, 0.3],
    ];
    let aesthetics = [[0.5, 0.25], [0.75, 0.5], [0.625, 0.375]];

    let f32v = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
    let mut lines = Vec::new();
    for (s, v) in &fg {
        lines.push(FixtureLine::new(s.as_str(), "segment_fg", &f32v(v)));
    }
    for (s, v) in &bg {
        lines.push(FixtureLine::new(s.as_str(), "segment_bg", &f32v(v)));
        lines.push(FixtureLine::new(s.as_str(), "segment_coverage", &[0.25]));
    }
    for t in 0..3 {
        lines.push(FixtureLine::new(fsha[t].as_str(), "embed_image", &f32v(&image_emb[t])));
        lines.push(FixtureLine::new(
            sha256_hex(p.scripts[t].prompt.as_bytes()),
            "embed_text",
            &f32v(&text_emb[t]),
        ));
        for f in &faces[t] {
            lines.push(FixtureLine::new(fsha[t].as_str(), "face_embed", &f32v(f)));
        }
        lines.push(FixtureLine::new(fsha[t].as_str(), "shot_classify", &f32v(&shot_scores[t])));
        lines.push(FixtureLine::new(fsha[t].as_str(), "aesthetics", &f32v(&aesthetics[t])));
    }
    let jsonl: String = lines.iter().map(|l| serde_json::to_string(l).unwrap() + "\n").collect();
    fs::write(root.join("eval-story").join("embeddings.jsonl"), jsonl).unwrap();

    // Golden report, by direct arithmetic over the vectors above.
    let fgv = |i: usize| fg[i].1;
    let bgv = |i: usize| bg[i].1;
    let mut inter_fg = Vec::new();
    for r in [0, 1] {
        for g in [3, 4, 5] {
            inter_fg.push(cos(&fgv(r), &fgv(g)));
        }
    }
    let inter_bg: Vec<f64> = [3, 4, 5].iter().map(|&g| cos(&bgv(2), &bgv(g))).collect();
    let pairs = [(3, 4), (3, 5), (4, 5)];
    let intra_fg: Vec<f64> = pairs.iter().map(|&(a, b)| cos(&fgv(a), &fgv(b))).collect();
    let intra_bg: Vec<f64> = pairs.iter().map(|&(a, b)| cos(&bgv(a), &bgv(b))).collect();
    let (ifg, ibg, afg, abg) = (mean(&inter_fg), mean(&inter_bg), mean(&intra_fg), mean(&intra_bg));
    let clip_t: Vec<f64> = (0..3).map(|t| cos(&text_emb[t], &image_emb[t])).collect();
    // One face in frame 1 against two in frame 2: the better match is kept.
    let id_sim = cos(&faces[0][0], &faces[1][0]).max(cos(&faces[0][0], &faces[1][1]));
    let hits = [true, true, false];
    let per_frame: Vec<_> = (0..3)
        .map(|t| {
            json!({
                "index": t + 1,
                "clip_t": clip_t[t],
                "sta_hit": hits[t],
                "iqs": aesthetics[t][0],
                "ias": aesthetics[t][1],
            })
        })
        .collect();
    let golden = json!({
        "story_id": "eval-story",
        "per_story": {
            "inter_fg": ifg,
            "inter_bg": ibg,
            "intra_fg": afg,
            "intra_bg": abg,
            "avg_consistency": (ifg + ibg + afg + abg) / 4.0,
            "clip_t": mean(&clip_t),
            "id_sim": id_sim,
            "id_sim_excluded_frames": 1,
            "sta": 2.0 / 3.0,
            "iqs": mean(&[0.5, 0.75, 0.625]),
            "ias": mean(&[0.25, 0.5, 0.375]),
        },
        "per_frame": per_frame,
    });
    fs::write(
        root.join("eval-story").join("golden_report.json"),
        serde_json::to_string_pretty(&golden).unwrap() + "\n",
    )
    .unwrap();
}

fn director_fixtures(root: &Path) {
    let dir = root.join("director");
    fs::create_dir_all(&dir).unwrap();
    let shots = ["long", "full", "medium", "close-up", "medium", "full", "extreme-close-up", "long"];
    let scripts: Vec<_> = (1..=8)
        .map(|t| {
            let chars: Vec<&str> = match t % 3 {
                0 => vec!["nora", "pip"],
                1 => vec!["nora"],
                _ => vec!["pip"],
            };
            json!({
                "t": t,
                "prompt": format!("{} in the lighthouse, scene {t}", chars.join(" and ")),
                "characters": chars,
                "background": "lighthouse",
                "shot": shots[t - 1],
            })
        })
        .collect();
    let good = json!({
        "characters": [
            {"key": "nora", "caption": "nora, the lighthouse keeper"},
            {"key": "pip", "caption": "pip, a curious gull"}
        ],
        "backgrounds": [{"key": "lighthouse", "caption": "an old stone lighthouse"}],
        "scripts": scripts,
    });
    fs::write(dir.join("golden_8.json"), serde_json::to_string_pretty(&good).unwrap() + "\n").unwrap();
    let mut bad = good.clone();
    bad["scripts"][4]["shot"] = json!("aerial");
    fs::write(dir.join("aerial_shot.json"), serde_json::to_string_pretty(&bad).unwrap() + "\n").unwrap();
}

fn main() {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fixtures".into()));
    if root.exists() {
        fs::remove_dir_all(&root).unwrap();
    }
    fs::create_dir_all(&root).unwrap();
    generate_fixtures(&root);
    bench_fixtures(&root);
    clip_fixtures(&root);
    eval_fixture(&root);
    director_fixtures(&root);
    println!("fixtures written to {}", root.display());
}
