//! MSB / M2SB benchmark layout: loading, validation and construction.
//!
//! Layout: `<bench>/benchmark.json`, `<bench>/stories/<id>/project.json`
//! and one shared `<bench>/assets/` directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asset::{write_atomic, AssetStore};
use crate::backend::BackendHandle;
use crate::director::{direct, DirectorError, DirectorRequest};
use crate::project_io::{ProjectDir, ProjectIoError};
use crate::story::{validate_project, StoryProject};

pub const BENCHMARK_FILE: &str = "benchmark.json";
pub const STRICT_STORIES: usize = 100;
pub const STRICT_SCRIPTS: usize = 8;

#[derive(Debug, Error)]
pub enum BenchmarkError {
    #[error("cannot read benchmark at {0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("malformed {BENCHMARK_FILE}: {0}")]
    Malformed(String),
    #[error("benchmark failed validation with {} issue(s)", .0.len())]
    Invalid(Vec<BenchmarkIssue>),
    #[error(transparent)]
    Project(#[from] ProjectIoError),
    #[error(transparent)]
    Director(#[from] DirectorError),
}

impl BenchmarkError {
    pub fn issues(&self) -> &[BenchmarkIssue] {
        match self {
            BenchmarkError::Invalid(v) => v,
            _ => &[],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BenchmarkKind {
    #[serde(rename = "MSB")]
    Msb,
    #[serde(rename = "M2SB")]
    M2sb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkHeader {
    pub name: BenchmarkKind,
    pub stories: usize,
    pub scripts_per_story: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkIssue {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub story: Option<String>,
    pub code: String,
    pub detail: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CountMode {
    /// Exactly 100 stories of 8 scripts.
    Strict,
    /// The counts declared in `benchmark.json`, for test-scale fixtures.
    Declared,
}

#[derive(Clone, Debug)]
pub struct Benchmark {
    pub header: BenchmarkHeader,
    pub root: PathBuf,
    pub stories: Vec<StoryProject>,
}

impl Benchmark {
    pub fn script_count(&self) -> usize {
        self.stories.iter().map(|s| s.scripts.len()).sum()
    }

    pub fn assets(&self) -> Result<AssetStore, BenchmarkError> {
        AssetStore::open(self.root.join("assets")).map_err(|e| BenchmarkError::Project(ProjectIoError::Corrupt(e)))
    }
}

fn issue(story: Option<&str>, code: &str, detail: impl Into<String>) -> BenchmarkIssue {
    BenchmarkIssue {
        story: story.map(str::to_string),
        code: code.into(),
        detail: detail.into(),
    }
}

/// Loads and validates a benchmark; every problem found is reported.
pub fn load_benchmark(root: &Path, mode: CountMode) -> Result<Benchmark, BenchmarkError> {
    let header_path = root.join(BENCHMARK_FILE);
    let text = fs::read_to_string(&header_path).map_err(|e| BenchmarkError::Io(header_path.clone(), e))?;
    let header: BenchmarkHeader = serde_json::from_str(&text).map_err(|e| BenchmarkError::Malformed(e.to_string()))?;
    let (want_stories, want_scripts) = match mode {
        CountMode::Strict => (STRICT_STORIES, STRICT_SCRIPTS),
        CountMode::Declared => (header.stories, header.scripts_per_story),
    };

    let stories_dir = root.join("stories");
    let mut ids: Vec<String> = fs::read_dir(&stories_dir)
        .map_err(|e| BenchmarkError::Io(stories_dir.clone(), e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    ids.sort();

    let mut issues = Vec::new();
    if ids.len() != want_stories {
        issues.push(issue(
            None,
            "COUNT_MISMATCH",
            format!("{} stories, expected {want_stories}", ids.len()),
        ));
    }
    if mode == CountMode::Strict && (header.stories, header.scripts_per_story) != (STRICT_STORIES, STRICT_SCRIPTS) {
        issues.push(issue(
            None,
            "COUNT_MISMATCH",
            format!(
                "declared {}x{}, strict mode requires {STRICT_STORIES}x{STRICT_SCRIPTS}",
                header.stories, header.scripts_per_story
            ),
        ));
    }

    let mut stories = Vec::with_capacity(ids.len());
    for id in &ids {
        let dir = ProjectDir::with_assets_dir(stories_dir.join(id), root.join("assets"));
        let project = match dir.load() {
            Ok(p) => p,
            Err(e) => {
                issues.push(issue(Some(id), "LOAD_FAILED", e.to_string()));
                continue;
            }
        };
        if project.scripts.len() != want_scripts {
            issues.push(issue(
                Some(id),
                "COUNT_MISMATCH",
                format!("{} scripts, expected {want_scripts}", project.scripts.len()),
            ));
        }
        for v in validate_project(&project).violations {
            issues.push(issue(Some(id), v.code(), v.to_string()));
        }
        if header.name == BenchmarkKind::M2sb && !project.scripts.iter().any(|s| s.characters.len() >= 2) {
            issues.push(issue(
                Some(id),
                "MULTISUBJECT_VIOLATION",
                "no script mentions two or more characters",
            ));
        }
        stories.push(project);
    }
    if issues.is_empty() {
        Ok(Benchmark {
            header,
            root: root.to_path_buf(),
            stories,
        })
    } else {
        Err(BenchmarkError::Invalid(issues))
    }
}

/// Writes a benchmark layout from finished story skeletons.
pub fn write_benchmark(root: &Path, header: &BenchmarkHeader, stories: &[StoryProject]) -> Result<(), BenchmarkError> {
    let io = |e| BenchmarkError::Io(root.to_path_buf(), e);
    fs::create_dir_all(root.join("stories")).map_err(io)?;
    let mut text = serde_json::to_vec_pretty(header).map_err(|e| BenchmarkError::Malformed(e.to_string()))?;
    text.push(b'\n');
    write_atomic(&root.join(BENCHMARK_FILE), &text).map_err(io)?;
    for s in stories {
        ProjectDir::with_assets_dir(root.join("stories").join(&s.id), root.join("assets")).save(s)?;
    }
    Ok(())
}

/// Builds a benchmark by running the director over each description.
pub fn construct_benchmark(
    root: &Path,
    kind: BenchmarkKind,
    descriptions: &[String],
    scripts_per_story: usize,
    llm: &BackendHandle,
    imgen: Option<&BackendHandle>,
    seed: u64,
) -> Result<Vec<StoryProject>, BenchmarkError> {
    let assets = AssetStore::open(root.join("assets")).map_err(|e| BenchmarkError::Project(ProjectIoError::Corrupt(e)))?;
    let mut stories = Vec::with_capacity(descriptions.len());
    for (i, d) in descriptions.iter().enumerate() {
        let mut project = StoryProject::new(format!("story-{:03}", i + 1), d.clone());
        project.config.seed = seed;
        let req = DirectorRequest {
            description: d.clone(),
            n_scripts: scripts_per_story,
            roster_hints: Vec::new(),
            vocabulary: project.config.shot_vocabulary.clone(),
            seed: seed.wrapping_add(i as u64),
        };
        direct(&mut project, &req, llm, imgen, &assets)?;
        stories.push(project);
    }
    let header = BenchmarkHeader {
        name: kind,
        stories: stories.len(),
        scripts_per_story,
    };
    write_benchmark(root, &header, &stories)?;
    Ok(stories)
}
