//! On-disk project layout: `project.json` plus `assets/<sha256>.<ext>`.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::asset::{write_atomic, AssetError, AssetStore};
use crate::story::{StoryProject, SCHEMA_VERSION};

pub const PROJECT_FILE: &str = "project.json";
pub const ASSETS_DIR: &str = "assets";

#[derive(Debug, Error)]
pub enum ProjectIoError {
    #[error("project schema_version {found:?} needs migration to {expected:?}")]
    Migration { found: String, expected: String },
    #[error("project file is malformed: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("corrupt project: {0}")]
    Corrupt(#[from] AssetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A project directory.
#[derive(Clone, Debug)]
pub struct ProjectDir {
    root: PathBuf,
    assets_dir: PathBuf,
}

impl ProjectDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        let root = root.into();
        let assets_dir = root.join(ASSETS_DIR);
        Self { root, assets_dir }
    }

    /// A project whose assets live in a shared directory (benchmarks).
    pub fn with_assets_dir(root: impl Into<PathBuf>, assets_dir: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            assets_dir: assets_dir.into(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn project_file(&self) -> PathBuf {
        self.root.join(PROJECT_FILE)
    }

    pub fn exists(&self) -> bool {
        self.project_file().exists()
    }

    pub fn assets(&self) -> Result<AssetStore, ProjectIoError> {
        Ok(AssetStore::open(&self.assets_dir)?)
    }

    pub fn save(&self, project: &StoryProject) -> Result<(), ProjectIoError> {
        fs::create_dir_all(&self.root)?;
        write_atomic(&self.project_file(), &encode_project(project)?)?;
        Ok(())
    }

    pub fn load(&self) -> Result<StoryProject, ProjectIoError> {
        let bytes = fs::read(self.project_file())?;
        let project = decode_project(&bytes)?;
        let store = self.assets()?;
        for asset in project
            .roster
            .iter()
            .filter_map(|r| r.asset.as_ref())
            .chain(project.keyframes.iter().map(|k| &k.asset))
        {
            store.verify(asset)?;
        }
        Ok(project)
    }
}

/// Canonical serialized form: pretty JSON with a trailing newline.
pub fn encode_project(project: &StoryProject) -> Result<Vec<u8>, serde_json::Error> {
    let mut bytes = serde_json::to_vec_pretty(project)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Parses a project, checking the schema version before anything else.
pub fn decode_project(bytes: &[u8]) -> Result<StoryProject, ProjectIoError> {
    let value: serde_json::Value = serde_json::from_slice(bytes)?;
    let found = value
        .get("schema_version")
        .and_then(|v| v.as_str())
        .unwrap_or("")
        .to_string();
    if found != SCHEMA_VERSION {
        return Err(ProjectIoError::Migration {
            found,
            expected: SCHEMA_VERSION.to_string(),
        });
    }
    Ok(serde_json::from_value(value)?)
}

pub fn save_project(project: &StoryProject, dir: impl AsRef<Path>) -> Result<(), ProjectIoError> {
    ProjectDir::new(dir.as_ref()).save(project)
}

pub fn load_project(dir: impl AsRef<Path>) -> Result<StoryProject, ProjectIoError> {
    ProjectDir::new(dir.as_ref()).load()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_project_resaves_byte_identically() {
        let dir = tempfile::tempdir().unwrap();
        let p = StoryProject::new("empty", "nothing happens");
        save_project(&p, dir.path()).unwrap();
        let first = fs::read(dir.path().join(PROJECT_FILE)).unwrap();
        let loaded = load_project(dir.path()).unwrap();
        assert_eq!(loaded, p);
        save_project(&loaded, dir.path()).unwrap();
        assert_eq!(fs::read(dir.path().join(PROJECT_FILE)).unwrap(), first);
    }

    #[test]
    fn old_schema_needs_migration() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = StoryProject::new("old", "");
        p.schema_version = "0".into();
        save_project(&p, dir.path()).unwrap();
        match load_project(dir.path()) {
            Err(ProjectIoError::Migration { found, expected }) => {
                assert_eq!(found, "0");
                assert_eq!(expected, "1");
            }
            other => panic!("expected migration error, got {other:?}"),
        }
    }
}
