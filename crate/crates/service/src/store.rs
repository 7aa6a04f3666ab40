//! Filesystem project store: `<root>/projects/<id>/project.json`, with one
//! content-addressed asset store shared by every project.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::Serialize;
use thiserror::Error;
use vstory_core::asset::{AssetError, AssetStore};
use vstory_core::project_io::{ProjectDir, ProjectIoError};
use vstory_core::story::StoryProject;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("project {0} not found")]
    NotFound(String),
    #[error("project {0} already exists")]
    Exists(String),
    #[error("invalid project id {0:?}")]
    InvalidId(String),
    #[error(transparent)]
    Project(#[from] ProjectIoError),
    #[error(transparent)]
    Asset(#[from] AssetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, Serialize)]
pub struct ProjectSummary {
    pub id: String,
    pub version: u64,
    pub description: String,
    pub scripts: usize,
    pub keyframes: usize,
}

pub fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 64
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

pub struct ProjectStore {
    root: PathBuf,
    assets: AssetStore,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl ProjectStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        std::fs::create_dir_all(root.join("projects"))?;
        let assets = AssetStore::open(root.join("assets"))?;
        Ok(Self {
            root,
            assets,
            locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn assets(&self) -> &AssetStore {
        &self.assets
    }

    pub fn dir(&self, id: &str) -> ProjectDir {
        ProjectDir::with_assets_dir(self.root.join("projects").join(id), self.assets.dir())
    }

    pub fn exists(&self, id: &str) -> bool {
        valid_id(id) && self.dir(id).exists()
    }

    /// Serializes read-modify-write cycles on one project.
    pub fn lock(&self, id: &str) -> Arc<Mutex<()>> {
        self.locks.lock().entry(id.to_string()).or_default().clone()
    }

    pub fn load(&self, id: &str) -> Result<StoryProject, StoreError> {
        if !self.exists(id) {
            return Err(StoreError::NotFound(id.to_string()));
        }
        Ok(self.dir(id).load()?)
    }

    pub fn save(&self, project: &StoryProject) -> Result<(), StoreError> {
        Ok(self.dir(&project.id).save(project)?)
    }

    pub fn create(&self, project: &StoryProject) -> Result<(), StoreError> {
        if !valid_id(&project.id) {
            return Err(StoreError::InvalidId(project.id.clone()));
        }
        let lock = self.lock(&project.id);
        let _g = lock.lock();
        if self.dir(&project.id).exists() {
            return Err(StoreError::Exists(project.id.clone()));
        }
        self.save(project)
    }

    pub fn list(&self) -> Result<Vec<ProjectSummary>, StoreError> {
        let mut out = Vec::new();
        for entry in std::fs::read_dir(self.root.join("projects"))? {
            let Ok(id) = entry?.file_name().into_string() else {
                continue;
            };
            if !self.exists(&id) {
                continue;
            }
            match self.load(&id) {
                Ok(p) => out.push(ProjectSummary {
                    id: p.id.clone(),
                    version: p.version,
                    description: p.description.clone(),
                    scripts: p.scripts.len(),
                    keyframes: p.current_keyframes().len(),
                }),
                Err(e) => tracing::warn!(project = %id, error = %e, "skipping unreadable project"),
            }
        }
        out.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(out)
    }
}
