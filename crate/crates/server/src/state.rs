//! Shared server state: the active project, the provider gateway and jobs.
//!
//! Reads take the project read lock and never wait on provider calls.
//! Mutations are serialized by `writer`; slow ones work on a clone of the
//! project and swap it in at the end.

use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use promptlens_core::gateway::Gateway;
use promptlens_core::project::Project;
use promptlens_core::session::SessionError;

use crate::jobs::JobRegistry;

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    project: RwLock<Option<Project>>,
    writer: Mutex<()>,
    gateway: Arc<Gateway>,
    jobs: JobRegistry,
    /// Directory new projects are created under when given a bare name.
    projects_root: Option<PathBuf>,
}

pub type Result<T> = std::result::Result<T, SessionError>;

fn no_project() -> SessionError {
    SessionError::Precondition("no active project: POST /api/projects first".into())
}

impl AppState {
    pub fn new(project: Option<Project>, gateway: Gateway, projects_root: Option<PathBuf>) -> Self {
        AppState {
            inner: Arc::new(Inner {
                project: RwLock::new(project),
                writer: Mutex::new(()),
                gateway: Arc::new(gateway),
                jobs: JobRegistry::new(),
                projects_root,
            }),
        }
    }

    pub fn gateway(&self) -> Arc<Gateway> {
        self.inner.gateway.clone()
    }

    pub fn jobs(&self) -> &JobRegistry {
        &self.inner.jobs
    }

    pub fn projects_root(&self) -> Option<&PathBuf> {
        self.inner.projects_root.as_ref()
    }

    pub fn read<T>(&self, f: impl FnOnce(&Project) -> Result<T>) -> Result<T> {
        let guard = self.inner.project.read().unwrap();
        f(guard.as_ref().ok_or_else(no_project)?)
    }

    /// A quick mutation done in place.
    pub fn write<T>(&self, f: impl FnOnce(&mut Project) -> Result<T>) -> Result<T> {
        let _w = self.inner.writer.lock().unwrap();
        let mut guard = self.inner.project.write().unwrap();
        f(guard.as_mut().ok_or_else(no_project)?)
    }

    /// A slow mutation (provider calls) done on a copy; readers keep seeing
    /// the previous state until it completes.
    pub fn write_detached<T>(&self, f: impl FnOnce(&mut Project) -> Result<T>) -> Result<T> {
        let _w = self.inner.writer.lock().unwrap();
        let mut copy = self.read(|p| Ok(p.clone()))?;
        let out = f(&mut copy);
        if out.is_ok() {
            *self.inner.project.write().unwrap() = Some(copy);
        } else {
            // The copy may have persisted partial progress (e.g. cached
            // embeddings); reload so memory matches disk.
            let dir = copy.dir().to_path_buf();
            if let Ok(p) = Project::open(&dir) {
                *self.inner.project.write().unwrap() = Some(p);
            }
        }
        out
    }

    pub fn replace_project(&self, project: Project) {
        let _w = self.inner.writer.lock().unwrap();
        *self.inner.project.write().unwrap() = Some(project);
    }

    pub fn has_project(&self) -> bool {
        self.inner.project.read().unwrap().is_some()
    }
}
