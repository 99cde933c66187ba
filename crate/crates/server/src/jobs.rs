//! Background jobs: long provider-bound work runs on its own thread while
//! clients poll `GET /api/jobs/{id}`.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    RunSplit,
    Mine,
    Recommend,
    GeneratePrinciples,
    DraftRationale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub completed: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub job_id: String,
    pub kind: JobKind,
    pub state: JobState,
    pub progress: Progress,
    /// Where the outcome lives (e.g. a run id), when it is persisted.
    pub result_ref: Option<String>,
    pub result: Option<serde_json::Value>,
    pub error: Option<String>,
    pub created_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
}

/// Output of a finished job body.
pub struct JobOutput {
    pub result_ref: Option<String>,
    pub result: serde_json::Value,
}

/// Refusal to start an exclusive job; carries the id of the one in flight.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Busy(pub String);

/// Handle given to a job body to report progress.
#[derive(Clone)]
pub struct JobHandle {
    registry: JobRegistry,
    id: String,
}

impl JobHandle {
    /// Progress only moves forward; stale or regressing reports are ignored.
    pub fn progress(&self, completed: usize, total: usize) {
        self.registry.update(&self.id, |j| {
            if j.state == JobState::Running && completed >= j.progress.completed {
                j.progress = Progress { completed: completed.min(total), total };
            }
        });
    }

    pub fn id(&self) -> &str {
        &self.id
    }
}

#[derive(Clone, Default)]
pub struct JobRegistry {
    inner: Arc<Mutex<Inner>>,
}

#[derive(Default)]
struct Inner {
    next: u64,
    jobs: BTreeMap<String, Job>,
}

impl JobRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: &str) -> Option<Job> {
        self.inner.lock().unwrap().jobs.get(id).cloned()
    }

    pub fn list(&self) -> Vec<Job> {
        self.inner.lock().unwrap().jobs.values().cloned().collect()
    }

    fn update(&self, id: &str, f: impl FnOnce(&mut Job)) {
        if let Some(j) = self.inner.lock().unwrap().jobs.get_mut(id) {
            if !j.state.is_terminal() {
                f(j);
            }
        }
    }

    /// Registers a queued job and starts `body` on a worker thread. With
    /// `exclusive`, refuses while another job of the same kind is unfinished.
    pub fn submit<F>(&self, kind: JobKind, exclusive: bool, body: F) -> Result<String, Busy>
    where
        F: FnOnce(&JobHandle) -> Result<JobOutput, String> + Send + 'static,
    {
        let id = {
            let mut inner = self.inner.lock().unwrap();
            if exclusive {
                if let Some(active) = inner.jobs.values().find(|j| j.kind == kind && !j.state.is_terminal()) {
                    return Err(Busy(active.job_id.clone()));
                }
            }
            inner.next += 1;
            let id = format!("job-{}", inner.next);
            inner.jobs.insert(
                id.clone(),
                Job {
                    job_id: id.clone(),
                    kind,
                    state: JobState::Queued,
                    progress: Progress { completed: 0, total: 0 },
                    result_ref: None,
                    result: None,
                    error: None,
                    created_at: Utc::now(),
                    finished_at: None,
                },
            );
            id
        };
        let handle = JobHandle { registry: self.clone(), id: id.clone() };
        std::thread::spawn(move || {
            handle.registry.update(&handle.id, |j| j.state = JobState::Running);
            let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| body(&handle)))
                .unwrap_or_else(|_| Err("job panicked".into()));
            handle.registry.update(&handle.id, |j| {
                match outcome {
                    Ok(out) => {
                        j.state = JobState::Done;
                        j.progress.completed = j.progress.total;
                        j.result_ref = out.result_ref;
                        j.result = Some(out.result);
                    }
                    Err(e) => {
                        log::warn!("{} failed: {e}", j.job_id);
                        j.state = JobState::Failed;
                        j.error = Some(e);
                    }
                }
                j.finished_at = Some(Utc::now());
            });
        });
        Ok(id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::mpsc;
    use std::time::{Duration, Instant};

    fn wait_for(reg: &JobRegistry, id: &str, want: JobState) -> Job {
        let start = Instant::now();
        loop {
            let j = reg.get(id).unwrap();
            if j.state == want {
                return j;
            }
            assert!(start.elapsed() < Duration::from_secs(5), "stuck in {:?}", j.state);
            std::thread::sleep(Duration::from_millis(2));
        }
    }

    #[test]
    fn states_advance_and_terminal_is_final() {
        let reg = JobRegistry::new();
        let (go_tx, go_rx) = mpsc::channel::<()>();
        let (step_tx, step_rx) = mpsc::channel::<()>();
        let id = reg
            .submit(JobKind::RunSplit, true, move |h| {
                go_rx.recv().unwrap();
                h.progress(1, 4);
                h.progress(3, 4);
                h.progress(2, 4); // ignored: regress
                step_tx.send(()).unwrap();
                Ok(JobOutput { result_ref: Some("run-1".into()), result: serde_json::json!({"ok": true}) })
            })
            .unwrap();
        let running = wait_for(&reg, &id, JobState::Running);
        assert_eq!(running.progress.completed, 0);
        // A second exclusive job of the same kind is refused while this one runs.
        assert!(reg.submit(JobKind::RunSplit, true, |_| Err("no".into())).is_err());
        // Other kinds are not blocked.
        reg.submit(JobKind::Mine, false, |_| Err("boom".into())).unwrap();
        go_tx.send(()).unwrap();
        step_rx.recv().unwrap();
        let done = wait_for(&reg, &id, JobState::Done);
        assert_eq!(done.progress, Progress { completed: 4, total: 4 });
        assert_eq!(done.result_ref.as_deref(), Some("run-1"));
        // Late reports cannot touch a finished job.
        JobHandle { registry: reg.clone(), id: id.clone() }.progress(0, 9);
        assert_eq!(reg.get(&id).unwrap(), done);
        reg.submit(JobKind::RunSplit, true, |_| Ok(JobOutput { result_ref: None, result: serde_json::Value::Null }))
            .unwrap();
    }

    #[test]
    fn failures_and_panics_are_reported() {
        let reg = JobRegistry::new();
        let a = reg.submit(JobKind::Recommend, false, |_| Err("provider down".into())).unwrap();
        let b = reg.submit(JobKind::Recommend, false, |_| panic!("bug")).unwrap();
        assert_eq!(wait_for(&reg, &a, JobState::Failed).error.as_deref(), Some("provider down"));
        assert_eq!(wait_for(&reg, &b, JobState::Failed).error.as_deref(), Some("job panicked"));
        assert_ne!(a, b);
    }
}
