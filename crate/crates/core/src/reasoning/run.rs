use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{infer, Answer, ComposeContext, Mode, ReasoningResult, ResolvedPrompt};
use crate::dataset::SplitName;
use crate::gateway::{bounded_map, Gateway};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SlotOutcome {
    Ok { result: ReasoningResult },
    Error { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSlot {
    pub instance_id: String,
    pub mode: Mode,
    pub outcome: SlotOutcome,
    pub elapsed_ms: u64,
}

impl RunSlot {
    pub fn result(&self) -> Option<&ReasoningResult> {
        match &self.outcome {
            SlotOutcome::Ok { result } => Some(result),
            SlotOutcome::Error { .. } => None,
        }
    }
}

/// One execution of a prompt over a set of instances. Write-once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub version_id: Option<u64>,
    pub split: Option<SplitName>,
    pub modes: Vec<Mode>,
    pub instance_ids: Vec<String>,
    pub slots: Vec<RunSlot>,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
}

impl RunRecord {
    pub fn slot(&self, instance_id: &str, mode: Mode) -> Option<&RunSlot> {
        self.slots
            .iter()
            .find(|s| s.instance_id == instance_id && s.mode == mode)
    }

    pub fn result(&self, instance_id: &str, mode: Mode) -> Option<&ReasoningResult> {
        self.slot(instance_id, mode).and_then(RunSlot::result)
    }

    /// The answer for a slot; failed or missing slots count as `UNPARSEABLE`.
    pub fn answer(&self, instance_id: &str, mode: Mode) -> Answer {
        self.result(instance_id, mode)
            .map(|r| r.answer.clone())
            .unwrap_or(Answer::Unparseable)
    }

    pub fn has_mode(&self, mode: Mode) -> bool {
        self.modes.contains(&mode)
    }

    /// The mode whose answers are scored: multimodal when present.
    pub fn primary_mode(&self) -> Option<Mode> {
        if self.has_mode(Mode::Multimodal) {
            Some(Mode::Multimodal)
        } else {
            self.modes.first().copied()
        }
    }

    pub fn error_count(&self) -> usize {
        self.slots.iter().filter(|s| s.result().is_none()).count()
    }

    /// Copy with every timing field zeroed, for comparing runs.
    pub fn without_timing(&self) -> RunRecord {
        let mut r = self.clone();
        r.started_at = DateTime::<Utc>::UNIX_EPOCH;
        r.finished_at = DateTime::<Utc>::UNIX_EPOCH;
        for s in &mut r.slots {
            s.elapsed_ms = 0;
        }
        r
    }
}

/// Runs every (instance, mode) pair through the gateway with bounded parallelism.
/// Per-slot failures are recorded, never raised. `progress` receives `(done, total)`.
#[allow(clippy::too_many_arguments)]
pub fn run_split(
    run_id: impl Into<String>,
    version_id: Option<u64>,
    split: Option<SplitName>,
    prompt: &ResolvedPrompt,
    instance_ids: &[String],
    modes: &[Mode],
    ctx: &ComposeContext<'_>,
    gateway: &Gateway,
    progress: &(dyn Fn(usize, usize) + Sync),
) -> RunRecord {
    let started_at = Utc::now();
    let mut modes: Vec<Mode> = modes.to_vec();
    modes.sort();
    modes.dedup();
    let jobs: Vec<(&String, Mode)> = instance_ids
        .iter()
        .flat_map(|id| modes.iter().map(move |m| (id, *m)))
        .collect();
    let total = jobs.len();
    let done = AtomicUsize::new(0);
    progress(0, total);
    let slots = bounded_map(&jobs, gateway.config().parallelism, |_, (id, mode)| {
        let t0 = Instant::now();
        let outcome = match ctx.dataset.get(id) {
            None => SlotOutcome::Error {
                error: format!("unknown instance `{id}`"),
            },
            Some(instance) => match infer(instance, prompt, *mode, ctx, gateway) {
                Ok(result) => SlotOutcome::Ok { result },
                Err(e) => SlotOutcome::Error {
                    error: e.to_string(),
                },
            },
        };
        let n = done.fetch_add(1, Ordering::SeqCst) + 1;
        progress(n, total);
        RunSlot {
            instance_id: (*id).clone(),
            mode: *mode,
            outcome,
            elapsed_ms: t0.elapsed().as_millis() as u64,
        }
    });
    RunRecord {
        run_id: run_id.into(),
        version_id,
        split,
        modes,
        instance_ids: instance_ids.to_vec(),
        slots,
        started_at,
        finished_at: Utc::now(),
    }
}
