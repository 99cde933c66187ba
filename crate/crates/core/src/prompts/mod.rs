//! Immutable prompt versions, their diffs and timeline, and bundled task templates.

pub mod diff;

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

pub use diff::{apply_diff, diff_prompts, ApplyError, ItemChange, Op, SectionFlags, StructuredDiff, TextSpan};

use crate::reasoning::{PromptSpec, ResolvedPrompt};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptVersion {
    pub version_id: u64,
    pub parent: Option<u64>,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    /// Frozen snapshot; renders the same whatever happens to the principle store.
    pub snapshot: ResolvedPrompt,
}

impl PromptVersion {
    pub fn spec(&self) -> PromptSpec {
        self.snapshot.spec()
    }

    pub fn render_text(&self) -> String {
        self.snapshot.render_text()
    }
}

/// Evaluation linked to a version after the fact (versions themselves never change).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLink {
    pub run_id: String,
    pub split: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VersionError {
    #[error("unknown prompt version {0}")]
    Unknown(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineRow {
    pub version_id: u64,
    pub parent: Option<u64>,
    pub created_at: DateTime<Utc>,
    pub accuracy: Option<f64>,
    /// Sections changed relative to the parent (all set for a root version).
    pub changed: SectionFlags,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VersionHistory {
    versions: Vec<PromptVersion>,
    #[serde(default)]
    metrics: BTreeMap<u64, Vec<MetricsLink>>,
}

impl VersionHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn versions(&self) -> &[PromptVersion] {
        &self.versions
    }

    pub fn get(&self, id: u64) -> Result<&PromptVersion, VersionError> {
        self.versions
            .iter()
            .find(|v| v.version_id == id)
            .ok_or(VersionError::Unknown(id))
    }

    pub fn latest(&self) -> Option<&PromptVersion> {
        self.versions.last()
    }

    /// Saves a new version. Its parent is `branch_from` when given, otherwise
    /// the latest version.
    pub fn save(
        &mut self,
        snapshot: ResolvedPrompt,
        branch_from: Option<u64>,
        note: Option<String>,
    ) -> Result<&PromptVersion, VersionError> {
        let parent = match branch_from {
            Some(id) => Some(self.get(id)?.version_id),
            None => self.latest().map(|v| v.version_id),
        };
        let version_id = self.latest().map_or(1, |v| v.version_id + 1);
        self.versions.push(PromptVersion {
            version_id,
            parent,
            created_at: Utc::now(),
            note,
            snapshot,
        });
        Ok(self.versions.last().expect("just pushed"))
    }

    /// Re-adds a stored version (loading from disk); ids must keep increasing.
    pub fn restore(&mut self, version: PromptVersion) -> Result<(), String> {
        if let Some(last) = self.latest() {
            if version.version_id <= last.version_id {
                return Err(format!(
                    "version {} does not follow version {}",
                    version.version_id, last.version_id
                ));
            }
        }
        if let Some(p) = version.parent {
            if self.get(p).is_err() {
                return Err(format!("version {} has unknown parent {p}", version.version_id));
            }
        }
        self.versions.push(version);
        Ok(())
    }

    pub fn link_metrics(&mut self, version_id: u64, link: MetricsLink) -> Result<(), VersionError> {
        self.get(version_id)?;
        self.metrics.entry(version_id).or_default().push(link);
        Ok(())
    }

    pub fn metrics(&self, version_id: u64) -> &[MetricsLink] {
        self.metrics.get(&version_id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Versions whose snapshot uses the principle.
    pub fn referencing(&self, principle_id: &str) -> Vec<u64> {
        self.versions
            .iter()
            .filter(|v| v.snapshot.principles.iter().any(|p| p.id == principle_id))
            .map(|v| v.version_id)
            .collect()
    }

    pub fn diff(&self, a: u64, b: u64) -> Result<StructuredDiff, VersionError> {
        Ok(diff_prompts(&self.get(a)?.snapshot, &self.get(b)?.snapshot))
    }

    /// One row per version in id order; accuracy is the most recent linked
    /// evaluation.
    pub fn timeline(&self) -> Vec<TimelineRow> {
        self.versions
            .iter()
            .map(|v| {
                let changed = match v.parent.and_then(|p| self.get(p).ok()) {
                    Some(parent) => diff_prompts(&parent.snapshot, &v.snapshot).sections(),
                    None => SectionFlags {
                        instruction: true,
                        principles: !v.snapshot.principles.is_empty(),
                        kshot: !v.snapshot.kshot.is_empty(),
                    },
                };
                TimelineRow {
                    version_id: v.version_id,
                    parent: v.parent,
                    created_at: v.created_at,
                    accuracy: self.metrics(v.version_id).last().map(|m| m.accuracy),
                    changed,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: String,
    pub instruction: String,
}

impl PromptTemplate {
    pub fn spec(&self) -> PromptSpec {
        PromptSpec::new(self.instruction.clone())
    }
}

pub fn bundled_templates() -> Vec<PromptTemplate> {
    [
        ("sentiment", include_str!("../../assets/templates/sentiment.txt")),
        ("intent", include_str!("../../assets/templates/intent.txt")),
    ]
    .into_iter()
    .map(|(name, text)| PromptTemplate {
        name: name.into(),
        instruction: text.trim_end().to_string(),
    })
    .collect()
}

#[cfg(test)]
mod tests;
