//! On-disk project: a directory of JSON files, each replaced atomically.
//!
//! ```text
//! project.json      metadata, settings, split assignment
//! principles.json   principle store and its history
//! versions.jsonl    prompt versions, one per line, append-only
//! metrics.json      evaluation links per version
//! runs/<id>.json    run records (write-once)
//! reports/<id>.json evaluation reports (write-once)
//! kshot.json        saved k-shot candidates
//! testset.json      saved and retrieved test instances
//! embeddings.json   cached instance embeddings
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_manifest, ClassLabel, Dataset, DatasetError, SplitAssignment, SplitName};
use crate::eval::{EvalReport, InstanceTestSet};
use crate::gateway::write_atomic;
use crate::interaction::InteractionConfig;
use crate::kshot::{InstanceEmbedding, KShotCandidate};
use crate::patterns::MiningParams;
use crate::principles::PrincipleStore;
use crate::prompts::{MetricsLink, PromptVersion, VersionHistory};
use crate::reasoning::RunRecord;

pub const SCHEMA_VERSION: u32 = 1;

/// Colors handed out to classes in class order.
pub const PALETTE: &[&str] = &["#4e79a7", "#e15759", "#76b7b2", "#f28e2b", "#59a14f", "#edc948", "#b07aa1", "#ff9da7"];

#[derive(Debug, thiserror::Error)]
pub enum ProjectError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("project schema version {found} is not supported (expected {expected}); migrate the project with a matching release first")]
    Schema { found: u32, expected: u32 },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("{0} already exists")]
    Exists(PathBuf),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ProjectError + '_ {
    move |source| ProjectError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub interaction: InteractionConfig,
    pub mining: MiningParams,
    /// Examples picked per recommendation.
    pub kshot_k: usize,
    /// Ranked candidates displayed per recommendation.
    pub kshot_pool: usize,
    pub max_agnostic_principles: usize,
    pub class_colors: BTreeMap<ClassLabel, String>,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            interaction: InteractionConfig::default(),
            mining: MiningParams::default(),
            kshot_k: 3,
            kshot_pool: 10,
            max_agnostic_principles: crate::principles::DEFAULT_MAX_AGNOSTIC,
            class_colors: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectMeta {
    pub schema_version: u32,
    pub name: String,
    pub created_at: DateTime<Utc>,
    /// Manifest the dataset is loaded from.
    pub manifest: Option<PathBuf>,
    pub splits: Option<SplitAssignment>,
    pub settings: Settings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Project {
    dir: PathBuf,
    pub meta: ProjectMeta,
    pub dataset: Option<Dataset>,
    pub principles: PrincipleStore,
    pub versions: VersionHistory,
    pub runs: BTreeMap<String, RunRecord>,
    pub reports: BTreeMap<String, EvalReport>,
    pub kshot: Vec<KShotCandidate>,
    pub testset: InstanceTestSet,
    pub embeddings: BTreeMap<String, InstanceEmbedding>,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, ProjectError> {
    let text = std::fs::read_to_string(path).map_err(io(path))?;
    serde_json::from_str(&text).map_err(|e| ProjectError::Parse { path: path.to_path_buf(), message: e.to_string() })
}

fn read_json_or_default<T: DeserializeOwned + Default>(path: &Path) -> Result<T, ProjectError> {
    if path.exists() {
        read_json(path)
    } else {
        Ok(T::default())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ProjectError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("project state serializes");
    bytes.push(b'\n');
    write_atomic(path, &bytes).map_err(io(path))
}

impl Project {
    /// Creates an empty project in `dir` (which may exist but must not hold a project).
    pub fn create(dir: impl AsRef<Path>, name: &str) -> Result<Project, ProjectError> {
        let dir = dir.as_ref().to_path_buf();
        if dir.join("project.json").exists() {
            return Err(ProjectError::Exists(dir.join("project.json")));
        }
        let project = Project {
            dir,
            meta: ProjectMeta {
                schema_version: SCHEMA_VERSION,
                name: name.to_string(),
                created_at: Utc::now(),
                manifest: None,
                splits: None,
                settings: Settings::default(),
            },
            dataset: None,
            principles: PrincipleStore::new(),
            versions: VersionHistory::new(),
            runs: BTreeMap::new(),
            reports: BTreeMap::new(),
            kshot: Vec::new(),
            testset: InstanceTestSet::default(),
            embeddings: BTreeMap::new(),
        };
        project.save()?;
        Ok(project)
    }

    pub fn open(dir: impl AsRef<Path>) -> Result<Project, ProjectError> {
        let dir = dir.as_ref().to_path_buf();
        let meta_path = dir.join("project.json");
        let raw: serde_json::Value = read_json(&meta_path)?;
        let found = raw.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != SCHEMA_VERSION {
            return Err(ProjectError::Schema { found, expected: SCHEMA_VERSION });
        }
        let meta: ProjectMeta = serde_json::from_value(raw)
            .map_err(|e| ProjectError::Parse { path: meta_path.clone(), message: e.to_string() })?;
        let dataset = match &meta.manifest {
            Some(m) => Some(load_manifest(m)?),
            None => None,
        };

        let mut versions = VersionHistory::new();
        let vpath = dir.join("versions.jsonl");
        if vpath.exists() {
            let text = std::fs::read_to_string(&vpath).map_err(io(&vpath))?;
            for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let v: PromptVersion = serde_json::from_str(line).map_err(|e| ProjectError::Parse {
                    path: vpath.clone(),
                    message: format!("line {}: {e}", n + 1),
                })?;
                versions.restore(v).map_err(ProjectError::Integrity)?;
            }
        }
        let metrics: BTreeMap<u64, Vec<MetricsLink>> = read_json_or_default(&dir.join("metrics.json"))?;
        for (v, links) in metrics {
            for l in links {
                versions
                    .link_metrics(v, l)
                    .map_err(|_| ProjectError::Integrity(format!("metrics refer to unknown prompt version {v}")))?;
            }
        }

        let project = Project {
            meta,
            dataset,
            principles: read_json_or_default(&dir.join("principles.json"))?,
            versions,
            runs: read_dir_json(&dir.join("runs"), |r: &RunRecord| r.run_id.clone())?,
            reports: read_dir_json(&dir.join("reports"), |r: &EvalReport| r.run_id.clone())?,
            kshot: read_json_or_default(&dir.join("kshot.json"))?,
            testset: read_json_or_default(&dir.join("testset.json"))?,
            embeddings: read_json_or_default(&dir.join("embeddings.json"))?,
            dir,
        };
        project.check_integrity()?;
        Ok(project)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Writes every file. Each write is atomic, so an interrupted save leaves
    /// each file either old or new, never torn.
    pub fn save(&self) -> Result<(), ProjectError> {
        std::fs::create_dir_all(&self.dir).map_err(io(&self.dir))?;
        self.save_versions()?;
        for run in self.runs.values() {
            self.save_run(run)?;
        }
        for report in self.reports.values() {
            self.save_report(report)?;
        }
        self.save_state()
    }

    /// Everything except the write-once run/report files and the version log.
    pub fn save_state(&self) -> Result<(), ProjectError> {
        write_json(&self.dir.join("principles.json"), &self.principles)?;
        let metrics: BTreeMap<u64, &[MetricsLink]> = self
            .versions
            .versions()
            .iter()
            .map(|v| (v.version_id, self.versions.metrics(v.version_id)))
            .filter(|(_, m)| !m.is_empty())
            .collect();
        write_json(&self.dir.join("metrics.json"), &metrics)?;
        write_json(&self.dir.join("kshot.json"), &self.kshot)?;
        write_json(&self.dir.join("testset.json"), &self.testset)?;
        write_json(&self.dir.join("embeddings.json"), &self.embeddings)?;
        // Metadata last: it is what marks the directory as a project.
        write_json(&self.dir.join("project.json"), &self.meta)
    }

    pub fn save_versions(&self) -> Result<(), ProjectError> {
        let mut out = Vec::new();
        for v in self.versions.versions() {
            serde_json::to_writer(&mut out, v).expect("version serializes");
            out.push(b'\n');
        }
        let path = self.dir.join("versions.jsonl");
        write_atomic(&path, &out).map_err(io(&path))
    }

    pub fn save_run(&self, run: &RunRecord) -> Result<(), ProjectError> {
        write_json(&self.dir.join("runs").join(format!("{}.json", run.run_id)), run)
    }

    pub fn save_report(&self, report: &EvalReport) -> Result<(), ProjectError> {
        write_json(&self.dir.join("reports").join(format!("{}.json", report.run_id)), report)
    }

    /// Loads the dataset from a manifest and assigns class colors.
    pub fn attach_dataset(&mut self, manifest: impl AsRef<Path>) -> Result<&Dataset, ProjectError> {
        let manifest = manifest.as_ref();
        let manifest = std::fs::canonicalize(manifest).map_err(io(manifest))?;
        let dataset = load_manifest(&manifest)?;
        self.meta.settings.class_colors = dataset
            .classes()
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), PALETTE[i % PALETTE.len()].to_string()))
            .collect();
        self.meta.manifest = Some(manifest);
        self.meta.splits = None;
        Ok(self.dataset.insert(dataset))
    }

    pub fn next_run_id(&self) -> String {
        (1..)
            .map(|n| format!("run-{n}"))
            .find(|id| !self.runs.contains_key(id))
            .expect("unbounded")
    }

    /// Versions that refer to the principle (deletion is refused while any do).
    pub fn principle_references(&self, principle_id: &str) -> Vec<u64> {
        self.versions.referencing(principle_id)
    }

    /// Every stored id must resolve. The first dangling reference is named.
    pub fn check_integrity(&self) -> Result<(), ProjectError> {
        let fail = |msg: String| Err(ProjectError::Integrity(msg));
        let known = |id: &str| self.dataset.as_ref().is_none_or(|d| d.contains(id));
        if let Some(splits) = &self.meta.splits {
            if self.dataset.is_none() {
                return fail("split assignment present without a dataset".into());
            }
            for split in SplitName::ALL {
                if let Some(id) = splits.ids(split).iter().find(|id| !known(id)) {
                    return fail(format!("{split} split refers to unknown instance `{id}`"));
                }
            }
        }
        for v in self.versions.versions() {
            for p in &v.snapshot.principles {
                if self.principles.get(&p.id).is_none() {
                    return fail(format!("prompt version {} refers to unknown principle `{}`", v.version_id, p.id));
                }
            }
            for m in self.versions.metrics(v.version_id) {
                if !self.runs.contains_key(&m.run_id) {
                    return fail(format!("prompt version {} links unknown run `{}`", v.version_id, m.run_id));
                }
            }
        }
        for run in self.runs.values() {
            if let Some(v) = run.version_id {
                if self.versions.get(v).is_err() {
                    return fail(format!("run `{}` refers to unknown prompt version {v}", run.run_id));
                }
            }
            if let Some(id) = run.instance_ids.iter().find(|id| !known(id)) {
                return fail(format!("run `{}` refers to unknown instance `{id}`", run.run_id));
            }
        }
        for r in self.reports.keys() {
            if !self.runs.contains_key(r) {
                return fail(format!("report refers to unknown run `{r}`"));
            }
        }
        let in_split = |id: &str, split: SplitName| self.meta.splits.as_ref().is_none_or(|s| s.ids(split).contains(id));
        for c in &self.kshot {
            if !known(&c.example_id) || !in_split(&c.example_id, SplitName::Demonstration) {
                return fail(format!("k-shot example `{}` is not a demonstration instance", c.example_id));
            }
        }
        for id in &self.testset.saved {
            if !known(id) || !in_split(id, SplitName::Validation) {
                return fail(format!("saved test instance `{id}` is not a validation instance"));
            }
        }
        for id in &self.testset.retrieved {
            if !known(id) || !in_split(id, SplitName::Test) {
                return fail(format!("retrieved test instance `{id}` is not a test instance"));
            }
        }
        let ids: BTreeSet<&String> = self.embeddings.keys().collect();
        if let Some(id) = ids.into_iter().find(|id| !known(id)) {
            return fail(format!("embedding cached for unknown instance `{id}`"));
        }
        Ok(())
    }
}

fn read_dir_json<T: DeserializeOwned>(dir: &Path, key: impl Fn(&T) -> String) -> Result<BTreeMap<String, T>, ProjectError> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    for p in paths {
        let value: T = read_json(&p)?;
        out.insert(key(&value), value);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{stratified_split, SplitRatios};
    use crate::reasoning::{Mode, ResolvedPrompt};
    use crate::testing::{fixture_dataset, result_slot, run_record};

    fn populated(dir: &Path) -> Project {
        let records: Vec<(String, String)> = (0..12)
            .map(|i| (format!("c{i:02}"), ["positive", "negative", "neutral"][i % 3].to_string()))
            .collect();
        let recs: Vec<(&str, &str, &str)> = records.iter().map(|(a, b)| (a.as_str(), b.as_str(), "words")).collect();
        let data_dir = dir.join("data");
        let _ = fixture_dataset(&data_dir, &["positive", "negative", "neutral"], &recs);
        let mut p = Project::create(dir.join("proj"), "demo").unwrap();
        p.attach_dataset(data_dir.join("manifest.json")).unwrap();
        let ds = p.dataset.clone().unwrap();
        p.meta.splits = Some(stratified_split(&ds, SplitRatios::default(), 3).unwrap());
        let id = p.principles.add_operator("Weigh both modalities.").unwrap().id.clone();
        let mut prompt = ResolvedPrompt::zero_shot("Classify.");
        p.versions.save(prompt.clone(), None, None).unwrap();
        prompt.principles.push(crate::reasoning::FrozenPrinciple { id, text: "Weigh both modalities.".into() });
        p.versions.save(prompt.clone(), None, None).unwrap();
        prompt.instruction.push_str(" Carefully.");
        p.versions.save(prompt, Some(1), None).unwrap();
        let val: Vec<String> = p.meta.splits.as_ref().unwrap().validation.iter().cloned().collect();
        for (n, v) in [(1u64, 1), (2, 2)] {
            let mut run = run_record(
                &format!("run-{n}"),
                &[Mode::Multimodal],
                val.iter().map(|id| result_slot(id, Mode::Multimodal, "positive", vec![])).collect(),
            );
            run.version_id = Some(v);
            let report = crate::eval::score_run(&run, &ds, &[]).unwrap();
            p.versions
                .link_metrics(v, MetricsLink { run_id: run.run_id.clone(), split: "validation".into(), accuracy: report.accuracy })
                .unwrap();
            p.reports.insert(run.run_id.clone(), report);
            p.runs.insert(run.run_id.clone(), run);
        }
        p.testset.saved.insert(val[0].clone());
        p.save().unwrap();
        p
    }

    #[test]
    fn empty_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let p = Project::create(tmp.path().join("p"), "empty").unwrap();
        assert_eq!(Project::open(tmp.path().join("p")).unwrap(), p);
        assert!(matches!(Project::create(tmp.path().join("p"), "again"), Err(ProjectError::Exists(_))));
    }

    #[test]
    fn populated_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let p = populated(tmp.path());
        let q = Project::open(p.dir()).unwrap();
        assert_eq!(q.versions.versions().len(), 3);
        assert_eq!(q.runs.len(), 2);
        assert_eq!(q, p);
        assert_eq!(q.meta.settings.class_colors.len(), 3);
    }

    #[test]
    fn tampered_reference_is_named() {
        let tmp = tempfile::tempdir().unwrap();
        let p = populated(tmp.path());
        let path = p.dir().join("runs/run-2.json");
        let text = std::fs::read_to_string(&path).unwrap();
        let first = &p.runs["run-2"].instance_ids[0];
        std::fs::write(&path, text.replace(&format!("\"{first}\""), "\"ghost-7\"")).unwrap();
        let err = Project::open(p.dir()).unwrap_err();
        assert!(err.to_string().contains("ghost-7"), "{err}");
    }

    #[test]
    fn schema_mismatch_is_refused() {
        let tmp = tempfile::tempdir().unwrap();
        let p = Project::create(tmp.path().join("p"), "x").unwrap();
        let path = p.dir().join("project.json");
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replace("\"schema_version\": 1", "\"schema_version\": 9")).unwrap();
        let err = Project::open(p.dir()).unwrap_err();
        assert!(matches!(err, ProjectError::Schema { found: 9, expected: 1 }));
        assert!(err.to_string().contains("migrate"));
    }

    #[test]
    fn run_ids_skip_taken() {
        let tmp = tempfile::tempdir().unwrap();
        let p = populated(tmp.path());
        assert_eq!(p.next_run_id(), "run-3");
    }
}
