//! Project-level operations shared by the CLI and the HTTP service: each one
//! validates against the project, calls the engine, and persists the outcome.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{stratified_split, ClassLabel, Dataset, SplitAssignment, SplitName, SplitRatios};
use crate::eval::{score_run, EvalReport, OutcomeMatrix, Retrieval};
use crate::gateway::Gateway;
use crate::interaction::{summarize, SankeySummary};
use crate::kshot::{self, KShotCandidate, Recommendation, Target};
use crate::patterns::{mine_run, MiningParams, MiningResult};
use crate::principles::{self, ErrorCase, GenerationReport, PrincipleError};
use crate::project::{Project, ProjectError};
use crate::prompts::{MetricsLink, PromptVersion};
use crate::reasoning::{run_split, ComposeContext, Mode, PromptAssets, PromptSpec, ResolvedPrompt, RunRecord};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        FieldError { field: field.into(), message: message.into() }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("invalid request: {}", .0.iter().map(|e| format!("{}: {}", e.field, e.message)).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<FieldError>),
    #[error("{0}")]
    Precondition(String),
    #[error("{0}")]
    Conflict(String),
    #[error("provider error: {0}")]
    Gateway(String),
    #[error(transparent)]
    Project(#[from] ProjectError),
}

impl SessionError {
    pub fn invalid(field: &str, message: impl Into<String>) -> Self {
        SessionError::Invalid(vec![FieldError::new(field, message)])
    }
}

impl From<PrincipleError> for SessionError {
    fn from(e: PrincipleError) -> Self {
        match e {
            PrincipleError::UnknownId(id) => SessionError::NotFound(format!("principle `{id}`")),
            PrincipleError::Referenced { .. } => SessionError::Conflict(e.to_string()),
            PrincipleError::Duplicate(_) => SessionError::Conflict(e.to_string()),
            PrincipleError::EmptyText => SessionError::invalid("text", e.to_string()),
            PrincipleError::MissingSources => SessionError::invalid("source_instance_ids", e.to_string()),
            PrincipleError::NoSelection | PrincipleError::NothingToCondense => SessionError::Precondition(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, SessionError>;

pub fn dataset(project: &Project) -> Result<&Dataset> {
    project
        .dataset
        .as_ref()
        .ok_or_else(|| SessionError::Precondition("no dataset attached; ingest a manifest first".into()))
}

pub fn splits(project: &Project) -> Result<&SplitAssignment> {
    project
        .meta
        .splits
        .as_ref()
        .ok_or_else(|| SessionError::Precondition("dataset is not split yet".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub name: String,
    pub instances: usize,
    pub class_counts: BTreeMap<ClassLabel, usize>,
    pub class_colors: BTreeMap<ClassLabel, String>,
}

pub fn ingest(project: &mut Project, manifest: &Path) -> Result<DatasetSummary> {
    if !project.runs.is_empty() || !project.versions.versions().is_empty() {
        return Err(SessionError::Conflict("the project already has versions or runs; start a new project for a new dataset".into()));
    }
    let ds = project.attach_dataset(manifest)?;
    let summary = DatasetSummary {
        name: ds.name.clone(),
        instances: ds.len(),
        class_counts: ds.class_counts(),
        class_colors: BTreeMap::new(),
    };
    project.kshot.clear();
    project.testset = Default::default();
    project.embeddings.clear();
    project.save_state()?;
    Ok(DatasetSummary { class_colors: project.meta.settings.class_colors.clone(), ..summary })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub seed: u64,
    pub sizes: BTreeMap<SplitName, usize>,
    /// Per split, per class.
    pub class_counts: BTreeMap<SplitName, BTreeMap<ClassLabel, usize>>,
}

pub fn split_summary(dataset: &Dataset, s: &SplitAssignment) -> SplitSummary {
    let mut sizes = BTreeMap::new();
    let mut class_counts = BTreeMap::new();
    for split in SplitName::ALL {
        sizes.insert(split, s.ids(split).len());
        let mut counts: BTreeMap<ClassLabel, usize> = dataset.classes().iter().map(|c| (c.clone(), 0)).collect();
        for id in s.ids(split) {
            if let Some(l) = dataset.label_of(id) {
                *counts.entry(l.clone()).or_default() += 1;
            }
        }
        class_counts.insert(split, counts);
    }
    SplitSummary { seed: s.seed, sizes, class_counts }
}

pub fn split(project: &mut Project, seed: u64, ratios: SplitRatios) -> Result<SplitSummary> {
    if !project.runs.is_empty() {
        return Err(SessionError::Conflict("re-splitting would invalidate existing runs".into()));
    }
    let ds = dataset(project)?;
    let assignment = stratified_split(ds, ratios, seed).map_err(|e| SessionError::invalid("ratios", e.to_string()))?;
    let summary = split_summary(ds, &assignment);
    project.meta.splits = Some(assignment);
    project.kshot.clear();
    project.testset = Default::default();
    project.save_state()?;
    Ok(summary)
}

/// Field-level problems with a prompt spec; empty when it can be saved.
pub fn validate_spec(project: &Project, spec: &PromptSpec) -> Vec<FieldError> {
    let mut errors = Vec::new();
    if spec.instruction.trim().is_empty() {
        errors.push(FieldError::new("instruction", "must not be empty"));
    }
    let mut seen = BTreeSet::new();
    for (i, id) in spec.principles.iter().enumerate() {
        if project.principles.get(id).is_none() {
            errors.push(FieldError::new(format!("principles[{i}]"), format!("unknown principle `{id}`")));
        } else if !seen.insert(id) {
            errors.push(FieldError::new(format!("principles[{i}]"), format!("`{id}` listed twice")));
        }
    }
    let demo = project.meta.splits.as_ref().map(|s| &s.demonstration);
    let classes = project.dataset.as_ref().map(|d| d.classes());
    let mut seen = BTreeSet::new();
    for (i, ex) in spec.kshot.iter().enumerate() {
        let field = format!("kshot[{i}]");
        match demo {
            None => errors.push(FieldError::new(&field, "k-shot examples need a split dataset")),
            Some(d) if !d.contains(&ex.instance_id) => {
                errors.push(FieldError::new(&field, format!("`{}` is not a demonstration instance", ex.instance_id)))
            }
            _ => {}
        }
        if !seen.insert(&ex.instance_id) {
            errors.push(FieldError::new(&field, format!("`{}` listed twice", ex.instance_id)));
        }
        if ex.rationale.trim().is_empty() {
            errors.push(FieldError::new(format!("{field}.rationale"), "must not be empty"));
        }
        if classes.is_some_and(|c| !c.contains(&ex.answer)) {
            errors.push(FieldError::new(format!("{field}.answer"), format!("`{}` is not a class", ex.answer)));
        }
    }
    errors
}

pub fn save_version(
    project: &mut Project,
    spec: &PromptSpec,
    branch_from: Option<u64>,
    note: Option<String>,
) -> Result<PromptVersion> {
    let errors = validate_spec(project, spec);
    if !errors.is_empty() {
        return Err(SessionError::Invalid(errors));
    }
    let resolved = spec
        .resolve(|id| project.principles.text_of(id))
        .map_err(|id| SessionError::invalid("principles", format!("unknown principle `{id}`")))?;
    let v = project
        .versions
        .save(resolved, branch_from, note)
        .map_err(|e| SessionError::invalid("branch_from", e.to_string()))?
        .clone();
    project.save_versions()?;
    Ok(v)
}

/// Everything a run needs, detached from the project so the project stays
/// available while the run is in flight.
#[derive(Debug, Clone)]
pub struct RunPlan {
    pub run_id: String,
    pub version_id: u64,
    pub split: SplitName,
    pub prompt: ResolvedPrompt,
    pub instance_ids: Vec<String>,
    pub modes: Vec<Mode>,
    pub dataset: Dataset,
    pub demonstration: BTreeSet<String>,
}

impl RunPlan {
    pub fn slots(&self) -> usize {
        self.instance_ids.len() * self.modes.len()
    }
}

pub fn plan_run(project: &Project, version_id: u64, split: SplitName, modes: &[Mode]) -> Result<RunPlan> {
    let ds = dataset(project)?;
    let splits = splits(project)?;
    let version = project
        .versions
        .get(version_id)
        .map_err(|_| SessionError::NotFound(format!("prompt version {version_id}")))?;
    if modes.is_empty() {
        return Err(SessionError::invalid("modes", "at least one mode is required"));
    }
    if split == SplitName::Demonstration {
        return Err(SessionError::invalid("split", "the demonstration split is not scored"));
    }
    let instance_ids: Vec<String> = splits.ids(split).iter().cloned().collect();
    if instance_ids.is_empty() {
        return Err(SessionError::Precondition(format!("the {split} split is empty")));
    }
    Ok(RunPlan {
        run_id: project.next_run_id(),
        version_id,
        split,
        prompt: version.snapshot.clone(),
        instance_ids,
        modes: modes.to_vec(),
        dataset: ds.clone(),
        demonstration: splits.demonstration.clone(),
    })
}

pub fn execute_run(plan: &RunPlan, gateway: &Gateway, progress: &(dyn Fn(usize, usize) + Sync)) -> RunRecord {
    let assets = PromptAssets::bundled();
    let cfg = gateway.config();
    let ctx = ComposeContext {
        dataset: &plan.dataset,
        demonstration: Some(&plan.demonstration),
        assets: &assets,
        model_id: &cfg.roles.reasoning,
        temperature: cfg.temperature,
        max_tokens: cfg.max_tokens,
        max_frames: cfg.max_frames,
    };
    run_split(
        plan.run_id.clone(),
        Some(plan.version_id),
        Some(plan.split),
        &plan.prompt,
        &plan.instance_ids,
        &plan.modes,
        &ctx,
        gateway,
        progress,
    )
}

/// Stores the run, scores it and links the score to its prompt version.
pub fn commit_run(project: &mut Project, run: RunRecord) -> Result<EvalReport> {
    if project.runs.contains_key(&run.run_id) {
        return Err(SessionError::Conflict(format!("run `{}` already exists", run.run_id)));
    }
    let ds = dataset(project)?;
    let kshot = run
        .version_id
        .and_then(|v| project.versions.get(v).ok())
        .map(|v| v.snapshot.kshot.clone())
        .unwrap_or_default();
    let report = score_run(&run, ds, &kshot).map_err(|e| SessionError::Precondition(e.to_string()))?;
    project.save_run(&run)?;
    project.save_report(&report)?;
    if let Some(v) = run.version_id {
        let link = MetricsLink {
            run_id: run.run_id.clone(),
            split: run.split.map_or("custom".into(), |s| s.to_string()),
            accuracy: report.accuracy,
        };
        project
            .versions
            .link_metrics(v, link)
            .map_err(|e| SessionError::NotFound(e.to_string()))?;
    }
    project.reports.insert(run.run_id.clone(), report.clone());
    project.runs.insert(run.run_id.clone(), run);
    project.save_state()?;
    Ok(report)
}

/// Plan, execute and commit in one go.
pub fn run_version(
    project: &mut Project,
    version_id: u64,
    split: SplitName,
    modes: &[Mode],
    gateway: &Gateway,
    progress: &(dyn Fn(usize, usize) + Sync),
) -> Result<(RunRecord, EvalReport)> {
    let plan = plan_run(project, version_id, split, modes)?;
    let run = execute_run(&plan, gateway, progress);
    let _ = gateway.flush();
    let report = commit_run(project, run.clone())?;
    Ok((run, report))
}

pub fn run(project: &Project, run_id: &str) -> Result<RunRecord> {
    project
        .runs
        .get(run_id)
        .cloned()
        .ok_or_else(|| SessionError::NotFound(format!("run `{run_id}`")))
}

pub fn sankey(project: &Project, run_id: &str) -> Result<SankeySummary> {
    let r = project.runs.get(run_id).ok_or_else(|| SessionError::NotFound(format!("run `{run_id}`")))?;
    summarize(r, dataset(project)?, &project.meta.settings.interaction).map_err(|e| SessionError::Precondition(e.to_string()))
}

pub fn mine(
    run: &RunRecord,
    dataset: &Dataset,
    scope: Option<&[String]>,
    params: &MiningParams,
    gateway: &Gateway,
) -> Result<MiningResult> {
    mine_run(run, dataset, scope, params, gateway).map_err(|e| match e {
        crate::patterns::MiningError::Params(m) => SessionError::invalid("cluster_params", m),
        crate::patterns::MiningError::Gateway(g) => SessionError::Gateway(g.to_string()),
        other => SessionError::Precondition(other.to_string()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendOutcome {
    pub recommendation: Recommendation,
    /// Drafted candidates for the selected examples (stored unsaved).
    pub candidates: Vec<KShotCandidate>,
    pub warnings: Vec<String>,
}

/// Embeds whatever is missing (cached in the project), ranks the demonstration
/// pool against the target and drafts rationales for the selected examples.
pub fn recommend(project: &mut Project, target: Target, k: Option<usize>, gateway: &Gateway) -> Result<RecommendOutcome> {
    let ds = dataset(project)?.clone();
    let demo = splits(project)?.demonstration.clone();
    for id in target.ids() {
        if !ds.contains(id) {
            return Err(SessionError::NotFound(format!("instance `{id}`")));
        }
    }
    let missing: Vec<&crate::dataset::Instance> = demo
        .iter()
        .map(String::as_str)
        .chain(target.ids())
        .collect::<BTreeSet<&str>>()
        .into_iter()
        .filter(|id| !project.embeddings.contains_key(*id))
        .filter_map(|id| ds.get(id))
        .collect();
    if !missing.is_empty() {
        let fresh = kshot::embed_instances(&missing, gateway, gateway.config().max_frames)
            .map_err(|e| SessionError::Gateway(e.to_string()))?;
        for e in fresh {
            project.embeddings.insert(e.instance_id.clone(), e);
        }
        project.save_state()?;
    }
    let settings = &project.meta.settings;
    let k = k.unwrap_or(settings.kshot_k);
    let recommendation = kshot::recommend(target, &project.embeddings, &ds, &demo, settings.kshot_pool, k)
        .map_err(|e| SessionError::Precondition(e.to_string()))?;
    let style = saved_rationales(project);
    let assets = PromptAssets::bundled();
    let mut candidates = Vec::new();
    let mut warnings = Vec::new();
    for c in &recommendation.selection.selected {
        if let Some(existing) = project.kshot.iter().find(|x| x.example_id == c.instance_id && x.saved) {
            candidates.push(existing.clone());
            continue;
        }
        let instance = ds.get(&c.instance_id).expect("demonstration ids are in the dataset");
        let draft = kshot::draft_rationale(instance, ds.classes(), &style, gateway, &assets);
        if let Some(w) = draft.warning {
            warnings.push(format!("{}: {w}", c.instance_id));
        }
        let cand = KShotCandidate::new(c, draft.text);
        project.kshot.retain(|x| x.example_id != cand.example_id);
        project.kshot.push(cand.clone());
        candidates.push(cand);
    }
    if !recommendation.selection.missing_classes.is_empty() {
        warnings.push(format!(
            "no demonstration examples available for: {}",
            recommendation.selection.missing_classes.iter().map(|c| c.as_str()).collect::<Vec<_>>().join(", ")
        ));
    }
    project.save_state()?;
    Ok(RecommendOutcome { recommendation, candidates, warnings })
}

fn saved_rationales(project: &Project) -> Vec<String> {
    project.kshot.iter().filter(|c| c.saved).map(|c| c.rationale().to_string()).collect()
}

/// Replaces the draft of an unsaved candidate with a fresh one.
pub fn redraft(project: &mut Project, example_id: &str, gateway: &Gateway) -> Result<KShotCandidate> {
    let ds = dataset(project)?.clone();
    let style = saved_rationales(project);
    let idx = project
        .kshot
        .iter()
        .position(|c| c.example_id == example_id)
        .ok_or_else(|| SessionError::NotFound(format!("k-shot candidate `{example_id}`")))?;
    if project.kshot[idx].saved {
        return Err(SessionError::Conflict(format!("`{example_id}` is already saved; edit its rationale instead")));
    }
    let instance = ds.get(example_id).ok_or_else(|| SessionError::NotFound(format!("instance `{example_id}`")))?;
    let draft = kshot::draft_rationale(instance, ds.classes(), &style, gateway, &PromptAssets::bundled());
    if draft.text.is_empty() {
        return Err(SessionError::Gateway(draft.warning.unwrap_or_else(|| "empty draft".into())));
    }
    project.kshot[idx].draft_rationale = draft.text;
    project.save_state()?;
    Ok(project.kshot[idx].clone())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KShotSave {
    pub example_id: String,
    /// Operator text; keeps the draft when absent.
    #[serde(default)]
    pub rationale: Option<String>,
    #[serde(default)]
    pub editor: Option<String>,
}

pub fn save_kshot(project: &mut Project, items: &[KShotSave]) -> Result<Vec<KShotCandidate>> {
    let demo = splits(project)?.demonstration.clone();
    let mut out = Vec::new();
    for item in items {
        if !demo.contains(&item.example_id) {
            return Err(SessionError::invalid("example_id", format!("`{}` is not a demonstration instance", item.example_id)));
        }
        let c = project
            .kshot
            .iter_mut()
            .find(|c| c.example_id == item.example_id)
            .ok_or_else(|| SessionError::NotFound(format!("k-shot candidate `{}`", item.example_id)))?;
        c.save(item.rationale.clone(), item.editor.clone())
            .map_err(|e| SessionError::invalid("rationale", e.to_string()))?;
        out.push(c.clone());
    }
    project.save_state()?;
    Ok(out)
}

pub fn generate_principles(
    project: &mut Project,
    run_id: &str,
    instance_ids: &[String],
    gateway: &Gateway,
) -> Result<GenerationReport> {
    let r = run(project, run_id)?;
    let ds = dataset(project)?.clone();
    let mut cases = Vec::new();
    for id in instance_ids {
        cases.push(
            ErrorCase::from_run(&r, &ds, id)
                .ok_or_else(|| SessionError::NotFound(format!("result for `{id}` in run `{run_id}`")))?,
        );
    }
    let report = principles::generate_instance_principles(&mut project.principles, &cases, ds.classes(), gateway, &PromptAssets::bundled())?;
    project.save_state()?;
    Ok(report)
}

pub fn generalize_principles(project: &mut Project, ids: Option<&[String]>, gateway: &Gateway) -> Result<GenerationReport> {
    let classes = dataset(project)?.classes().to_vec();
    let max = project.meta.settings.max_agnostic_principles;
    let report = principles::generalize_principles(&mut project.principles, ids, max, &classes, gateway, &PromptAssets::bundled())?;
    project.save_state()?;
    Ok(report)
}

pub fn delete_principle(project: &mut Project, id: &str) -> Result<()> {
    let refs = project.principle_references(id);
    project.principles.delete(id, &refs)?;
    project.save_state()?;
    Ok(())
}

/// Reports linked to a version, oldest first.
pub fn reports_for(project: &Project, version_id: u64) -> Result<Vec<&EvalReport>> {
    project
        .versions
        .get(version_id)
        .map_err(|_| SessionError::NotFound(format!("prompt version {version_id}")))?;
    Ok(project
        .versions
        .metrics(version_id)
        .iter()
        .filter_map(|m| project.reports.get(&m.run_id))
        .collect())
}

pub fn save_test_instances(project: &mut Project, ids: &[String]) -> Result<usize> {
    let s = splits(project)?.clone();
    let added = project.testset.save(ids, &s).map_err(|e| SessionError::invalid("instance_ids", e.to_string()))?;
    project.save_state()?;
    Ok(added)
}

pub fn retrieve_test_instances(project: &mut Project, n: usize, seed: u64) -> Result<Retrieval> {
    let s = splits(project)?.clone();
    let ds = dataset(project)?.clone();
    let r = project.testset.retrieve(n, seed, &s, &ds).map_err(|e| SessionError::Precondition(e.to_string()))?;
    project.save_state()?;
    Ok(r)
}

/// Outcome matrix for the test set over every version, from all stored runs.
pub fn track_test_instances(project: &Project) -> Result<OutcomeMatrix> {
    let ds = dataset(project)?;
    let versions: Vec<u64> = project.versions.versions().iter().map(|v| v.version_id).collect();
    let mut runs: Vec<&RunRecord> = project.runs.values().collect();
    runs.sort_by_key(|r| r.started_at);
    Ok(project.testset.track(&versions, &runs, ds))
}
