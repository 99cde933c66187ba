//! JSON-over-HTTP routes. Every operation the browser workbench performs is
//! reachable here; long provider-bound work is submitted as a job.

use std::path::PathBuf;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use promptlens_core::dataset::{SplitName, SplitRatios};
use promptlens_core::kshot::Target;
use promptlens_core::patterns::{ClusterParams, MiningParams};
use promptlens_core::principles::import_into_prompt;
use promptlens_core::project::{Project, ProjectError};
use promptlens_core::prompts::bundled_templates;
use promptlens_core::reasoning::{Mode, PromptSpec};
use promptlens_core::session::{self, FieldError, KShotSave, SessionError};

use crate::jobs::{JobKind, JobOutput};
use crate::state::AppState;

/// Every route, as `(method, path)`; the coverage test walks this list.
pub const ROUTES: &[(&str, &str)] = &[
    ("GET", "/api/health"),
    ("GET", "/api/projects"),
    ("POST", "/api/projects"),
    ("POST", "/api/datasets"),
    ("POST", "/api/split"),
    ("GET", "/api/templates"),
    ("GET", "/api/versions"),
    ("POST", "/api/versions"),
    ("GET", "/api/versions/{id}"),
    ("GET", "/api/versions/{id}/diff/{other}"),
    ("GET", "/api/jobs"),
    ("POST", "/api/jobs/run"),
    ("GET", "/api/jobs/{id}"),
    ("GET", "/api/runs"),
    ("GET", "/api/runs/{id}"),
    ("GET", "/api/runs/{id}/sankey"),
    ("POST", "/api/patterns/mine"),
    ("GET", "/api/instances/{id}"),
    ("GET", "/api/instances/{id}/frames/{n}"),
    ("GET", "/api/kshot"),
    ("POST", "/api/kshot/recommend"),
    ("POST", "/api/kshot/draft"),
    ("POST", "/api/kshot/save"),
    ("GET", "/api/principles"),
    ("POST", "/api/principles"),
    ("PUT", "/api/principles/{id}"),
    ("DELETE", "/api/principles/{id}"),
    ("POST", "/api/principles/{id}/read"),
    ("POST", "/api/principles/import"),
    ("POST", "/api/principles/generate"),
    ("POST", "/api/principles/generalize"),
    ("GET", "/api/testset"),
    ("POST", "/api/testset/save"),
    ("POST", "/api/testset/retrieve"),
    ("GET", "/api/reports/{version}"),
];

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/projects", get(list_projects).post(open_project))
        .route("/api/datasets", post(ingest))
        .route("/api/split", post(split))
        .route("/api/templates", get(templates))
        .route("/api/versions", get(list_versions).post(save_version))
        .route("/api/versions/{id}", get(get_version))
        .route("/api/versions/{id}/diff/{other}", get(diff_versions))
        .route("/api/jobs", get(list_jobs))
        .route("/api/jobs/run", post(submit_run))
        .route("/api/jobs/{id}", get(get_job))
        .route("/api/runs", get(list_runs))
        .route("/api/runs/{id}", get(get_run))
        .route("/api/runs/{id}/sankey", get(sankey))
        .route("/api/patterns/mine", post(mine))
        .route("/api/instances/{id}", get(instance))
        .route("/api/instances/{id}/frames/{n}", get(frame))
        .route("/api/kshot", get(list_kshot))
        .route("/api/kshot/recommend", post(recommend))
        .route("/api/kshot/draft", post(draft))
        .route("/api/kshot/save", post(save_kshot))
        .route("/api/principles", get(list_principles).post(add_principle))
        .route("/api/principles/import", post(import_principles))
        .route("/api/principles/generate", post(generate_principles))
        .route("/api/principles/generalize", post(generalize_principles))
        .route("/api/principles/{id}", put(edit_principle).delete(delete_principle))
        .route("/api/principles/{id}/read", post(mark_read))
        .route("/api/testset", get(testset))
        .route("/api/testset/save", post(testset_save))
        .route("/api/testset/retrieve", post(testset_retrieve))
        .route("/api/reports/{version}", get(reports))
        .with_state(state)
}

// ---------------------------------------------------------------- errors

#[derive(Debug)]
pub struct ApiError(pub SessionError);

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        ApiError(e)
    }
}

impl From<ProjectError> for ApiError {
    fn from(e: ProjectError) -> Self {
        ApiError(SessionError::Project(e))
    }
}

pub fn status_of(e: &SessionError) -> StatusCode {
    match e {
        SessionError::NotFound(_) => StatusCode::NOT_FOUND,
        SessionError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
        SessionError::Conflict(_) => StatusCode::CONFLICT,
        SessionError::Precondition(_) => StatusCode::PRECONDITION_FAILED,
        SessionError::Gateway(_) => StatusCode::BAD_GATEWAY,
        SessionError::Project(ProjectError::Exists(_) | ProjectError::Schema { .. }) => StatusCode::CONFLICT,
        SessionError::Project(ProjectError::Dataset(_)) => StatusCode::UNPROCESSABLE_ENTITY,
        SessionError::Project(_) => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = status_of(&self.0);
        let mut body = json!({ "error": self.0.to_string() });
        if let SessionError::Invalid(fields) = &self.0 {
            body["fields"] = json!(fields);
        }
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn invalid(field: &str, message: impl Into<String>) -> ApiError {
    ApiError(SessionError::Invalid(vec![FieldError::new(field, message)]))
}

fn accepted(job_id: String) -> Response {
    (StatusCode::ACCEPTED, Json(json!({ "job_id": job_id }))).into_response()
}

fn to_value<T: Serialize>(v: &T) -> Result<Value, String> {
    serde_json::to_value(v).map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- projects

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

#[derive(Serialize)]
struct ProjectSummary {
    name: String,
    dir: PathBuf,
    schema_version: u32,
    dataset: Option<session::DatasetSummary>,
    splits: Option<session::SplitSummary>,
    versions: usize,
    runs: Vec<String>,
    settings: promptlens_core::project::Settings,
}

fn summary(p: &Project) -> ProjectSummary {
    ProjectSummary {
        name: p.meta.name.clone(),
        dir: p.dir().to_path_buf(),
        schema_version: p.meta.schema_version,
        dataset: p.dataset.as_ref().map(|d| session::DatasetSummary {
            name: d.name.clone(),
            instances: d.len(),
            class_counts: d.class_counts(),
            class_colors: p.meta.settings.class_colors.clone(),
        }),
        splits: match (&p.dataset, &p.meta.splits) {
            (Some(d), Some(s)) => Some(session::split_summary(d, s)),
            _ => None,
        },
        versions: p.versions.versions().len(),
        runs: p.runs.keys().cloned().collect(),
        settings: p.meta.settings.clone(),
    }
}

async fn list_projects(State(st): State<AppState>) -> ApiResult<Json<Value>> {
    let active = if st.has_project() { Some(st.read(|p| Ok(summary(p)))?) } else { None };
    let mut available = Vec::new();
    if let Some(root) = st.projects_root() {
        if let Ok(entries) = std::fs::read_dir(root) {
            for e in entries.flatten() {
                if e.path().join("project.json").is_file() {
                    available.push(json!({ "name": e.file_name().to_string_lossy(), "dir": e.path() }));
                }
            }
        }
    }
    available.sort_by(|a, b| a["dir"].as_str().cmp(&b["dir"].as_str()));
    Ok(Json(json!({ "active": active, "available": available })))
}

#[derive(Deserialize)]
struct OpenProject {
    /// Project directory; defaults to `<projects root>/<name>`.
    path: Option<PathBuf>,
    name: Option<String>,
}

/// Opens the project at `path`, creating it when the directory holds none.
async fn open_project(State(st): State<AppState>, Json(req): Json<OpenProject>) -> ApiResult<Response> {
    let dir = match (&req.path, &req.name, st.projects_root()) {
        (Some(p), _, _) => p.clone(),
        (None, Some(n), Some(root)) => root.join(n),
        _ => return Err(invalid("path", "give a project path (or a name when the server has a projects root)")),
    };
    let (project, status) = if dir.join("project.json").is_file() {
        (Project::open(&dir)?, StatusCode::OK)
    } else {
        let name = req
            .name
            .clone()
            .or_else(|| dir.file_name().map(|n| n.to_string_lossy().into_owned()))
            .ok_or_else(|| invalid("name", "a new project needs a name"))?;
        (Project::create(&dir, &name)?, StatusCode::CREATED)
    };
    let body = summary(&project);
    st.replace_project(project);
    Ok((status, Json(body)).into_response())
}

#[derive(Deserialize)]
struct Ingest {
    manifest: PathBuf,
}

async fn ingest(State(st): State<AppState>, Json(req): Json<Ingest>) -> ApiResult<Json<session::DatasetSummary>> {
    Ok(Json(st.write(|p| session::ingest(p, &req.manifest))?))
}

#[derive(Deserialize)]
struct SplitReq {
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    ratios: SplitRatios,
}

async fn split(State(st): State<AppState>, Json(req): Json<SplitReq>) -> ApiResult<Json<session::SplitSummary>> {
    Ok(Json(st.write(|p| session::split(p, req.seed, req.ratios))?))
}

async fn templates() -> Json<Value> {
    Json(json!(bundled_templates()))
}

// ---------------------------------------------------------------- versions

async fn list_versions(State(st): State<AppState>) -> ApiResult<Json<Value>> {
    Ok(Json(st.read(|p| Ok(json!({ "versions": p.versions.versions(), "timeline": p.versions.timeline() })))?))
}

#[derive(Deserialize)]
struct SaveVersion {
    spec: PromptSpec,
    branch_from: Option<u64>,
    note: Option<String>,
}

async fn save_version(State(st): State<AppState>, Json(req): Json<SaveVersion>) -> ApiResult<Response> {
    let v = st.write(|p| session::save_version(p, &req.spec, req.branch_from, req.note.clone()))?;
    Ok((StatusCode::CREATED, Json(v)).into_response())
}

fn unknown_version(id: u64) -> SessionError {
    SessionError::NotFound(format!("prompt version {id}"))
}

async fn get_version(State(st): State<AppState>, Path(id): Path<u64>) -> ApiResult<Json<Value>> {
    Ok(Json(st.read(|p| {
        let v = p.versions.get(id).map_err(|_| unknown_version(id))?;
        Ok(json!({ "version": v, "text": v.render_text(), "metrics": p.versions.metrics(id) }))
    })?))
}

async fn diff_versions(State(st): State<AppState>, Path((id, other)): Path<(u64, u64)>) -> ApiResult<Json<Value>> {
    Ok(Json(st.read(|p| {
        let d = p.versions.diff(id, other).map_err(|e| SessionError::NotFound(e.to_string()))?;
        Ok(json!({ "from": id, "to": other, "changed": d.sections(), "diff": d }))
    })?))
}

// ---------------------------------------------------------------- jobs & runs

async fn list_jobs(State(st): State<AppState>) -> Json<Value> {
    Json(json!(st.jobs().list()))
}

async fn get_job(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<crate::jobs::Job>> {
    st.jobs()
        .get(&id)
        .map(Json)
        .ok_or_else(|| SessionError::NotFound(format!("job `{id}`")).into())
}

#[derive(Deserialize)]
struct RunReq {
    version: u64,
    #[serde(default = "default_split")]
    split: SplitName,
    #[serde(default = "default_modes")]
    modes: Vec<Mode>,
}

fn default_split() -> SplitName {
    SplitName::Validation
}

fn default_modes() -> Vec<Mode> {
    Mode::ALL.to_vec()
}

/// Plans synchronously (so bad requests fail fast), then runs in the
/// background and scores on completion. One run per project at a time.
pub fn submit_run_job(st: &AppState, version: u64, split: SplitName, modes: &[Mode]) -> ApiResult<String> {
    let plan = st.read(|p| session::plan_run(p, version, split, modes))?;
    let dir = st.read(|p| Ok(p.dir().to_path_buf()))?;
    let gateway = st.gateway();
    let state = st.clone();
    let total = plan.slots();
    st.jobs()
        .submit(JobKind::RunSplit, true, move |h| {
            h.progress(0, total);
            let run = session::execute_run(&plan, &gateway, &|done, all| h.progress(done, all));
            let _ = gateway.flush();
            let report = state
                .write(|p| {
                    if p.dir() != dir {
                        return Err(SessionError::Conflict("the active project changed during the run".into()));
                    }
                    session::commit_run(p, run)
                })
                .map_err(|e| e.to_string())?;
            Ok(JobOutput {
                result_ref: Some(report.run_id.clone()),
                result: json!({ "run_id": report.run_id, "accuracy": report.accuracy, "evaluated": report.evaluated() }),
            })
        })
        .map_err(|busy| ApiError(SessionError::Conflict(format!("a run is already in progress ({})", busy.0))))
}

async fn submit_run(State(st): State<AppState>, Json(req): Json<RunReq>) -> ApiResult<Response> {
    Ok(accepted(submit_run_job(&st, req.version, req.split, &req.modes)?))
}

async fn list_runs(State(st): State<AppState>) -> ApiResult<Json<Value>> {
    Ok(Json(st.read(|p| {
        Ok(p.runs
            .values()
            .map(|r| {
                json!({
                    "run_id": r.run_id,
                    "version_id": r.version_id,
                    "split": r.split,
                    "modes": r.modes,
                    "instances": r.instance_ids.len(),
                    "errors": r.error_count(),
                    "started_at": r.started_at,
                    "finished_at": r.finished_at,
                    "accuracy": p.reports.get(&r.run_id).map(|rep| rep.accuracy),
                })
            })
            .collect::<Vec<_>>()
            .into())
    })?))
}

async fn get_run(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    Ok(Json(st.read(|p| Ok(json!(session::run(p, &id)?)))?))
}

async fn sankey(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    Ok(Json(st.read(|p| Ok(json!(session::sankey(p, &id)?)))?))
}

#[derive(Deserialize)]
struct MineReq {
    run: String,
    instance_ids: Option<Vec<String>>,
    min_support: Option<usize>,
    max_len: Option<usize>,
    cluster_params: Option<ClusterParams>,
}

async fn mine(State(st): State<AppState>, Json(req): Json<MineReq>) -> ApiResult<Response> {
    let (run, dataset, defaults) = st.read(|p| Ok((session::run(p, &req.run)?, session::dataset(p)?.clone(), p.meta.settings.mining)))?;
    let params = MiningParams {
        cluster: req.cluster_params.unwrap_or(defaults.cluster),
        min_support: req.min_support.unwrap_or(defaults.min_support),
        max_len: req.max_len.unwrap_or(defaults.max_len),
    };
    params.cluster.validate().map_err(|m| invalid("cluster_params", m))?;
    if params.min_support == 0 {
        return Err(invalid("min_support", "must be at least 1"));
    }
    let gateway = st.gateway();
    let id = st
        .jobs()
        .submit(JobKind::Mine, false, move |_| {
            let scope = req.instance_ids.as_deref();
            let result = session::mine(&run, &dataset, scope, &params, &gateway).map_err(|e| e.to_string())?;
            let _ = gateway.flush();
            Ok(JobOutput { result_ref: None, result: to_value(&result)? })
        })
        .expect("non-exclusive jobs are always accepted");
    Ok(accepted(id))
}

#[derive(Deserialize)]
struct InstanceQuery {
    run: Option<String>,
}

async fn instance(State(st): State<AppState>, Path(id): Path<String>, Query(q): Query<InstanceQuery>) -> ApiResult<Json<Value>> {
    Ok(Json(st.read(|p| {
        let ds = session::dataset(p)?;
        let inst = ds.get(&id).ok_or_else(|| SessionError::NotFound(format!("instance `{id}`")))?;
        let split = p.meta.splits.as_ref().and_then(|s| s.split_of(&id));
        let mut body = json!({
            "instance": inst,
            "split": split,
            "frame_urls": (0..inst.frames.len()).map(|n| format!("/api/instances/{id}/frames/{n}")).collect::<Vec<_>>(),
            "kshot": p.kshot.iter().find(|c| c.example_id == id),
            "in_testset": p.testset.all_ids().contains(&id),
        });
        if let Some(run_id) = &q.run {
            let run = session::run(p, run_id)?;
            let slots: Vec<_> = run.slots.iter().filter(|s| s.instance_id == id).collect();
            body["results"] = json!(slots);
            if let Ok(s) = session::sankey(p, run_id) {
                body["interaction"] = json!(s.record(&id));
            }
        }
        Ok(body)
    })?))
}

async fn frame(State(st): State<AppState>, Path((id, n)): Path<(String, usize)>) -> ApiResult<Response> {
    let path = st.read(|p| {
        let inst = session::dataset(p)?.get(&id).ok_or_else(|| SessionError::NotFound(format!("instance `{id}`")))?;
        inst.frames.get(n).cloned().ok_or_else(|| SessionError::NotFound(format!("frame {n} of `{id}`")))
    })?;
    let bytes = std::fs::read(&path).map_err(|e| SessionError::NotFound(format!("{}: {e}", path.display())))?;
    let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        Some("gif") => "image/gif",
        _ => "application/octet-stream",
    };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

// ---------------------------------------------------------------- k-shot

async fn list_kshot(State(st): State<AppState>) -> ApiResult<Json<Value>> {
    Ok(Json(st.read(|p| Ok(json!(p.kshot)))?))
}

#[derive(Deserialize)]
struct RecommendReq {
    instance_ids: Vec<String>,
    k: Option<usize>,
}

async fn recommend(State(st): State<AppState>, Json(req): Json<RecommendReq>) -> ApiResult<Response> {
    if req.instance_ids.is_empty() {
        return Err(invalid("instance_ids", "select at least one instance"));
    }
    if req.k == Some(0) {
        return Err(invalid("k", "must be at least 1"));
    }
    st.read(|p| {
        let ds = session::dataset(p)?;
        session::splits(p)?;
        match req.instance_ids.iter().find(|id| !ds.contains(id)) {
            Some(id) => Err(SessionError::NotFound(format!("instance `{id}`"))),
            None => Ok(()),
        }
    })?;
    let target = match &req.instance_ids[..] {
        [one] => Target::Instance(one.clone()),
        many => Target::Group(many.to_vec()),
    };
    let (state, gateway) = (st.clone(), st.gateway());
    let id = st
        .jobs()
        .submit(JobKind::Recommend, false, move |_| {
            let out = state.write_detached(|p| session::recommend(p, target, req.k, &gateway)).map_err(|e| e.to_string())?;
            let _ = gateway.flush();
            Ok(JobOutput { result_ref: None, result: to_value(&out)? })
        })
        .expect("non-exclusive jobs are always accepted");
    Ok(accepted(id))
}

#[derive(Deserialize)]
struct DraftReq {
    example_id: String,
}

async fn draft(State(st): State<AppState>, Json(req): Json<DraftReq>) -> ApiResult<Response> {
    st.read(|p| match p.kshot.iter().find(|c| c.example_id == req.example_id) {
        None => Err(SessionError::NotFound(format!("k-shot candidate `{}`", req.example_id))),
        Some(c) if c.saved => Err(SessionError::Conflict(format!("`{}` is already saved", req.example_id))),
        Some(_) => Ok(()),
    })?;
    let (state, gateway) = (st.clone(), st.gateway());
    let id = st
        .jobs()
        .submit(JobKind::DraftRationale, false, move |_| {
            let c = state.write_detached(|p| session::redraft(p, &req.example_id, &gateway)).map_err(|e| e.to_string())?;
            let _ = gateway.flush();
            Ok(JobOutput { result_ref: Some(c.example_id.clone()), result: to_value(&c)? })
        })
        .expect("non-exclusive jobs are always accepted");
    Ok(accepted(id))
}

#[derive(Deserialize)]
struct SaveKShot {
    items: Vec<KShotSave>,
}

async fn save_kshot(State(st): State<AppState>, Json(req): Json<SaveKShot>) -> ApiResult<Json<Value>> {
    Ok(Json(json!(st.write(|p| session::save_kshot(p, &req.items))?)))
}

// ---------------------------------------------------------------- principles

async fn list_principles(State(st): State<AppState>) -> ApiResult<Json<Value>> {
    Ok(Json(st.read(|p| {
        let principles: Vec<Value> = p
            .principles
            .list()
            .iter()
            .map(|pr| {
                let mut v = json!(pr);
                v["referenced_by"] = json!(p.principle_references(&pr.id));
                v
            })
            .collect();
        Ok(json!({ "principles": principles, "history": p.principles.history() }))
    })?))
}

#[derive(Deserialize)]
struct PrincipleText {
    text: String,
}

async fn add_principle(State(st): State<AppState>, Json(req): Json<PrincipleText>) -> ApiResult<Response> {
    let pr = st.write(|p| {
        let pr = p.principles.add_operator(&req.text)?.clone();
        p.save_state()?;
        Ok(pr)
    })?;
    Ok((StatusCode::CREATED, Json(pr)).into_response())
}

async fn edit_principle(State(st): State<AppState>, Path(id): Path<String>, Json(req): Json<PrincipleText>) -> ApiResult<Json<Value>> {
    Ok(Json(st.write(|p| {
        let pr = p.principles.edit(&id, &req.text)?.clone();
        p.save_state()?;
        Ok(json!(pr))
    })?))
}

async fn delete_principle(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    st.write(|p| session::delete_principle(p, &id))?;
    Ok(StatusCode::NO_CONTENT)
}

async fn mark_read(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    Ok(Json(st.write(|p| {
        p.principles.mark_read(&id)?;
        p.save_state()?;
        Ok(json!(p.principles.get(&id)))
    })?))
}

#[derive(Deserialize)]
struct ImportReq {
    ids: Vec<String>,
    spec: PromptSpec,
}

/// Adds principles to an editable prompt; nothing is saved until the prompt is.
async fn import_principles(State(st): State<AppState>, Json(req): Json<ImportReq>) -> ApiResult<Json<Value>> {
    Ok(Json(st.read(|p| {
        let (spec, notices) = import_into_prompt(&p.principles, &req.ids, &req.spec)?;
        Ok(json!({ "spec": spec, "notices": notices }))
    })?))
}

#[derive(Deserialize)]
struct GenerateReq {
    run: String,
    instance_ids: Vec<String>,
}

async fn generate_principles(State(st): State<AppState>, Json(req): Json<GenerateReq>) -> ApiResult<Response> {
    if req.instance_ids.is_empty() {
        return Err(invalid("instance_ids", "select at least one misclassified instance"));
    }
    st.read(|p| session::run(p, &req.run).map(|_| ()))?;
    let (state, gateway) = (st.clone(), st.gateway());
    let id = st
        .jobs()
        .submit(JobKind::GeneratePrinciples, false, move |_| {
            let report = state
                .write_detached(|p| session::generate_principles(p, &req.run, &req.instance_ids, &gateway))
                .map_err(|e| e.to_string())?;
            let _ = gateway.flush();
            Ok(JobOutput { result_ref: None, result: to_value(&report)? })
        })
        .expect("non-exclusive jobs are always accepted");
    Ok(accepted(id))
}

#[derive(Deserialize, Default)]
struct GeneralizeReq {
    ids: Option<Vec<String>>,
}

async fn generalize_principles(State(st): State<AppState>, body: Option<Json<GeneralizeReq>>) -> ApiResult<Response> {
    let req = body.map(|Json(b)| b).unwrap_or_default();
    if let Some(ids) = &req.ids {
        st.read(|p| match ids.iter().find(|id| p.principles.get(id).is_none()) {
            Some(id) => Err(SessionError::NotFound(format!("principle `{id}`"))),
            None => Ok(()),
        })?;
    }
    let (state, gateway) = (st.clone(), st.gateway());
    let id = st
        .jobs()
        .submit(JobKind::GeneratePrinciples, false, move |_| {
            let report = state
                .write_detached(|p| session::generalize_principles(p, req.ids.as_deref(), &gateway))
                .map_err(|e| e.to_string())?;
            let _ = gateway.flush();
            Ok(JobOutput { result_ref: None, result: to_value(&report)? })
        })
        .expect("non-exclusive jobs are always accepted");
    Ok(accepted(id))
}

// ---------------------------------------------------------------- test set & reports

async fn testset(State(st): State<AppState>) -> ApiResult<Json<Value>> {
    Ok(Json(st.read(|p| {
        Ok(json!({
            "saved": p.testset.saved,
            "retrieved": p.testset.retrieved,
            "matrix": session::track_test_instances(p)?,
        }))
    })?))
}

#[derive(Deserialize)]
struct TestsetSave {
    instance_ids: Vec<String>,
}

async fn testset_save(State(st): State<AppState>, Json(req): Json<TestsetSave>) -> ApiResult<Json<Value>> {
    Ok(Json(st.write(|p| {
        let added = session::save_test_instances(p, &req.instance_ids)?;
        Ok(json!({ "added": added, "saved": p.testset.saved }))
    })?))
}

#[derive(Deserialize)]
struct TestsetRetrieve {
    n: usize,
    #[serde(default)]
    seed: u64,
}

async fn testset_retrieve(State(st): State<AppState>, Json(req): Json<TestsetRetrieve>) -> ApiResult<Json<Value>> {
    if req.n == 0 {
        return Err(invalid("n", "must be at least 1"));
    }
    Ok(Json(json!(st.write(|p| session::retrieve_test_instances(p, req.n, req.seed))?)))
}

#[derive(Deserialize)]
struct ReportQuery {
    format: Option<String>,
}

/// All reports for a version (JSON), or the latest one's confusion matrix as CSV.
async fn reports(State(st): State<AppState>, Path(version): Path<u64>, Query(q): Query<ReportQuery>) -> ApiResult<Response> {
    let reports: Vec<_> = st.read(|p| Ok(session::reports_for(p, version)?.into_iter().cloned().collect()))?;
    match q.format.as_deref() {
        None | Some("json") => Ok(Json(json!(reports)).into_response()),
        Some("csv") => {
            let latest = reports
                .last()
                .ok_or_else(|| SessionError::NotFound(format!("no reports for prompt version {version}")))?;
            Ok(([(header::CONTENT_TYPE, "text/csv")], latest.confusion_matrix.to_csv()).into_response())
        }
        Some(other) => Err(invalid("format", format!("unknown format `{other}` (json or csv)"))),
    }
}
