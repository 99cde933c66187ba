//! `promptlens` command line. Every command works on one project directory
//! and prints JSON to stdout (or `--out`); logs go to stderr.

use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use promptlens_core::dataset::{SplitName, SplitRatios};
use promptlens_core::gateway::Gateway;
use promptlens_core::kshot::Target;
use promptlens_core::patterns::MiningParams;
use promptlens_core::project::Project;
use promptlens_core::prompts::bundled_templates;
use promptlens_core::reasoning::{Mode, PromptSpec};
use promptlens_core::session::{self, KShotSave};

use crate::config::GatewayArgs;

#[derive(Debug, Parser)]
#[command(name = "promptlens", version, about = "Iterate on multimodal chain-of-thought prompts over a video dataset")]
pub struct Cli {
    /// Project directory.
    #[arg(long, short = 'p', env = "PROMPTLENS_PROJECT", default_value = ".", global = true)]
    pub project: PathBuf,
    #[command(flatten)]
    pub gateway: GatewayArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load a dataset manifest into the project (created if missing).
    Ingest {
        manifest: PathBuf,
        /// Project name when creating; defaults to the directory name.
        #[arg(long)]
        name: Option<String>,
    },
    /// Stratified validation/demonstration/test split.
    Split {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// validation:demonstration:test
        #[arg(long, default_value = "1:2:1")]
        ratios: SplitRatios,
    },
    /// Run a prompt version over a split and score it.
    Run {
        /// Existing version id.
        #[arg(long, conflicts_with_all = ["prompt", "template"])]
        version: Option<u64>,
        /// Prompt spec JSON to save as a new version first.
        #[arg(long, conflicts_with = "template")]
        prompt: Option<PathBuf>,
        /// Bundled template to save as a new version first.
        #[arg(long)]
        template: Option<String>,
        #[arg(long, default_value = "validation")]
        split: SplitName,
        #[arg(long, value_delimiter = ',', default_value = "vision_only,language_only,multimodal")]
        modes: Vec<Mode>,
    },
    /// Modality-interaction Sankey summary of a run.
    Sankey {
        run: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cluster evidence and mine frequent patterns in a run.
    Mine {
        run: String,
        /// Restrict to these instances (comma separated); default all.
        #[arg(long, value_delimiter = ',')]
        instances: Vec<String>,
        #[arg(long, default_value_t = 2)]
        min_support: usize,
        #[arg(long, default_value_t = 4)]
        max_len: usize,
        #[arg(long, default_value_t = 3)]
        min_cluster_size: usize,
        #[arg(long, default_value_t = 2)]
        min_samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recommend k-shot examples for instances and draft their rationales.
    Recommend {
        #[arg(required = true, value_delimiter = ',')]
        instances: Vec<String>,
        /// Examples to select; default from project settings (3).
        #[arg(long)]
        k: Option<usize>,
        /// Accept the drafted rationales as saved examples.
        #[arg(long)]
        save: bool,
    },
    /// Manage principles.
    Principles {
        #[command(subcommand)]
        action: PrinciplesCmd,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Directory holding projects that can be opened by name.
        #[arg(long)]
        projects_root: Option<PathBuf>,
    },
    /// Evaluation reports of a prompt version.
    Report {
        version: u64,
        #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
        format: ReportFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum PrinciplesCmd {
    List,
    Add { text: String },
    Edit { id: String, text: String },
    Delete { id: String },
    /// Instance-specific principles from a run's misclassifications.
    Generate {
        run: String,
        /// Default: every misclassified instance of the run.
        #[arg(long, value_delimiter = ',')]
        instances: Vec<String>,
    },
    /// Condense principles into task-level ones.
    Generalize {
        /// Default: all instance-specific principles.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    /// Every report of the version.
    Json,
    /// Latest report's confusion matrix.
    Csv,
}

pub type GatewayFactory<'a> = &'a dyn Fn() -> Result<Gateway, String>;

fn emit<T: Serialize>(value: &T, out_file: Option<&Path>, out: &mut dyn Write) -> Result<(), String> {
    let text = serde_json::to_string_pretty(value).map_err(|e| e.to_string())?;
    emit_text(&text, out_file, out)
}

fn emit_text(text: &str, out_file: Option<&Path>, out: &mut dyn Write) -> Result<(), String> {
    match out_file {
        Some(path) => std::fs::write(path, text).map_err(|e| format!("{}: {e}", path.display())),
        None => writeln!(out, "{text}").map_err(|e| e.to_string()),
    }
}

fn open(dir: &Path) -> Result<Project, String> {
    Project::open(dir).map_err(|e| e.to_string())
}

/// Runs a parsed command. The gateway is only built by commands that call a provider.
pub fn execute(cli: Cli, gateway: GatewayFactory, out: &mut dyn Write) -> Result<(), String> {
    let dir = cli.project.clone();
    let err = |e: session::SessionError| e.to_string();
    match cli.command {
        Command::Ingest { manifest, name } => {
            let mut p = if dir.join("project.json").is_file() {
                open(&dir)?
            } else {
                let name = name
                    .or_else(|| std::fs::canonicalize(&dir).ok()?.file_name().map(|n| n.to_string_lossy().into_owned()))
                    .unwrap_or_else(|| "project".into());
                Project::create(&dir, &name).map_err(|e| e.to_string())?
            };
            emit(&session::ingest(&mut p, &manifest).map_err(err)?, None, out)
        }
        Command::Split { seed, ratios } => {
            let mut p = open(&dir)?;
            emit(&session::split(&mut p, seed, ratios).map_err(err)?, None, out)
        }
        Command::Run { version, prompt, template, split, modes } => {
            let mut p = open(&dir)?;
            let version_id = match (version, prompt, template) {
                (Some(v), _, _) => v,
                (None, Some(path), _) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
                    let spec: PromptSpec = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
                    session::save_version(&mut p, &spec, None, None).map_err(err)?.version_id
                }
                (None, None, Some(name)) => {
                    let t = bundled_templates()
                        .into_iter()
                        .find(|t| t.name == name)
                        .ok_or_else(|| format!("unknown template `{name}`"))?;
                    session::save_version(&mut p, &t.spec(), None, Some(format!("template {name}"))).map_err(err)?.version_id
                }
                (None, None, None) => p
                    .versions
                    .latest()
                    .map(|v| v.version_id)
                    .ok_or("no prompt versions yet: pass --prompt or --template")?,
            };
            let gw = gateway()?;
            let step = std::sync::atomic::AtomicUsize::new(0);
            let progress = |done: usize, total: usize| {
                let decile = done * 10 / total.max(1);
                if step.fetch_max(decile, std::sync::atomic::Ordering::SeqCst) < decile {
                    log::info!("{done}/{total} slots");
                }
            };
            let (run, report) = session::run_version(&mut p, version_id, split, &modes, &gw, &progress).map_err(err)?;
            emit(
                &serde_json::json!({
                    "run_id": run.run_id,
                    "version_id": version_id,
                    "split": split,
                    "accuracy": report.accuracy,
                    "evaluated": report.evaluated(),
                    "failed_slots": run.error_count(),
                    "per_class_f1": report.per_class_f1,
                }),
                None,
                out,
            )
        }
        Command::Sankey { run, out: file } => {
            let p = open(&dir)?;
            emit(&session::sankey(&p, &run).map_err(err)?, file.as_deref(), out)
        }
        Command::Mine { run, instances, min_support, max_len, min_cluster_size, min_samples, out: file } => {
            let p = open(&dir)?;
            let record = session::run(&p, &run).map_err(err)?;
            let ds = session::dataset(&p).map_err(err)?;
            let params = MiningParams {
                cluster: promptlens_core::patterns::ClusterParams { min_cluster_size, min_samples },
                min_support,
                max_len,
            };
            let scope = (!instances.is_empty()).then_some(instances.as_slice());
            let gw = gateway()?;
            let result = session::mine(&record, ds, scope, &params, &gw).map_err(err)?;
            let _ = gw.flush();
            emit(&result, file.as_deref(), out)
        }
        Command::Recommend { instances, k, save } => {
            let mut p = open(&dir)?;
            let target = match &instances[..] {
                [one] => Target::Instance(one.clone()),
                many => Target::Group(many.to_vec()),
            };
            let gw = gateway()?;
            let mut outcome = session::recommend(&mut p, target, k, &gw).map_err(err)?;
            let _ = gw.flush();
            if save {
                let items: Vec<KShotSave> = outcome
                    .candidates
                    .iter()
                    .filter(|c| !c.saved)
                    .map(|c| KShotSave { example_id: c.example_id.clone(), rationale: None, editor: None })
                    .collect();
                session::save_kshot(&mut p, &items).map_err(err)?;
                outcome.candidates = p.kshot.iter().filter(|c| outcome.candidates.iter().any(|x| x.example_id == c.example_id)).cloned().collect();
            }
            emit(&outcome, None, out)
        }
        Command::Principles { action } => principles(&dir, action, gateway, out),
        Command::Serve { addr, projects_root } => {
            let project = if dir.join("project.json").is_file() { Some(open(&dir)?) } else { None };
            if let Some(p) = &project {
                p.check_integrity().map_err(|e| e.to_string())?;
            }
            crate::serve(addr, project, gateway()?, projects_root)
        }
        Command::Report { version, format, out: file } => {
            let p = open(&dir)?;
            let reports = session::reports_for(&p, version).map_err(err)?;
            match format {
                ReportFormat::Json => emit(&reports, file.as_deref(), out),
                ReportFormat::Csv => {
                    let latest = reports.last().ok_or_else(|| format!("prompt version {version} has no reports yet"))?;
                    emit_text(latest.confusion_matrix.to_csv().trim_end(), file.as_deref(), out)
                }
            }
        }
    }
}

fn principles(dir: &Path, action: PrinciplesCmd, gateway: GatewayFactory, out: &mut dyn Write) -> Result<(), String> {
    let mut p = open(dir)?;
    let err = |e: session::SessionError| e.to_string();
    match action {
        PrinciplesCmd::List => emit(&p.principles.list(), None, out),
        PrinciplesCmd::Add { text } => {
            let pr = p.principles.add_operator(&text).map_err(|e| e.to_string())?.clone();
            p.save_state().map_err(|e| e.to_string())?;
            emit(&pr, None, out)
        }
        PrinciplesCmd::Edit { id, text } => {
            let pr = p.principles.edit(&id, &text).map_err(|e| e.to_string())?.clone();
            p.save_state().map_err(|e| e.to_string())?;
            emit(&pr, None, out)
        }
        PrinciplesCmd::Delete { id } => {
            session::delete_principle(&mut p, &id).map_err(err)?;
            emit(&serde_json::json!({ "deleted": id }), None, out)
        }
        PrinciplesCmd::Generate { run, instances } => {
            let ids = if instances.is_empty() {
                p.reports
                    .get(&run)
                    .ok_or_else(|| format!("run `{run}` has no report"))?
                    .outcomes
                    .iter()
                    .filter(|o| !o.correct)
                    .map(|o| o.instance_id.clone())
                    .collect()
            } else {
                instances
            };
            let gw = gateway()?;
            let report = session::generate_principles(&mut p, &run, &ids, &gw).map_err(err)?;
            let _ = gw.flush();
            emit(&report, None, out)
        }
        PrinciplesCmd::Generalize { ids } => {
            let gw = gateway()?;
            let selection = (!ids.is_empty()).then_some(ids.as_slice());
            let report = session::generalize_principles(&mut p, selection, &gw).map_err(err)?;
            let _ = gw.flush();
            emit(&report, None, out)
        }
    }
}
