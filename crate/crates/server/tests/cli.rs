#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::path::Path;
use std::sync::Arc;

use clap::Parser;
use serde_json::Value;

use promptlens_core::gateway::Gateway;
use promptlens_server::cli::{execute, Cli, Command, ReportFormat};

struct Harness {
    project: String,
    transport: Arc<promptlens_core::testing::FnTransport>,
}

impl Harness {
    fn new(root: &Path) -> Harness {
        let (truth, validation) = support::script_inputs(root);
        Harness {
            project: root.join("proj").display().to_string(),
            transport: Arc::new(support::scripted_transport(truth, validation)),
        }
    }

    fn try_run(&self, args: &[&str]) -> Result<String, String> {
        let mut argv = vec!["promptlens", "-p", &self.project];
        argv.extend_from_slice(args);
        let cli = Cli::try_parse_from(argv).map_err(|e| e.to_string())?;
        let transport = self.transport.clone();
        let factory = move || Ok(support::quiet(Gateway::new(support::gateway_config()).with_transport(transport.clone())));
        let mut out = Vec::new();
        execute(cli, &factory, &mut out)?;
        Ok(String::from_utf8(out).unwrap())
    }

    fn run(&self, args: &[&str]) -> String {
        self.try_run(args).unwrap_or_else(|e| panic!("{args:?}: {e}"))
    }

    fn json(&self, args: &[&str]) -> Value {
        serde_json::from_str(&self.run(args)).unwrap()
    }
}

#[test]
fn parse_defaults() {
    let cli = Cli::try_parse_from(["promptlens", "split"]).unwrap();
    assert_eq!(cli.project, Path::new("."));
    match cli.command {
        Command::Split { seed, ratios } => assert_eq!((seed, ratios.to_string()), (0, "1:2:1".to_string())),
        other => panic!("{other:?}"),
    }
    let cli = Cli::try_parse_from(["promptlens", "run"]).unwrap();
    match cli.command {
        Command::Run { version, split, modes, .. } => {
            assert_eq!(version, None);
            assert_eq!(split.to_string(), "validation");
            assert_eq!(modes.len(), 3);
        }
        other => panic!("{other:?}"),
    }
    let cli = Cli::try_parse_from(["promptlens", "report", "2"]).unwrap();
    assert!(matches!(cli.command, Command::Report { version: 2, format: ReportFormat::Json, out: None }));
    let cli = Cli::try_parse_from(["promptlens", "serve"]).unwrap();
    assert!(matches!(cli.command, Command::Serve { addr, .. } if addr.port() == 8080));

    assert!(Cli::try_parse_from(["promptlens", "split", "--ratios", "1:0:1"]).is_err());
    assert!(Cli::try_parse_from(["promptlens", "run", "--version", "1", "--template", "sentiment"]).is_err());
    assert!(Cli::try_parse_from(["promptlens", "recommend"]).is_err());
}

#[test]
fn command_line_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let h = Harness::new(tmp.path());
    let manifest = support::write_dataset(&tmp.path().join("data"));

    let ingested = h.json(&["ingest", manifest.to_str().unwrap(), "--name", "cli"]);
    assert_eq!(ingested["instances"], 100);
    let split = h.json(&["split", "--seed", &support::SPLIT_SEED.to_string(), "--ratios", "2:1:1"]);
    assert_eq!(split["sizes"]["validation"], 50);

    assert!(h.try_run(&["run", "--template", "nope"]).unwrap_err().contains("unknown template"));
    assert!(h.try_run(&["run"]).unwrap_err().contains("no prompt versions"));
    let run = h.json(&["run", "--template", "sentiment"]);
    assert_eq!(run["version_id"], 1);
    assert_eq!(run["accuracy"], 0.7);
    assert_eq!(run["evaluated"], 50);
    assert_eq!(run["failed_slots"], 0);
    let run_id = run["run_id"].as_str().unwrap().to_string();

    let sankey_file = tmp.path().join("sankey.json");
    assert_eq!(h.run(&["sankey", &run_id, "--out", sankey_file.to_str().unwrap()]), "");
    let sankey: Value = serde_json::from_str(&std::fs::read_to_string(&sankey_file).unwrap()).unwrap();
    assert_eq!(sankey["records"].as_array().unwrap().len(), 50);

    let mined = h.json(&["mine", &run_id, "--min-support", "2"]);
    assert!(!mined["clusters"].as_array().unwrap().is_empty());
    assert!(h.try_run(&["mine", &run_id, "--min-cluster-size", "1"]).is_err());

    // Defaults to the run's misclassified instances.
    let generated = h.json(&["principles", "generate", &run_id]);
    assert_eq!(generated["created"].as_array().unwrap().len(), 15);
    let generalized = h.json(&["principles", "generalize"]);
    assert!(!generalized["created"].as_array().unwrap().is_empty());
    let added = h.json(&["principles", "add", "Weigh tone of voice."]);
    let id = added["id"].as_str().unwrap();
    let edited = h.json(&["principles", "edit", id, "Weigh tone of voice carefully."]);
    assert_eq!(edited["text"], "Weigh tone of voice carefully.");
    assert_eq!(h.json(&["principles", "delete", id])["deleted"], id);
    let listed = h.json(&["principles", "list"]);
    assert!(listed.as_array().unwrap().iter().all(|p| p["id"] != id));
    assert!(h.try_run(&["principles", "delete", id]).is_err());

    // The scripted provider gets all but the first 35 validation ids wrong.
    let errors = support::script_inputs(tmp.path()).1[35..].to_vec();
    let rec = h.json(&["recommend", &errors.join(","), "--k", "3", "--save"]);
    let candidates = rec["candidates"].as_array().unwrap();
    assert_eq!(candidates.len(), 3);
    assert!(candidates.iter().all(|c| c["saved"] == true));

    let reports = h.json(&["report", "1"]);
    assert_eq!(reports[0]["accuracy"], 0.7);
    let csv = h.run(&["report", "1", "--format", "csv"]);
    let header = csv.lines().next().unwrap();
    assert!(header.contains("positive") && header.ends_with("UNPARSEABLE"), "{header}");
    assert!(h.try_run(&["report", "9"]).is_err());

    // The explicit-version path reuses the stored spec.
    let again = h.json(&["run", "--version", "1", "--modes", "multimodal"]);
    assert_eq!(again["accuracy"], 0.7);
}

#[test]
fn serve_reports_an_occupied_port() {
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = taken.local_addr().unwrap().to_string();
    let tmp = tempfile::tempdir().unwrap();
    let h = Harness::new(tmp.path());
    let err = h.try_run(&["serve", "--addr", &addr]).unwrap_err();
    assert!(err.contains("cannot listen"), "{err}");
}
