mod support;

use std::collections::BTreeMap;
use std::sync::Arc;

use promptlens_core::dataset::{load_manifest, SplitName};
use promptlens_core::eval::Cell;
use promptlens_core::gateway::Gateway;
use promptlens_core::interaction::Fine;
use promptlens_core::patterns::MiningParams;
use promptlens_core::project::Project;
use promptlens_core::reasoning::Mode;
use promptlens_core::session::{self, SessionError};
use promptlens_core::testing::write_fixture;

fn live_session(root: &std::path::Path) -> (support::SessionOutcome, Gateway) {
    let (truth, validation) = support::script_inputs(root);
    let transport = Arc::new(support::scripted_transport(truth, validation));
    let gateway = support::quiet(Gateway::new(support::gateway_config()).with_transport(transport));
    (support::run_session(root, &gateway), gateway)
}

#[test]
fn manifest_class_counts_match_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let labels = ["joy", "anger", "calm", "joy", "calm"];
    let recs: Vec<(String, &str)> = (0..40).map(|i| (format!("m{i:02}"), labels[(i * 7 + i / 3) % 5])).collect();
    let records: Vec<(&str, &str, &str)> = recs.iter().map(|(id, l)| (id.as_str(), *l, "some words")).collect();
    let path = write_fixture(dir.path(), "counts", &["joy", "anger", "calm"], &records, 1).unwrap();

    // Oracle: count labels straight from the manifest JSON.
    let raw: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let mut want: BTreeMap<String, usize> = BTreeMap::new();
    for inst in raw["instances"].as_array().unwrap() {
        *want.entry(inst["label"].as_str().unwrap().to_string()).or_default() += 1;
    }
    let ds = load_manifest(&path).unwrap();
    let got: BTreeMap<String, usize> = ds.class_counts().into_iter().map(|(c, n)| (c.to_string(), n)).collect();
    assert_eq!(got, want);
    assert_eq!(ds.len(), 40);
}

#[test]
fn session_trajectory_and_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (out, gateway) = live_session(dir.path());
    assert_eq!(out.trajectory, vec![Some(0.70), Some(0.74), Some(0.82)]);
    let p = &out.project;

    // v1 -> v2 adds exactly one principle; v2 -> v3 only touches k-shot.
    let d12 = p.versions.diff(1, 2).unwrap();
    assert_eq!(d12.principle_inserts().len(), 1);
    let rows = p.versions.timeline();
    assert!(rows[2].changed.kshot && !rows[2].changed.principles && !rows[2].changed.instruction);
    assert_eq!(p.versions.get(3).unwrap().snapshot.kshot.len(), 3);

    // k-shot examples come from the demonstration split only.
    let demo = &p.meta.splits.as_ref().unwrap().demonstration;
    for ex in &p.versions.get(3).unwrap().snapshot.kshot {
        assert!(demo.contains(&ex.instance_id), "{} is not a demonstration clip", ex.instance_id);
    }

    // The scripted model is wrong only in multimodal mode, so every error is a
    // complement-distinct disagreement or a dominance case.
    let s = session::sankey(p, &out.run_ids[0]).unwrap();
    s.check_conservation().unwrap();
    assert_eq!(s.records.len(), 50);
    let errors: usize = s.records.iter().filter(|r| !r.correct).count();
    assert_eq!(errors, 15);
    assert!(s.records.iter().filter(|r| !r.correct).all(|r| r.fine != Fine::ComplementRedundant));

    let run = session::run(p, &out.run_ids[0]).unwrap();
    let ds = session::dataset(p).unwrap();
    let mined = session::mine(&run, ds, None, &MiningParams::default(), &gateway).unwrap();
    assert_eq!(mined.scope.len(), 50);
    assert!(!mined.clusters.is_empty());

    assert_eq!(session::reports_for(p, 2).unwrap().len(), 1);
}

#[test]
fn project_survives_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let (out, _) = live_session(dir.path());
    let reopened = Project::open(out.project.dir()).unwrap();
    reopened.check_integrity().unwrap();
    assert_eq!(reopened.versions.timeline(), out.project.versions.timeline());
    assert_eq!(reopened.runs.len(), 3);
    assert_eq!(reopened.principles.list(), out.project.principles.list());
    assert_eq!(reopened.kshot, out.project.kshot);
}

#[test]
fn referenced_principle_cannot_be_deleted() {
    let dir = tempfile::tempdir().unwrap();
    let (mut out, _) = live_session(dir.path());
    let used = out.project.versions.get(2).unwrap().snapshot.principles[0].id.clone();
    assert!(matches!(session::delete_principle(&mut out.project, &used), Err(SessionError::Conflict(_))));
    let unused = out
        .project
        .principles
        .list()
        .iter()
        .find(|pr| out.project.principle_references(&pr.id).is_empty())
        .map(|pr| pr.id.clone())
        .unwrap();
    session::delete_principle(&mut out.project, &unused).unwrap();
    assert!(out.project.principles.get(&unused).is_none());
}

#[test]
fn test_instances_are_tracked_across_versions() {
    let dir = tempfile::tempdir().unwrap();
    let (mut out, _) = live_session(dir.path());
    let p = &mut out.project;
    let validation: Vec<String> = p.meta.splits.as_ref().unwrap().validation.iter().cloned().collect();
    // The 36th sorted validation clip flips to correct at v2.
    let flipped = validation[35].clone();
    assert_eq!(session::save_test_instances(p, &[flipped.clone()]).unwrap(), 1);
    let test_id = p.meta.splits.as_ref().unwrap().test.iter().next().unwrap().clone();
    assert!(session::save_test_instances(p, &[test_id]).is_err());

    let m = session::track_test_instances(p).unwrap();
    let row = m.row(&flipped).unwrap();
    assert_eq!(row, &[Cell::Incorrect, Cell::Correct, Cell::Correct]);

    // Retrieval draws from the held-out test split, never repeating itself.
    let test_split = p.meta.splits.as_ref().unwrap().test.clone();
    let r = session::retrieve_test_instances(p, 4, 9).unwrap();
    assert_eq!(r.ids.len(), 4);
    assert!(r.ids.iter().all(|id| test_split.contains(id)));
    let again = session::retrieve_test_instances(p, 4, 9).unwrap();
    assert!(again.ids.iter().all(|id| !r.ids.contains(id)));
}

#[test]
fn demonstration_split_cannot_be_run() {
    let dir = tempfile::tempdir().unwrap();
    let (out, _) = live_session(dir.path());
    let err = session::plan_run(&out.project, 1, SplitName::Demonstration, &Mode::ALL).unwrap_err();
    assert!(matches!(err, SessionError::Invalid(_) | SessionError::Precondition(_)));
}
