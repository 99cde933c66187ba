use proptest::prelude::*;
use rand::SeedableRng;

use super::*;
use crate::principles::PrincipleStore;
use crate::reasoning::{FrozenPrinciple, KShotExample};
use crate::testing::{random_edit, random_prompt};

fn link(acc: f64) -> MetricsLink {
    MetricsLink { run_id: format!("run-{acc}"), split: "validation".into(), accuracy: acc }
}

#[test]
fn ids_and_parents() {
    let mut h = VersionHistory::new();
    let v1 = h.save(ResolvedPrompt::zero_shot("a"), None, None).unwrap().clone();
    assert_eq!((v1.version_id, v1.parent), (1, None));
    let v2 = h.save(ResolvedPrompt::zero_shot("b"), None, None).unwrap().clone();
    assert_eq!((v2.version_id, v2.parent), (2, Some(1)));
    let v3 = h.save(ResolvedPrompt::zero_shot("c"), Some(1), Some("restart".into())).unwrap().clone();
    assert_eq!((v3.version_id, v3.parent), (3, Some(1)));
    assert_eq!(h.save(ResolvedPrompt::zero_shot("d"), Some(9), None).unwrap_err(), VersionError::Unknown(9));
    assert_eq!(h.versions().len(), 3);
    // Parents always precede children, so links form a forest.
    for v in h.versions() {
        assert!(v.parent.is_none_or(|p| p < v.version_id));
    }
}

#[test]
fn snapshot_survives_store_edits() {
    let mut store = PrincipleStore::new();
    let id = store.add_operator("Balance visual cues against explicit verbal sentiment.").unwrap().id.clone();
    let mut spec = PromptSpec::new("Classify.");
    spec.principles.push(id.clone());
    let mut h = VersionHistory::new();
    let resolved = spec.resolve(|p| store.text_of(p)).unwrap();
    h.save(resolved, None, None).unwrap();
    let before = h.get(1).unwrap().render_text();
    store.edit(&id, "Something else entirely.").unwrap();
    assert_eq!(h.get(1).unwrap().render_text(), before);
    assert_eq!(h.referencing(&id), [1]);
    assert!(store.delete(&id, &h.referencing(&id)).is_err());
}

#[test]
fn import_then_save_shows_two_inserts() {
    let mut store = PrincipleStore::new();
    let a = store.add_operator("One.").unwrap().id.clone();
    let b = store.add_operator("Two.").unwrap().id.clone();
    let mut h = VersionHistory::new();
    let spec = PromptSpec::new("Classify the clip.");
    h.save(spec.resolve(|p| store.text_of(p)).unwrap(), None, None).unwrap();
    let (spec2, _) = crate::principles::import_into_prompt(&store, &[a, b], &spec).unwrap();
    h.save(spec2.resolve(|p| store.text_of(p)).unwrap(), None, None).unwrap();
    let d = h.diff(1, 2).unwrap();
    assert_eq!(d.principle_inserts().len(), 2);
    assert_eq!(d.sections(), SectionFlags { principles: true, ..Default::default() });
    assert!(h.diff(1, 7).is_err());
}

#[test]
fn timeline_accuracy_trajectory() {
    let mut h = VersionHistory::new();
    let base = ResolvedPrompt::zero_shot("Classify the sentiment.");
    h.save(base.clone(), None, None).unwrap();
    let mut with_p = base.clone();
    with_p.principles.push(FrozenPrinciple { id: "p1".into(), text: "Weigh both.".into() });
    h.save(with_p.clone(), None, None).unwrap();
    let mut with_k = with_p.clone();
    with_k.kshot.push(KShotExample { instance_id: "d1".into(), rationale: "r".into(), answer: "positive".into() });
    h.save(with_k, None, None).unwrap();
    h.save(ResolvedPrompt::zero_shot("Classify the speaker sentiment."), None, None).unwrap();
    for (v, acc) in [(1, 0.70), (2, 0.74), (3, 0.82)] {
        h.link_metrics(v, link(acc)).unwrap();
    }
    assert!(h.link_metrics(99, link(0.1)).is_err());
    let rows = h.timeline();
    let accs: Vec<Option<f64>> = rows.iter().map(|r| r.accuracy).collect();
    assert_eq!(accs, [Some(0.70), Some(0.74), Some(0.82), None]);
    assert_eq!(rows[2].changed, SectionFlags { kshot: true, ..Default::default() });
    assert_eq!(rows[1].changed, SectionFlags { principles: true, ..Default::default() });
    assert!(rows[3].changed.instruction && rows[3].changed.principles && rows[3].changed.kshot);
}

#[test]
fn restore_checks_order_and_parents() {
    let mut src = VersionHistory::new();
    src.save(ResolvedPrompt::zero_shot("a"), None, None).unwrap();
    src.save(ResolvedPrompt::zero_shot("b"), None, None).unwrap();
    let mut h = VersionHistory::new();
    for v in src.versions() {
        h.restore(v.clone()).unwrap();
    }
    assert_eq!(h.versions(), src.versions());
    assert!(h.restore(src.versions()[0].clone()).is_err());
    let mut orphan = src.versions()[1].clone();
    orphan.version_id = 5;
    orphan.parent = Some(4);
    assert!(h.restore(orphan).is_err());
}

#[test]
fn bundled_templates_are_distinct() {
    let t = bundled_templates();
    let names: Vec<&str> = t.iter().map(|t| t.name.as_str()).collect();
    assert_eq!(names, ["sentiment", "intent"]);
    assert!(t.iter().all(|t| !t.instruction.trim().is_empty()));
    assert_ne!(t[0].instruction, t[1].instruction);
    assert_eq!(t[0].spec().instruction, t[0].instruction);
}

proptest! {
    #[test]
    fn diff_round_trips(seed in any::<u64>(), edits in proptest::collection::vec(0u8..5, 0..12)) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = random_prompt(&mut rng);
        let mut b = a.clone();
        for kind in edits {
            random_edit(&mut rng, &mut b, kind);
        }
        let d = diff_prompts(&a, &b);
        prop_assert_eq!(apply_diff(&d, &a).unwrap(), b.clone());
        prop_assert_eq!(d.is_empty(), a == b);
        prop_assert!(diff_prompts(&b, &b).is_empty());
    }
}
