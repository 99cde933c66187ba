use std::collections::BTreeMap;
use std::sync::Arc;

use super::*;
use crate::dataset::Dataset;
use crate::gateway::{EmbedItem, GatewayConfig};
use crate::reasoning::Mode;
use crate::testing::{blob_fixture, evidence, result_slot, run_record, bare_instance, FnTransport};

fn dataset(rows: &[(&str, &str)]) -> Dataset {
    let classes = vec!["positive".into(), "negative".into(), "neutral".into()];
    Dataset::new("fx", classes, rows.iter().map(|(id, l)| bare_instance(id, l, "")).collect()).unwrap()
}

#[test]
fn stats_error_rates() {
    let ds = dataset(&[("a", "positive"), ("b", "positive"), ("c", "negative"), ("d", "neutral")]);
    let run = run_record("r", &[Mode::Multimodal], vec![
        result_slot("a", Mode::Multimodal, "positive", vec![]),
        result_slot("b", Mode::Multimodal, "negative", vec![]),
        result_slot("c", Mode::Multimodal, "?", vec![]),
        result_slot("d", Mode::Multimodal, "positive", vec![]),
    ]);
    let ids: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
    let s = pattern_stats(&ids, &run, &ds);
    assert_eq!((s.support, s.error_count), (4, 3));
    assert_eq!(s.error_rate, 0.75);
    assert_eq!(s.prediction_distribution["UNPARSEABLE"], 1);
    assert_eq!(s.prediction_distribution["positive"], 2);
    let s = pattern_stats(&ids[..1], &run, &ds);
    assert_eq!(s.error_rate, 0.0);
}

#[test]
fn stats_match_independent_recount() {
    let labels = ["positive", "negative", "neutral", "?"];
    let mut rows = Vec::new();
    let mut slots = Vec::new();
    let mut x = 17u32;
    for i in 0..20 {
        x = x.wrapping_mul(1103515245).wrapping_add(12345);
        let truth = labels[(x >> 16) as usize % 3];
        let pred = labels[(x >> 8) as usize % 4];
        rows.push((format!("i{i}"), truth, pred));
    }
    for (id, _, pred) in &rows {
        slots.push(result_slot(id, Mode::Multimodal, pred, vec![]));
    }
    let ds = dataset(&rows.iter().map(|(id, t, _)| (id.as_str(), *t)).collect::<Vec<_>>());
    let run = run_record("r", &[Mode::Multimodal], slots);
    let ids: Vec<String> = rows.iter().map(|r| r.0.clone()).collect();
    let s = pattern_stats(&ids, &run, &ds);
    let errors = rows.iter().filter(|(_, t, p)| t != p).count();
    assert_eq!(s.support, 20);
    assert_eq!(s.error_count, errors);
    let mut dist: BTreeMap<String, usize> = BTreeMap::new();
    for (_, _, p) in &rows {
        *dist.entry(if *p == "?" { "UNPARSEABLE".into() } else { p.to_string() }).or_default() += 1;
    }
    assert_eq!(s.prediction_distribution, dist);
}

/// Adjusted Rand index over two labelings; noise counts as its own label.
fn adjusted_rand(a: &[Option<usize>], b: &[Option<usize>]) -> f64 {
    let key = |x: Option<usize>| x.map(|v| v as i64).unwrap_or(-1);
    let mut table: BTreeMap<(i64, i64), u64> = BTreeMap::new();
    let mut ra: BTreeMap<i64, u64> = BTreeMap::new();
    let mut rb: BTreeMap<i64, u64> = BTreeMap::new();
    for (x, y) in a.iter().zip(b) {
        *table.entry((key(*x), key(*y))).or_default() += 1;
        *ra.entry(key(*x)).or_default() += 1;
        *rb.entry(key(*y)).or_default() += 1;
    }
    let c2 = |n: u64| (n * n.saturating_sub(1) / 2) as f64;
    let index: f64 = table.values().map(|n| c2(*n)).sum();
    let sa: f64 = ra.values().map(|n| c2(*n)).sum();
    let sb: f64 = rb.values().map(|n| c2(*n)).sum();
    let expected = sa * sb / c2(a.len() as u64);
    let max = (sa + sb) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

#[test]
fn blobs_are_recovered() {
    let (pts, truth) = blob_fixture(42, 20, 5, 0.02);
    let c = hdbscan(&pts, &ClusterParams::default());
    assert_eq!(c.n_clusters, 3);
    assert!(adjusted_rand(&c.labels, &truth) >= 0.9, "ari {}", adjusted_rand(&c.labels, &truth));
    for i in 60..65 {
        assert_eq!(c.labels[i], None, "outlier {i} must be noise");
    }
}

/// Spans map to fixed directions so clusters are predictable.
fn concept_transport() -> FnTransport {
    FnTransport::new(|_| panic!("no chat expected")).with_embed(|req| {
        Ok(req
            .items
            .iter()
            .map(|item| {
                let EmbedItem::Text { text } = item else { panic!("text only") };
                let axis = if text.contains("smile") {
                    0
                } else if text.contains("frown") {
                    1
                } else if text.contains("hate") || text.contains("didn't like") {
                    2
                } else if text.contains("love") {
                    3
                } else {
                    4 + text.len() % 4
                };
                let wobble = (text.len() % 7) as f32 * 0.01;
                (0..8).map(|d| if d == axis { 1.0 } else if d == (axis + 1) % 8 { wobble } else { 0.0 }).collect()
            })
            .collect())
    })
}

fn mining_fixture() -> (Dataset, RunRecord) {
    use crate::reasoning::Modality::{Language, Visual};
    let rows: Vec<(&str, &str, &str, Vec<EvidenceItem>)> = vec![
        ("a", "negative", "positive", vec![evidence(Visual, "small smile", Some("positive")), evidence(Language, "didn't like", Some("negative"))]),
        ("b", "negative", "positive", vec![evidence(Visual, "smile", Some("positive")), evidence(Language, "hate it", Some("negative"))]),
        ("c", "negative", "negative", vec![evidence(Visual, "slight smile", Some("positive")), evidence(Language, "hate", Some("negative"))]),
        ("d", "positive", "positive", vec![evidence(Visual, "frown", Some("negative")), evidence(Language, "love", Some("positive"))]),
        ("e", "positive", "positive", vec![evidence(Visual, "deep frown", Some("negative")), evidence(Language, "love this", Some("positive"))]),
        ("f", "positive", "negative", vec![evidence(Visual, "frowning", Some("negative")), evidence(Language, "lovely", Some("positive"))]),
        ("g", "neutral", "neutral", vec![evidence(Language, "it is tuesday", None)]),
    ];
    let ds = dataset(&rows.iter().map(|r| (r.0, r.1)).collect::<Vec<_>>());
    let slots = rows.into_iter().map(|(id, _, pred, ev)| result_slot(id, Mode::Multimodal, pred, ev)).collect();
    (ds, run_record("r", &[Mode::Multimodal], slots))
}

use crate::reasoning::EvidenceItem;

fn gateway(t: Arc<FnTransport>) -> Gateway {
    Gateway::new(GatewayConfig::default()).with_transport(t)
}

#[test]
fn mining_pipeline_end_to_end() {
    let (ds, run) = mining_fixture();
    let t = Arc::new(concept_transport());
    let result = mine_run(&run, &ds, None, &MiningParams::default(), &gateway(t.clone())).unwrap();
    assert_eq!(t.embed_calls(), 1, "distinct spans embedded in one batch");
    let names: Vec<(&str, &str)> = result
        .clusters
        .iter()
        .map(|c| (c.id.as_str(), c.representative_concept.as_str()))
        .collect();
    assert_eq!(names.len(), 4, "{names:?}");
    assert_eq!(result.noise[&Modality::Language], 1, "the lone neutral span is noise");
    for c in &result.clusters {
        assert!(c.members.iter().any(|m| m.span == c.representative_concept));
        assert!(c.members.iter().all(|m| m.span != "it is tuesday"));
    }
    let smile = result.clusters.iter().find(|c| c.members.iter().any(|m| m.span == "smile")).unwrap();
    let dislike = result.clusters.iter().find(|c| c.members.iter().any(|m| m.span == "hate")).unwrap();
    let pair = result
        .patterns
        .iter()
        .find(|p| p.concepts == vec![dislike.id.clone(), smile.id.clone()])
        .expect("smile + dislike co-occur");
    assert_eq!(pair.instance_ids, ["a", "b", "c"]);
    assert_eq!(pair.stats.error_count, 2);
    assert!((pair.stats.error_rate - 2.0 / 3.0).abs() < 1e-12);
    // Anti-monotone: each concept alone has at least the pair's support.
    for c in &pair.concepts {
        let single = result.patterns.iter().find(|p| p.concepts == vec![c.clone()]).unwrap();
        assert!(single.stats.support >= pair.stats.support);
    }
}

#[test]
fn mining_respects_scope() {
    let (ds, run) = mining_fixture();
    let t = Arc::new(concept_transport());
    let scope: Vec<String> = ["a", "b", "c", "zzz"].iter().map(|s| s.to_string()).collect();
    let result = mine_run(&run, &ds, Some(&scope), &MiningParams::default(), &gateway(t)).unwrap();
    assert_eq!(result.scope, ["a", "b", "c"]);
    for p in &result.patterns {
        assert!(p.instance_ids.iter().all(|id| ["a", "b", "c"].contains(&id.as_str())));
    }
    for c in &result.clusters {
        assert!(c.members.iter().all(|m| ["a", "b", "c"].contains(&m.instance_id.as_str())));
    }
}

#[test]
fn failed_extraction_is_skipped() {
    let (ds, mut run) = mining_fixture();
    if let crate::reasoning::SlotOutcome::Ok { result } = &mut run.slots[0].outcome {
        result.evidence_source = EvidenceSource::ExtractionFailed;
        result.evidence.clear();
    }
    let (_, occ, skipped) = collect_evidence(&run, None);
    assert_eq!(skipped, ["a"]);
    assert!(occ.iter().all(|o| o.instance_id != "a"));
    let t = Arc::new(concept_transport());
    assert!(mine_run(&run, &ds, None, &MiningParams::default(), &gateway(t)).is_ok());
}

#[test]
fn invalid_params_rejected() {
    let (ds, run) = mining_fixture();
    let params = MiningParams {
        cluster: ClusterParams { min_cluster_size: 2, min_samples: 3 },
        ..MiningParams::default()
    };
    let err = mine(&run, &ds, &[], &[], &[], vec![], &params).unwrap_err();
    assert!(matches!(err, MiningError::Params(_)));
}
