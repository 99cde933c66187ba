//! Scoring runs (accuracy, confusion matrix, per-class F1) and tracking a
//! hand-picked set of instances across prompt versions.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassLabel, Dataset, SplitAssignment, SplitName};
use crate::reasoning::{Answer, KShotExample, Mode, RunRecord, UNPARSEABLE};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("run `{0}` has no results")]
    EmptyRun(String),
    #[error("instance `{0}` is not in the dataset")]
    UnknownInstance(String),
    #[error("k-shot examples leak into the scored set: {0:?}")]
    Leakage(Vec<String>),
    #[error("instance `{id}` belongs to the {actual} split, expected {expected}")]
    WrongSplit { id: String, expected: SplitName, actual: String },
    #[error("the test split has no unretrieved instances left")]
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceOutcome {
    pub instance_id: String,
    pub truth: ClassLabel,
    pub prediction: Answer,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<ClassLabel>,
    /// `counts[truth][prediction]`, class order as in `classes`.
    pub counts: Vec<Vec<usize>>,
    /// Unparseable (or failed) predictions per truth class.
    pub unparseable: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum::<usize>() + self.unparseable.iter().sum::<usize>()
    }

    pub fn diagonal(&self) -> usize {
        (0..self.classes.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_total(&self, truth: usize) -> usize {
        self.counts[truth].iter().sum::<usize>() + self.unparseable[truth]
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["truth \\ prediction".to_string()];
        header.extend(self.classes.iter().map(|c| c.to_string()));
        header.push(UNPARSEABLE.into());
        w.write_record(&header).expect("in-memory write");
        for (i, c) in self.classes.iter().enumerate() {
            let mut row = vec![c.to_string()];
            row.extend(self.counts[i].iter().map(usize::to_string));
            row.push(self.unparseable[i].to_string());
            w.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub version_id: Option<u64>,
    pub split: Option<SplitName>,
    pub mode: Mode,
    pub accuracy: f64,
    pub confusion_matrix: ConfusionMatrix,
    pub per_class_f1: BTreeMap<ClassLabel, f64>,
    pub outcomes: Vec<InstanceOutcome>,
    pub created_at: DateTime<Utc>,
}

impl EvalReport {
    pub fn evaluated(&self) -> usize {
        self.outcomes.len()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Ids present both in the k-shot list and in the run.
pub fn leakage(kshot: &[KShotExample], run: &RunRecord) -> Vec<String> {
    let scored: BTreeSet<&str> = run.instance_ids.iter().map(String::as_str).collect();
    let mut out: Vec<String> = kshot
        .iter()
        .filter(|k| scored.contains(k.instance_id.as_str()))
        .map(|k| k.instance_id.clone())
        .collect();
    out.sort();
    out.dedup();
    out
}

/// Scores the run's primary mode. Failed slots and labels outside the class
/// set land in the unparseable column and count as wrong.
pub fn score_run(run: &RunRecord, dataset: &Dataset, kshot: &[KShotExample]) -> Result<EvalReport, EvalError> {
    let mode = run.primary_mode().ok_or_else(|| EvalError::EmptyRun(run.run_id.clone()))?;
    let leaked = leakage(kshot, run);
    if !leaked.is_empty() {
        return Err(EvalError::Leakage(leaked));
    }
    let classes = dataset.classes().to_vec();
    let index: BTreeMap<&ClassLabel, usize> = classes.iter().enumerate().map(|(i, c)| (c, i)).collect();
    let k = classes.len();
    let mut counts = vec![vec![0; k]; k];
    let mut unparseable = vec![0; k];
    let mut outcomes = Vec::with_capacity(run.instance_ids.len());
    for id in &run.instance_ids {
        let truth = dataset.label_of(id).ok_or_else(|| EvalError::UnknownInstance(id.clone()))?;
        let t = index[truth];
        let prediction = run.answer(id, mode);
        match prediction.label().and_then(|l| index.get(l)) {
            Some(p) => counts[t][*p] += 1,
            None => unparseable[t] += 1,
        }
        outcomes.push(InstanceOutcome {
            instance_id: id.clone(),
            truth: truth.clone(),
            correct: prediction.is(truth),
            prediction,
        });
    }
    let matrix = ConfusionMatrix { classes: classes.clone(), counts, unparseable };
    let total = matrix.total();
    let accuracy = if total == 0 { 0.0 } else { matrix.diagonal() as f64 / total as f64 };
    let per_class_f1 = classes
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let tp = matrix.counts[i][i] as f64;
            let predicted: usize = (0..k).map(|r| matrix.counts[r][i]).sum();
            let actual = matrix.row_total(i);
            let denom = predicted as f64 + actual as f64;
            (c.clone(), if denom == 0.0 { 0.0 } else { 2.0 * tp / denom })
        })
        .collect();
    Ok(EvalReport {
        run_id: run.run_id.clone(),
        version_id: run.version_id,
        split: run.split,
        mode,
        accuracy,
        confusion_matrix: matrix,
        per_class_f1,
        outcomes,
        created_at: Utc::now(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cell {
    Correct,
    Incorrect,
    Unrun,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeMatrix {
    pub instance_ids: Vec<String>,
    pub versions: Vec<u64>,
    /// `cells[instance][version]`.
    pub cells: Vec<Vec<Cell>>,
}

impl OutcomeMatrix {
    pub fn row(&self, instance_id: &str) -> Option<&[Cell]> {
        self.instance_ids
            .iter()
            .position(|i| i == instance_id)
            .map(|i| self.cells[i].as_slice())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Retrieval {
    pub ids: Vec<String>,
    /// Set when fewer than requested were available.
    pub notice: Option<String>,
}

/// Instances the operator saved from the validation split plus extra ones
/// pulled from the held-out test split.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceTestSet {
    pub saved: BTreeSet<String>,
    pub retrieved: Vec<String>,
}

impl InstanceTestSet {
    pub fn all_ids(&self) -> Vec<String> {
        self.saved.iter().chain(&self.retrieved).cloned().collect()
    }

    pub fn save(&mut self, ids: &[String], splits: &SplitAssignment) -> Result<usize, EvalError> {
        for id in ids {
            match splits.split_of(id) {
                Some(SplitName::Validation) => {}
                other => {
                    return Err(EvalError::WrongSplit {
                        id: id.clone(),
                        expected: SplitName::Validation,
                        actual: other.map_or("no".into(), |s| s.to_string()),
                    })
                }
            }
        }
        let before = self.saved.len();
        self.saved.extend(ids.iter().cloned());
        Ok(self.saved.len() - before)
    }

    /// Seeded class-stratified sample of `n` not-yet-retrieved test instances.
    /// Class quotas follow the remaining class mix (largest remainder, ties
    /// to class order).
    pub fn retrieve(
        &mut self,
        n: usize,
        seed: u64,
        splits: &SplitAssignment,
        dataset: &Dataset,
    ) -> Result<Retrieval, EvalError> {
        let taken: BTreeSet<&String> = self.retrieved.iter().collect();
        let mut by_class: Vec<Vec<String>> = vec![Vec::new(); dataset.classes().len()];
        for id in splits.ids(SplitName::Test) {
            if taken.contains(id) {
                continue;
            }
            let label = dataset.label_of(id).ok_or_else(|| EvalError::UnknownInstance(id.clone()))?;
            let c = dataset.classes().iter().position(|x| x == label).expect("label is a class");
            by_class[c].push(id.clone());
        }
        let remaining: usize = by_class.iter().map(Vec::len).sum();
        if remaining == 0 {
            return Err(EvalError::Exhausted);
        }
        let want = n.min(remaining);
        let mut quotas: Vec<usize> = by_class.iter().map(|c| c.len() * want / remaining).collect();
        let mut order: Vec<usize> = (0..by_class.len()).collect();
        // Largest remainder first; stable sort keeps class order on ties.
        order.sort_by_key(|c| std::cmp::Reverse((by_class[*c].len() * want) % remaining));
        let mut short = want - quotas.iter().sum::<usize>();
        for c in order {
            if short == 0 {
                break;
            }
            if quotas[c] < by_class[c].len() {
                quotas[c] += 1;
                short -= 1;
            }
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut ids = Vec::with_capacity(want);
        for (pool, quota) in by_class.iter_mut().zip(quotas) {
            pool.shuffle(&mut rng);
            ids.extend(pool.drain(..quota));
        }
        ids.sort();
        self.retrieved.extend(ids.iter().cloned());
        let notice = (want < n).then(|| {
            format!("requested {n} but only {want} unretrieved test instances remained; the test split is now exhausted")
        });
        Ok(Retrieval { ids, notice })
    }

    /// Correct/incorrect per (instance, version) from the runs given; a later
    /// run for the same version overrides an earlier one.
    pub fn track(&self, versions: &[u64], runs: &[&RunRecord], dataset: &Dataset) -> OutcomeMatrix {
        let instance_ids = self.all_ids();
        let mut cells = vec![vec![Cell::Unrun; versions.len()]; instance_ids.len()];
        for run in runs {
            let (Some(v), Some(mode)) = (run.version_id, run.primary_mode()) else {
                continue;
            };
            let Some(col) = versions.iter().position(|x| *x == v) else {
                continue;
            };
            for (row, id) in instance_ids.iter().enumerate() {
                if run.slot(id, mode).is_none() {
                    continue;
                }
                let Some(truth) = dataset.label_of(id) else {
                    continue;
                };
                cells[row][col] = if run.answer(id, mode).is(truth) { Cell::Correct } else { Cell::Incorrect };
            }
        }
        OutcomeMatrix { instance_ids, versions: versions.to_vec(), cells }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{bare_instance, result_slot, run_record};

    fn dataset(rows: &[(&str, &str)]) -> Dataset {
        let classes = vec!["positive".into(), "negative".into(), "neutral".into()];
        Dataset::new("fx", classes, rows.iter().map(|(id, l)| bare_instance(id, l, "")).collect()).unwrap()
    }

    fn run(id: &str, version: Option<u64>, preds: &[(&str, &str)]) -> RunRecord {
        let mut r = run_record(id, &[Mode::Multimodal], preds.iter().map(|(i, p)| result_slot(i, Mode::Multimodal, p, vec![])).collect());
        r.version_id = version;
        r
    }

    #[test]
    fn seven_of_ten() {
        let rows: Vec<(String, &str)> = (0..10).map(|i| (format!("i{i}"), "positive")).collect();
        let ds = dataset(&rows.iter().map(|(a, b)| (a.as_str(), *b)).collect::<Vec<_>>());
        let preds: Vec<(&str, &str)> = rows.iter().enumerate().map(|(i, (id, _))| (id.as_str(), if i < 7 { "positive" } else { "negative" })).collect();
        let r = score_run(&run("r", Some(1), &preds), &ds, &[]).unwrap();
        assert!((r.accuracy - 0.70).abs() < 1e-12);
        assert_eq!(r.evaluated(), 10);
    }

    #[test]
    fn all_wrong_is_one_cell() {
        let ds = dataset(&[("a", "positive"), ("b", "positive"), ("c", "positive")]);
        let r = score_run(&run("r", None, &[("a", "negative"), ("b", "negative"), ("c", "negative")]), &ds, &[]).unwrap();
        let m = &r.confusion_matrix;
        let nonzero: Vec<(usize, usize, usize)> = (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .filter(|(i, j)| m.counts[*i][*j] > 0)
            .map(|(i, j)| (i, j, m.counts[i][j]))
            .collect();
        assert_eq!(nonzero, [(0, 1, 3)]);
        assert_eq!(r.accuracy, 0.0);
    }

    #[test]
    fn matrix_matches_recount() {
        let names = ["positive", "negative", "neutral"];
        let preds = ["positive", "negative", "neutral", "?"];
        let mut x = 99u32;
        let mut rows = Vec::new();
        for i in 0..20 {
            x = x.wrapping_mul(1664525).wrapping_add(1013904223);
            rows.push((format!("i{i}"), names[(x >> 24) as usize % 3], preds[(x >> 12) as usize % 4]));
        }
        let ds = dataset(&rows.iter().map(|(a, b, _)| (a.as_str(), *b)).collect::<Vec<_>>());
        let r = score_run(&run("r", None, &rows.iter().map(|(a, _, p)| (a.as_str(), *p)).collect::<Vec<_>>()), &ds, &[]).unwrap();
        let m = &r.confusion_matrix;
        for (ti, t) in names.iter().enumerate() {
            for (pi, p) in names.iter().enumerate() {
                let n = rows.iter().filter(|(_, a, b)| a == t && b == p).count();
                assert_eq!(m.counts[ti][pi], n, "{t}->{p}");
            }
            assert_eq!(m.unparseable[ti], rows.iter().filter(|(_, a, b)| a == t && *b == "?").count());
            assert_eq!(m.row_total(ti), rows.iter().filter(|(_, a, _)| a == t).count());
        }
        assert_eq!(m.total(), 20);
        let correct = rows.iter().filter(|(_, a, b)| a == b).count();
        assert!((r.accuracy - correct as f64 / 20.0).abs() < 1e-12);
        // F1 from the recount: 2tp / (predicted + actual).
        for t in names {
            let tp = rows.iter().filter(|(_, a, b)| *a == t && *b == t).count() as f64;
            let pred = rows.iter().filter(|(_, _, b)| *b == t).count() as f64;
            let act = rows.iter().filter(|(_, a, _)| *a == t).count() as f64;
            let f1 = if pred + act == 0.0 { 0.0 } else { 2.0 * tp / (pred + act) };
            assert!((r.per_class_f1[&ClassLabel::from(t)] - f1).abs() < 1e-12);
        }
        let csv = m.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().next().unwrap().ends_with("UNPARSEABLE"));
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn leakage_is_refused() {
        let ds = dataset(&[("a", "positive"), ("b", "negative")]);
        let k = vec![KShotExample { instance_id: "b".into(), rationale: "r".into(), answer: "negative".into() }];
        let err = score_run(&run("r", None, &[("a", "positive"), ("b", "negative")]), &ds, &k).unwrap_err();
        assert_eq!(err, EvalError::Leakage(vec!["b".into()]));
    }

    fn splits(val: &[&str], test: &[&str]) -> SplitAssignment {
        SplitAssignment {
            validation: val.iter().map(|s| s.to_string()).collect(),
            demonstration: BTreeSet::new(),
            test: test.iter().map(|s| s.to_string()).collect(),
            seed: 0,
        }
    }

    #[test]
    fn retrieval_exhausts_and_is_seeded() {
        let rows: Vec<(String, &str)> = (0..10).map(|i| (format!("t{i}"), ["positive", "negative"][i % 2])).collect();
        let ds = dataset(&rows.iter().map(|(a, b)| (a.as_str(), *b)).collect::<Vec<_>>());
        let test: Vec<&str> = rows.iter().map(|r| r.0.as_str()).collect();
        let sp = splits(&[], &test);
        let mut set = InstanceTestSet::default();
        let first = set.retrieve(5, 7, &sp, &ds).unwrap();
        assert_eq!(first.ids.len(), 5);
        assert!(first.notice.is_none());
        assert!(first.ids.iter().all(|id| sp.test.contains(id)));
        let pos = first.ids.iter().filter(|id| ds.label_of(id).unwrap().as_str() == "positive").count();
        assert!(pos == 2 || pos == 3, "stratified");
        let second = set.retrieve(6, 7, &sp, &ds).unwrap();
        assert_eq!(second.ids.len(), 5);
        assert!(second.notice.is_some());
        let all: BTreeSet<&String> = first.ids.iter().chain(&second.ids).collect();
        assert_eq!(all.len(), 10);
        assert_eq!(set.retrieve(1, 7, &sp, &ds).unwrap_err(), EvalError::Exhausted);

        let mut fresh = InstanceTestSet::default();
        assert_eq!(fresh.retrieve(5, 7, &sp, &ds).unwrap().ids, first.ids);
    }

    #[test]
    fn saved_ids_must_be_validation() {
        let sp = splits(&["v1"], &["t1"]);
        let mut set = InstanceTestSet::default();
        assert_eq!(set.save(&["v1".into()], &sp).unwrap(), 1);
        assert!(matches!(set.save(&["t1".into()], &sp), Err(EvalError::WrongSplit { .. })));
    }

    #[test]
    fn tracking_across_versions() {
        let ds = dataset(&[("a", "positive"), ("b", "negative"), ("c", "neutral")]);
        let set = InstanceTestSet { saved: ["a".to_string(), "b".to_string()].into(), retrieved: vec!["c".into()] };
        let v1 = run("r1", Some(1), &[("a", "negative"), ("b", "negative")]);
        let v2 = run("r2", Some(2), &[("a", "positive"), ("b", "?"), ("c", "neutral")]);
        let m = set.track(&[1, 2, 3], &[&v1, &v2], &ds);
        assert_eq!(m.row("a").unwrap(), [Cell::Incorrect, Cell::Correct, Cell::Unrun]);
        assert_eq!(m.row("b").unwrap(), [Cell::Correct, Cell::Incorrect, Cell::Unrun]);
        assert_eq!(m.row("c").unwrap(), [Cell::Unrun, Cell::Correct, Cell::Unrun]);
        // Recount from raw runs.
        for (row, id) in m.instance_ids.iter().enumerate() {
            for (col, run) in [&v1, &v2].iter().enumerate() {
                let expect = match run.slot(id, Mode::Multimodal) {
                    None => Cell::Unrun,
                    Some(_) if run.answer(id, Mode::Multimodal).is(ds.label_of(id).unwrap()) => Cell::Correct,
                    Some(_) => Cell::Incorrect,
                };
                assert_eq!(m.cells[row][col], expect);
            }
        }
    }
}
