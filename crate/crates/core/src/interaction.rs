//! Modality interaction typing of (visual, language, multimodal) answer triples
//! and the three-layer Sankey summary built from them.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dataset::{ClassLabel, Dataset};
use crate::reasoning::{Answer, Modality, Mode, RunRecord};

/// Hard-label distance: 0 when the labels agree, 1 otherwise.
pub fn label_distance(a: &ClassLabel, b: &ClassLabel) -> f64 {
    if a == b {
        0.0
    } else {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InteractionConfig {
    /// Two answers "agree" when their distance is below `theta`.
    pub theta: f64,
}

impl Default for InteractionConfig {
    fn default() -> Self {
        InteractionConfig { theta: 0.5 }
    }
}

impl InteractionConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.theta > 0.0 && self.theta <= 1.0 {
            Ok(())
        } else {
            Err(format!("theta must lie in (0, 1], got {}", self.theta))
        }
    }

    fn agree(&self, a: &ClassLabel, b: &ClassLabel) -> bool {
        label_distance(a, b) < self.theta
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coarse {
    Complement,
    Conflict,
}

impl Coarse {
    pub const ALL: [Coarse; 2] = [Coarse::Complement, Coarse::Conflict];

    pub fn as_str(self) -> &'static str {
        match self {
            Coarse::Complement => "complement",
            Coarse::Conflict => "conflict",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fine {
    ComplementRedundant,
    ComplementDistinct,
    ConflictDominant,
    ConflictDistinct,
}

impl Fine {
    pub const ALL: [Fine; 4] = [
        Fine::ComplementRedundant,
        Fine::ComplementDistinct,
        Fine::ConflictDominant,
        Fine::ConflictDistinct,
    ];

    pub fn coarse(self) -> Coarse {
        match self {
            Fine::ComplementRedundant | Fine::ComplementDistinct => Coarse::Complement,
            Fine::ConflictDominant | Fine::ConflictDistinct => Coarse::Conflict,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Fine::ComplementRedundant => "complement_redundant",
            Fine::ComplementDistinct => "complement_distinct",
            Fine::ConflictDominant => "conflict_dominant",
            Fine::ConflictDistinct => "conflict_distinct",
        }
    }
}

impl std::str::FromStr for Fine {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Fine::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| format!("unknown interaction type `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Classification {
    pub coarse: Coarse,
    pub fine: Fine,
    pub dominant_modality: Option<Modality>,
}

/// Types one triple. `f1` is the vision-only answer, `f2` the language-only one.
pub fn classify_interaction(
    f1: &ClassLabel,
    f2: &ClassLabel,
    fm: &ClassLabel,
    config: &InteractionConfig,
) -> Classification {
    let m1 = config.agree(fm, f1);
    let m2 = config.agree(fm, f2);
    if config.agree(f1, f2) {
        let fine = if m1 && m2 {
            Fine::ComplementRedundant
        } else {
            Fine::ComplementDistinct
        };
        return Classification {
            coarse: Coarse::Complement,
            fine,
            dominant_modality: None,
        };
    }
    let (fine, dominant_modality) = match (m1, m2) {
        (true, false) => (Fine::ConflictDominant, Some(Modality::Visual)),
        (false, true) => (Fine::ConflictDominant, Some(Modality::Language)),
        // Unreachable with hard labels (f1 != f2); kept total for soft distances.
        (true, true) => (Fine::ConflictDominant, None),
        (false, false) => (Fine::ConflictDistinct, None),
    };
    Classification {
        coarse: Coarse::Conflict,
        fine,
        dominant_modality,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub instance_id: String,
    pub f1: ClassLabel,
    pub f2: ClassLabel,
    #[serde(rename = "fM")]
    pub fm: ClassLabel,
    pub truth: ClassLabel,
    pub coarse: Coarse,
    pub fine: Fine,
    pub dominant_modality: Option<Modality>,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExcludedInstance {
    pub instance_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SankeyNode {
    /// `"l1:<class>"`, `"l2:<coarse>"` or `"l3:<fine>"`.
    pub id: String,
    pub layer: u8,
    pub key: String,
    pub instance_ids: Vec<String>,
    pub correct: usize,
    pub error: usize,
}

impl SankeyNode {
    pub fn count(&self) -> usize {
        self.instance_ids.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BarcodeEntry {
    pub instance_id: String,
    #[serde(rename = "fM")]
    pub fm: ClassLabel,
    pub f1: ClassLabel,
    pub f2: ClassLabel,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SankeyFlow {
    pub source: String,
    pub target: String,
    pub instance_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SankeySummary {
    pub run_id: String,
    pub theta: f64,
    pub layer1: Vec<SankeyNode>,
    pub layer2: Vec<SankeyNode>,
    pub layer3: Vec<SankeyNode>,
    /// Per fine type: instances grouped by multimodal answer class, then by id.
    pub barcodes: BTreeMap<Fine, Vec<BarcodeEntry>>,
    pub flows: Vec<SankeyFlow>,
    pub records: Vec<InteractionRecord>,
    pub excluded: Vec<ExcludedInstance>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SummaryError {
    #[error("run `{run}` lacks mode {mode}; interaction typing needs all three modes")]
    MissingMode { run: String, mode: &'static str },
    #[error("invalid interaction config: {0}")]
    Config(String),
}

impl SankeySummary {
    pub fn node(&self, id: &str) -> Option<&SankeyNode> {
        self.layer1
            .iter()
            .chain(&self.layer2)
            .chain(&self.layer3)
            .find(|n| n.id == id)
    }

    pub fn record(&self, instance_id: &str) -> Option<&InteractionRecord> {
        self.records.iter().find(|r| r.instance_id == instance_id)
    }

    /// Checks that each node's ids equal the union of its incoming flows (layers 2
    /// and 3) and of its outgoing flows (layers 1 and 2), and that every typed
    /// instance appears exactly once per layer.
    pub fn check_conservation(&self) -> Result<(), String> {
        let typed: BTreeSet<&str> = self.records.iter().map(|r| r.instance_id.as_str()).collect();
        if typed.len() != self.records.len() {
            return Err("duplicate interaction record".into());
        }
        for (name, layer) in [("layer1", &self.layer1), ("layer2", &self.layer2), ("layer3", &self.layer3)] {
            let mut seen = BTreeSet::new();
            for node in layer {
                for id in &node.instance_ids {
                    if !seen.insert(id.as_str()) {
                        return Err(format!("{id} appears twice in {name}"));
                    }
                }
                if node.correct + node.error != node.count() {
                    return Err(format!("{}: correct + error != count", node.id));
                }
            }
            if seen != typed {
                return Err(format!("{name} does not cover exactly the typed instances"));
            }
        }
        let gather = |pick: &dyn Fn(&SankeyFlow) -> bool| -> BTreeSet<&str> {
            self.flows
                .iter()
                .filter(|f| pick(f))
                .flat_map(|f| f.instance_ids.iter().map(String::as_str))
                .collect()
        };
        for node in self.layer1.iter().chain(&self.layer2).chain(&self.layer3) {
            let own: BTreeSet<&str> = node.instance_ids.iter().map(String::as_str).collect();
            if node.layer > 1 {
                let incoming = gather(&|f| f.target == node.id);
                if incoming != own {
                    return Err(format!("inflow of {} differs from its members", node.id));
                }
            }
            if node.layer < 3 {
                let outgoing = gather(&|f| f.source == node.id);
                if outgoing != own {
                    return Err(format!("outflow of {} differs from its members", node.id));
                }
            }
        }
        Ok(())
    }
}

fn node(layer: u8, key: &str) -> SankeyNode {
    SankeyNode {
        id: format!("l{layer}:{key}"),
        layer,
        key: key.to_string(),
        instance_ids: Vec::new(),
        correct: 0,
        error: 0,
    }
}

fn tally(n: &mut SankeyNode, r: &InteractionRecord) {
    n.instance_ids.push(r.instance_id.clone());
    if r.correct {
        n.correct += 1;
    } else {
        n.error += 1;
    }
}

/// Types every instance of a three-mode run and aggregates the Sankey layers.
/// Instances with any unparseable or failed mode, or unknown to the dataset,
/// land in `excluded`.
pub fn summarize(
    run: &RunRecord,
    dataset: &Dataset,
    config: &InteractionConfig,
) -> Result<SankeySummary, SummaryError> {
    config.validate().map_err(SummaryError::Config)?;
    for mode in Mode::ALL {
        if !run.has_mode(mode) {
            return Err(SummaryError::MissingMode {
                run: run.run_id.clone(),
                mode: mode.as_str(),
            });
        }
    }
    let mut records = Vec::new();
    let mut excluded = Vec::new();
    let mut seen = BTreeSet::new();
    for id in &run.instance_ids {
        if !seen.insert(id.as_str()) {
            continue;
        }
        let Some(truth) = dataset.label_of(id) else {
            excluded.push(ExcludedInstance {
                instance_id: id.clone(),
                reason: "not in dataset".into(),
            });
            continue;
        };
        let answers: Vec<(Mode, Answer)> = [Mode::VisionOnly, Mode::LanguageOnly, Mode::Multimodal]
            .into_iter()
            .map(|m| (m, run.answer(id, m)))
            .collect();
        let bad: Vec<&str> = answers
            .iter()
            .filter(|(_, a)| a.label().is_none())
            .map(|(m, _)| m.as_str())
            .collect();
        if !bad.is_empty() {
            excluded.push(ExcludedInstance {
                instance_id: id.clone(),
                reason: format!("unparseable answer in {}", bad.join(", ")),
            });
            continue;
        }
        let label = |i: usize| answers[i].1.label().cloned().expect("checked above");
        let (f1, f2, fm) = (label(0), label(1), label(2));
        let c = classify_interaction(&f1, &f2, &fm, config);
        records.push(InteractionRecord {
            instance_id: id.clone(),
            correct: &fm == truth,
            truth: truth.clone(),
            f1,
            f2,
            fm,
            coarse: c.coarse,
            fine: c.fine,
            dominant_modality: c.dominant_modality,
        });
    }
    Ok(aggregate(&run.run_id, config.theta, dataset.classes(), records, excluded))
}

/// Builds layers, barcodes and flows from already-typed records.
pub fn aggregate(
    run_id: &str,
    theta: f64,
    classes: &[ClassLabel],
    mut records: Vec<InteractionRecord>,
    excluded: Vec<ExcludedInstance>,
) -> SankeySummary {
    let class_rank = |c: &ClassLabel| classes.iter().position(|k| k == c).unwrap_or(usize::MAX);
    records.sort_by(|a, b| {
        class_rank(&a.fm)
            .cmp(&class_rank(&b.fm))
            .then_with(|| a.fm.cmp(&b.fm))
            .then_with(|| a.instance_id.cmp(&b.instance_id))
    });

    let mut layer1: Vec<SankeyNode> = classes.iter().map(|c| node(1, c.as_str())).collect();
    let mut layer2: Vec<SankeyNode> = Coarse::ALL.iter().map(|c| node(2, c.as_str())).collect();
    let mut layer3: Vec<SankeyNode> = Fine::ALL.iter().map(|f| node(3, f.as_str())).collect();
    let mut barcodes: BTreeMap<Fine, Vec<BarcodeEntry>> = Fine::ALL.iter().map(|f| (*f, Vec::new())).collect();
    let mut flows: BTreeMap<(String, String), Vec<String>> = BTreeMap::new();

    for r in &records {
        let i1 = match layer1.iter().position(|n| n.key == r.fm.as_str()) {
            Some(i) => i,
            None => {
                layer1.push(node(1, r.fm.as_str()));
                layer1.len() - 1
            }
        };
        let i2 = Coarse::ALL.iter().position(|c| *c == r.coarse).expect("all coarse types present");
        let i3 = Fine::ALL.iter().position(|f| *f == r.fine).expect("all fine types present");
        tally(&mut layer1[i1], r);
        tally(&mut layer2[i2], r);
        tally(&mut layer3[i3], r);
        flows
            .entry((layer1[i1].id.clone(), layer2[i2].id.clone()))
            .or_default()
            .push(r.instance_id.clone());
        flows
            .entry((layer2[i2].id.clone(), layer3[i3].id.clone()))
            .or_default()
            .push(r.instance_id.clone());
        barcodes.get_mut(&r.fine).expect("all fine types present").push(BarcodeEntry {
            instance_id: r.instance_id.clone(),
            fm: r.fm.clone(),
            f1: r.f1.clone(),
            f2: r.f2.clone(),
            correct: r.correct,
        });
    }

    let flows = flows
        .into_iter()
        .map(|((source, target), instance_ids)| SankeyFlow {
            source,
            target,
            instance_ids,
        })
        .collect();
    SankeySummary {
        run_id: run_id.to_string(),
        theta,
        layer1,
        layer2,
        layer3,
        barcodes,
        flows,
        records,
        excluded,
    }
}
