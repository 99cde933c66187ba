//! Reasoning-pattern mining: evidence spans are embedded, clustered per
//! modality into concepts, and frequent concept co-occurrences are mined.

pub mod apriori;
pub mod concepts;
pub mod hdbscan;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use apriori::{apriori, FrequentItemset};
pub use concepts::{representative_concept, ClusterMember, EvidenceCluster, WordCloudEntry};
pub use hdbscan::{hdbscan, ClusterParams, Clustering};

use crate::dataset::{ClassLabel, Dataset};
use crate::gateway::{Gateway, GatewayError};
use crate::reasoning::{Answer, EvidenceSource, Modality, RunRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiningParams {
    pub cluster: ClusterParams,
    pub min_support: usize,
    /// Largest itemset reported.
    pub max_len: usize,
}

impl Default for MiningParams {
    fn default() -> Self {
        MiningParams {
            cluster: ClusterParams::default(),
            min_support: 2,
            max_len: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternStats {
    pub support: usize,
    pub error_count: usize,
    pub error_rate: f64,
    /// Predicted-answer counts (`UNPARSEABLE` included).
    pub prediction_distribution: BTreeMap<String, usize>,
}

/// Error = prediction differs from ground truth; an unparseable or failed
/// prediction is an error. Instances missing from the dataset are skipped.
pub fn pattern_stats(instance_ids: &[String], run: &RunRecord, dataset: &Dataset) -> PatternStats {
    let mode = run.primary_mode();
    let mut support = 0;
    let mut error_count = 0;
    let mut prediction_distribution = BTreeMap::new();
    for id in instance_ids {
        let Some(truth) = dataset.label_of(id) else {
            continue;
        };
        let answer = mode.map(|m| run.answer(id, m)).unwrap_or(Answer::Unparseable);
        support += 1;
        if !answer.is(truth) {
            error_count += 1;
        }
        *prediction_distribution.entry(answer.to_string()).or_default() += 1;
    }
    PatternStats {
        support,
        error_count,
        error_rate: if support == 0 { 0.0 } else { error_count as f64 / support as f64 },
        prediction_distribution,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pattern {
    /// Cluster ids, sorted.
    pub concepts: Vec<String>,
    /// Representative concept per cluster id, same order.
    pub concept_names: Vec<String>,
    pub instance_ids: Vec<String>,
    #[serde(flatten)]
    pub stats: PatternStats,
}

/// One piece of evidence from the mined run, with its owner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceOccurrence {
    pub instance_id: String,
    pub modality: Modality,
    pub span: String,
    pub inferred_label: Option<ClassLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningResult {
    pub run_id: String,
    /// The instances mining was restricted to.
    pub scope: Vec<String>,
    pub params: MiningParams,
    pub clusters: Vec<EvidenceCluster>,
    pub patterns: Vec<Pattern>,
    pub noise: BTreeMap<Modality, usize>,
    /// Scoped instances without usable evidence (failed extraction or failed slot).
    pub skipped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MiningError {
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("run has no results to mine")]
    EmptyRun,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Evidence of the run's primary mode for the scoped instances (all run
/// instances when `scope` is `None`). Ids outside the run are ignored.
pub fn collect_evidence(run: &RunRecord, scope: Option<&[String]>) -> (Vec<String>, Vec<EvidenceOccurrence>, Vec<String>) {
    let in_run: BTreeSet<&str> = run.instance_ids.iter().map(String::as_str).collect();
    let mut seen = BTreeSet::new();
    let ids: Vec<String> = scope
        .map(|s| s.to_vec())
        .unwrap_or_else(|| run.instance_ids.clone())
        .into_iter()
        .filter(|id| in_run.contains(id.as_str()) && seen.insert(id.clone()))
        .collect();
    let mut occurrences = Vec::new();
    let mut skipped = Vec::new();
    let Some(mode) = run.primary_mode() else {
        return (ids.clone(), occurrences, ids);
    };
    for id in &ids {
        match run.result(id, mode) {
            Some(r) if r.evidence_source != EvidenceSource::ExtractionFailed => {
                occurrences.extend(r.evidence.iter().map(|e| EvidenceOccurrence {
                    instance_id: id.clone(),
                    modality: e.modality,
                    span: e.span.clone(),
                    inferred_label: e.inferred_label.clone(),
                }));
            }
            _ => skipped.push(id.clone()),
        }
    }
    (ids, occurrences, skipped)
}

/// Embeds each distinct span once; returns one vector per occurrence.
pub fn embed_evidence(occurrences: &[EvidenceOccurrence], gateway: &Gateway) -> Result<Vec<Vec<f32>>, GatewayError> {
    let mut unique: Vec<String> = Vec::new();
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for o in occurrences {
        if !index.contains_key(o.span.as_str()) {
            index.insert(o.span.as_str(), unique.len());
            unique.push(o.span.clone());
        }
    }
    let mut vectors = Vec::with_capacity(unique.len());
    for chunk in unique.chunks(gateway.config().embedding_batch.max(1)) {
        vectors.extend(gateway.embed_texts(chunk)?);
    }
    Ok(occurrences.iter().map(|o| vectors[index[o.span.as_str()]].clone()).collect())
}

/// Clusters embedded evidence per modality and mines concept co-occurrence
/// patterns over the scoped instances. Pure given its inputs.
pub fn mine(
    run: &RunRecord,
    dataset: &Dataset,
    scope: &[String],
    occurrences: &[EvidenceOccurrence],
    vectors: &[Vec<f32>],
    skipped: Vec<String>,
    params: &MiningParams,
) -> Result<MiningResult, MiningError> {
    params.cluster.validate().map_err(MiningError::Params)?;
    if params.min_support < 1 || params.max_len < 1 {
        return Err(MiningError::Params("min_support and max_len must be >= 1".into()));
    }
    assert_eq!(occurrences.len(), vectors.len(), "one vector per occurrence");
    let mut clusters = Vec::new();
    let mut noise = BTreeMap::new();
    // Cluster id touched by each occurrence (None for noise).
    let mut concept_of: Vec<Option<String>> = vec![None; occurrences.len()];
    for (modality, prefix) in [(Modality::Visual, "V"), (Modality::Language, "L")] {
        let idx: Vec<usize> = (0..occurrences.len()).filter(|i| occurrences[*i].modality == modality).collect();
        let pts: Vec<Vec<f32>> = idx.iter().map(|i| vectors[*i].clone()).collect();
        let clustering = hdbscan(&pts, &params.cluster);
        noise.insert(modality, clustering.noise().len());
        for c in 0..clustering.n_clusters {
            let members: Vec<usize> = clustering.members(c).into_iter().map(|m| idx[m]).collect();
            let spans: Vec<&str> = members.iter().map(|m| occurrences[*m].span.as_str()).collect();
            let vecs: Vec<&[f32]> = members.iter().map(|m| vectors[*m].as_slice()).collect();
            let name = representative_concept(&spans, &vecs).expect("clusters are non-empty");
            let id = format!("{prefix}{c}");
            for m in &members {
                concept_of[*m] = Some(id.clone());
            }
            let members = members
                .iter()
                .map(|m| ClusterMember {
                    instance_id: occurrences[*m].instance_id.clone(),
                    span: occurrences[*m].span.clone(),
                    inferred_label: occurrences[*m].inferred_label.clone(),
                })
                .collect();
            clusters.push(EvidenceCluster::build(id, modality, name, members));
        }
    }

    let position: BTreeMap<&str, usize> = scope.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut transactions: Vec<BTreeSet<String>> = vec![BTreeSet::new(); scope.len()];
    for (o, concept) in occurrences.iter().zip(&concept_of) {
        if let (Some(c), Some(t)) = (concept, position.get(o.instance_id.as_str())) {
            transactions[*t].insert(c.clone());
        }
    }
    let names: BTreeMap<&str, &str> = clusters
        .iter()
        .map(|c| (c.id.as_str(), c.representative_concept.as_str()))
        .collect();
    let patterns = apriori(&transactions, params.min_support, Some(params.max_len))
        .into_iter()
        .map(|set| {
            let instance_ids: Vec<String> = set.transactions.iter().map(|t| scope[*t].clone()).collect();
            let stats = pattern_stats(&instance_ids, run, dataset);
            Pattern {
                concept_names: set.items.iter().map(|c| names[c.as_str()].to_string()).collect(),
                concepts: set.items,
                instance_ids,
                stats,
            }
        })
        .collect();
    Ok(MiningResult {
        run_id: run.run_id.clone(),
        scope: scope.to_vec(),
        params: *params,
        clusters,
        patterns,
        noise,
        skipped,
    })
}

/// Collect, embed and mine in one step.
pub fn mine_run(
    run: &RunRecord,
    dataset: &Dataset,
    scope: Option<&[String]>,
    params: &MiningParams,
    gateway: &Gateway,
) -> Result<MiningResult, MiningError> {
    if run.slots.is_empty() {
        return Err(MiningError::EmptyRun);
    }
    let (ids, occurrences, skipped) = collect_evidence(run, scope);
    let vectors = if occurrences.is_empty() {
        Vec::new()
    } else {
        embed_evidence(&occurrences, gateway)?
    };
    mine(run, dataset, &ids, &occurrences, &vectors, skipped, params)
}

#[cfg(test)]
mod tests;
