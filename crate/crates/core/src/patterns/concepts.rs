use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::ClassLabel;
use crate::reasoning::Modality;
use crate::vecmath::{dot, mean_direction};

const TIE_EPS: f64 = 1e-9;

/// Index of the member nearest the normalized-mean centroid. Near-ties (within
/// 1e-9) go to the lexicographically smallest span.
pub fn representative_index(spans: &[&str], vectors: &[&[f32]]) -> Option<usize> {
    let centroid = mean_direction(vectors.iter().copied())?;
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in vectors.iter().enumerate() {
        let s = dot(v, &centroid);
        best = match best {
            None => Some((i, s)),
            Some((b, bs)) => {
                if s > bs + TIE_EPS || ((s - bs).abs() <= TIE_EPS && spans[i] < spans[b]) {
                    Some((i, s.max(bs)))
                } else {
                    Some((b, bs))
                }
            }
        };
    }
    best.map(|(i, _)| i)
}

/// The span naming a cluster; always one of `spans`.
pub fn representative_concept(spans: &[&str], vectors: &[&[f32]]) -> Option<String> {
    representative_index(spans, vectors).map(|i| spans[i].to_string())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterMember {
    pub instance_id: String,
    pub span: String,
    pub inferred_label: Option<ClassLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordCloudEntry {
    pub span: String,
    pub frequency: usize,
    /// Share of this span's occurrences per inferred label (`"none"` for unlabeled).
    pub class_proportions: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceCluster {
    /// `"V<n>"` for visual clusters, `"L<n>"` for language clusters.
    pub id: String,
    pub modality: Modality,
    pub representative_concept: String,
    pub members: Vec<ClusterMember>,
    /// Counts of inferred labels (`"none"` for unlabeled); sums to the member count.
    pub class_distribution: BTreeMap<String, usize>,
    /// Sorted by frequency (descending), then span.
    pub word_cloud: Vec<WordCloudEntry>,
}

pub const NO_LABEL: &str = "none";

fn label_key(l: &Option<ClassLabel>) -> String {
    l.as_ref().map(|c| c.to_string()).unwrap_or_else(|| NO_LABEL.to_string())
}

impl EvidenceCluster {
    pub fn build(id: String, modality: Modality, representative: String, members: Vec<ClusterMember>) -> Self {
        let mut class_distribution: BTreeMap<String, usize> = BTreeMap::new();
        let mut per_span: BTreeMap<&str, BTreeMap<String, usize>> = BTreeMap::new();
        for m in &members {
            let key = label_key(&m.inferred_label);
            *class_distribution.entry(key.clone()).or_default() += 1;
            *per_span.entry(m.span.as_str()).or_default().entry(key).or_default() += 1;
        }
        let mut word_cloud: Vec<WordCloudEntry> = per_span
            .into_iter()
            .map(|(span, labels)| {
                let frequency: usize = labels.values().sum();
                WordCloudEntry {
                    span: span.to_string(),
                    frequency,
                    class_proportions: labels
                        .into_iter()
                        .map(|(k, c)| (k, c as f64 / frequency as f64))
                        .collect(),
                }
            })
            .collect();
        word_cloud.sort_by(|a, b| b.frequency.cmp(&a.frequency).then_with(|| a.span.cmp(&b.span)));
        EvidenceCluster {
            id,
            modality,
            representative_concept: representative,
            members,
            class_distribution,
            word_cloud,
        }
    }
}
