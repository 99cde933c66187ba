//! Demonstration-example recommendation: joint visual+language embeddings,
//! similarity ranking, label-diverse selection and drafted rationales.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassLabel, Dataset, Instance};
use crate::gateway::{ChatMessage, ContentPart, Gateway, GatewayError, ResponseFormat};
use crate::reasoning::{assets, class_list, extract_json_object, normalize_label, subsample_frames, KShotExample, PromptAssets};
use crate::vecmath::{dot, mean_direction, normalized};

/// Stand-in text embedded for clips without speech.
pub const SILENT_TRANSCRIPT: &str = "[no speech]";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceEmbedding {
    pub instance_id: String,
    pub visual: Vec<f32>,
    pub language: Vec<f32>,
    pub joint: Vec<f32>,
}

impl InstanceEmbedding {
    /// Averages the frame vectors, then concatenates with the language vector;
    /// every part is re-normalized.
    pub fn from_parts(instance_id: impl Into<String>, frames: &[Vec<f32>], language: &[f32]) -> Option<Self> {
        let visual = mean_direction(frames.iter().map(Vec::as_slice))?;
        let language = normalized(language)?;
        let concat: Vec<f32> = visual.iter().chain(&language).copied().collect();
        let joint = normalized(&concat)?;
        Some(InstanceEmbedding {
            instance_id: instance_id.into(),
            visual,
            language,
            joint,
        })
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KShotError {
    #[error("candidate pool is empty")]
    EmptyPool,
    #[error("no embedding for instance `{0}`")]
    MissingEmbedding(String),
    #[error("embedding for `{0}` is degenerate (zero vector)")]
    Degenerate(String),
    #[error("`{0}` is not in the demonstration split")]
    NotInDemonstration(String),
    #[error("a saved example needs an operator rationale or an accepted non-empty draft")]
    NothingToSave,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Embeds frames (capped at `max_frames` per instance) and transcripts for
/// every instance, batching through the gateway.
pub fn embed_instances(
    instances: &[&Instance],
    gateway: &Gateway,
    max_frames: usize,
) -> Result<Vec<InstanceEmbedding>, KShotError> {
    let batch = gateway.config().embedding_batch.max(1);
    let frames: Vec<Vec<std::path::PathBuf>> = instances
        .iter()
        .map(|i| subsample_frames(&i.frames, max_frames).into_iter().cloned().collect())
        .collect();
    let flat: Vec<std::path::PathBuf> = frames.iter().flatten().cloned().collect();
    let mut image_vecs = Vec::with_capacity(flat.len());
    for chunk in flat.chunks(batch) {
        image_vecs.extend(gateway.embed_images(chunk)?);
    }
    let texts: Vec<String> = instances
        .iter()
        .map(|i| {
            if i.transcript.trim().is_empty() {
                SILENT_TRANSCRIPT.to_string()
            } else {
                i.transcript.clone()
            }
        })
        .collect();
    let mut text_vecs = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(batch) {
        text_vecs.extend(gateway.embed_texts(chunk)?);
    }
    let mut offset = 0;
    let mut out = Vec::with_capacity(instances.len());
    for (i, inst) in instances.iter().enumerate() {
        let n = frames[i].len();
        let e = InstanceEmbedding::from_parts(&inst.id, &image_vecs[offset..offset + n], &text_vecs[i])
            .ok_or_else(|| KShotError::Degenerate(inst.id.clone()))?;
        offset += n;
        out.push(e);
    }
    Ok(out)
}

/// Who the examples are for: one instance or the centroid of a group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "ids", rename_all = "snake_case")]
pub enum Target {
    Instance(String),
    Group(Vec<String>),
}

impl Target {
    pub fn ids(&self) -> Vec<&str> {
        match self {
            Target::Instance(id) => vec![id.as_str()],
            Target::Group(ids) => ids.iter().map(String::as_str).collect(),
        }
    }
}

/// The target's joint vector: the instance's own, or the normalized mean of
/// the group's joints.
pub fn target_vector(target: &Target, embeddings: &BTreeMap<String, InstanceEmbedding>) -> Result<Vec<f32>, KShotError> {
    let joints = target
        .ids()
        .into_iter()
        .map(|id| {
            embeddings
                .get(id)
                .map(|e| e.joint.as_slice())
                .ok_or_else(|| KShotError::MissingEmbedding(id.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if joints.is_empty() {
        return Err(KShotError::MissingEmbedding("<empty group>".into()));
    }
    mean_direction(joints).ok_or_else(|| KShotError::Degenerate("<group centroid>".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub instance_id: String,
    pub similarity: f64,
    pub label: ClassLabel,
}

/// Pool members by descending cosine similarity to `target`, ties by id; at most
/// `k_pool` entries (`None` for all).
pub fn rank_candidates(
    target: &[f32],
    pool: &[(&InstanceEmbedding, &ClassLabel)],
    k_pool: Option<usize>,
) -> Result<Vec<RankedCandidate>, KShotError> {
    if pool.is_empty() {
        return Err(KShotError::EmptyPool);
    }
    let mut ranked: Vec<RankedCandidate> = pool
        .iter()
        .map(|(e, label)| RankedCandidate {
            instance_id: e.instance_id.clone(),
            similarity: dot(target, &e.joint).clamp(-1.0, 1.0),
            label: (*label).clone(),
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then_with(|| a.instance_id.cmp(&b.instance_id))
    });
    if let Some(k) = k_pool {
        ranked.truncate(k);
    }
    Ok(ranked)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiverseSelection {
    pub selected: Vec<RankedCandidate>,
    /// Classes absent from the selection; non-empty means a coverage warning.
    pub missing_classes: Vec<ClassLabel>,
}

/// Walks the ranking taking the best item of each unseen label until every
/// class is present (or the list ends), then fills the remaining slots by rank.
/// The result is re-sorted by similarity.
pub fn select_diverse(ranked: &[RankedCandidate], k: usize, classes: &[ClassLabel]) -> DiverseSelection {
    let wanted: BTreeSet<&ClassLabel> = classes.iter().collect();
    let mut taken = vec![false; ranked.len()];
    let mut covered: BTreeSet<&ClassLabel> = BTreeSet::new();
    let mut count = 0;
    for (i, c) in ranked.iter().enumerate() {
        if count == k || covered.len() == wanted.len() {
            break;
        }
        if wanted.contains(&c.label) && !covered.contains(&c.label) {
            covered.insert(&c.label);
            taken[i] = true;
            count += 1;
        }
    }
    for t in taken.iter_mut() {
        if count == k {
            break;
        }
        if !*t {
            *t = true;
            count += 1;
        }
    }
    // `ranked` is already in similarity order, so keeping positions re-sorts.
    let selected: Vec<RankedCandidate> = ranked
        .iter()
        .zip(&taken)
        .filter(|(_, t)| **t)
        .map(|(c, _)| c.clone())
        .collect();
    let present: BTreeSet<&ClassLabel> = selected.iter().map(|c| &c.label).collect();
    let missing_classes = classes.iter().filter(|c| !present.contains(c)).cloned().collect();
    DiverseSelection {
        selected,
        missing_classes,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub target: Target,
    /// The top `k_pool` of the ranking, for browsing.
    pub ranked: Vec<RankedCandidate>,
    pub selection: DiverseSelection,
}

/// Ranks the demonstration split against `target` and picks `k` diverse examples.
/// Only demonstration instances are ever considered.
pub fn recommend(
    target: Target,
    embeddings: &BTreeMap<String, InstanceEmbedding>,
    dataset: &Dataset,
    demonstration: &BTreeSet<String>,
    k_pool: usize,
    k: usize,
) -> Result<Recommendation, KShotError> {
    let t = target_vector(&target, embeddings)?;
    let mut pool = Vec::new();
    for id in demonstration {
        let e = embeddings.get(id).ok_or_else(|| KShotError::MissingEmbedding(id.clone()))?;
        let label = dataset.label_of(id).ok_or_else(|| KShotError::MissingEmbedding(id.clone()))?;
        pool.push((e, label));
    }
    let full = rank_candidates(&t, &pool, None)?;
    let selection = select_diverse(&full, k, dataset.classes());
    let ranked = full.into_iter().take(k_pool).collect();
    Ok(Recommendation {
        target,
        ranked,
        selection,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Draft {
    /// Empty when the auxiliary call failed.
    pub text: String,
    pub warning: Option<String>,
}

fn style_block(examples: &[String]) -> String {
    let examples: Vec<&String> = examples.iter().filter(|e| !e.trim().is_empty()).collect();
    if examples.is_empty() {
        return String::new();
    }
    let mut s = String::from("Match the style of these operator-approved rationales:\n");
    for e in examples {
        s.push_str("- ");
        s.push_str(e.trim());
        s.push('\n');
    }
    s
}

/// One auxiliary call conditioned on the ground-truth label, with the frames
/// attached. Never fails: a provider error yields an empty draft plus warning.
pub fn draft_rationale(
    instance: &Instance,
    classes: &[ClassLabel],
    style_examples: &[String],
    gateway: &Gateway,
    assets: &PromptAssets,
) -> Draft {
    let text = assets::fill(
        &assets.draft_rationale,
        &[
            ("classes", &class_list(classes)),
            ("label", instance.label.as_str()),
            ("style_examples", &style_block(style_examples)),
            ("transcript", &instance.transcript),
        ],
    );
    let mut parts = vec![ContentPart::text(text)];
    for f in subsample_frames(&instance.frames, gateway.config().max_frames) {
        parts.push(ContentPart::Image { path: f.clone() });
    }
    let request = gateway.chat_request(
        &gateway.roles().auxiliary,
        vec![ChatMessage::user(parts)],
        ResponseFormat::StructuredObject,
    );
    match gateway.complete(&request) {
        Err(e) => Draft {
            text: String::new(),
            warning: Some(format!("draft for `{}` unavailable: {e}", instance.id)),
        },
        Ok(resp) => {
            let Some(obj) = extract_json_object(&resp.text) else {
                return Draft {
                    text: resp.text.trim().to_string(),
                    warning: Some("draft was not a JSON object; kept verbatim".into()),
                };
            };
            let rationale = obj.get("rationale").and_then(|r| r.as_str()).unwrap_or("").trim().to_string();
            let answer = obj.get("answer").and_then(|a| a.as_str()).and_then(|a| normalize_label(a, classes));
            let warning = match &answer {
                Some(a) if *a == instance.label => None,
                Some(a) => Some(format!("draft answer `{a}` disagrees with label `{}`", instance.label)),
                None => Some("draft carries no usable answer".into()),
            };
            Draft {
                text: rationale,
                warning,
            }
        }
    }
}

/// A recommended example as the operator works on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KShotCandidate {
    pub example_id: String,
    pub similarity: f64,
    pub label: ClassLabel,
    pub draft_rationale: String,
    pub operator_rationale: Option<String>,
    pub saved: bool,
    pub edited_by: Option<String>,
    pub edited_at: Option<DateTime<Utc>>,
}

impl KShotCandidate {
    pub fn new(c: &RankedCandidate, draft: String) -> Self {
        KShotCandidate {
            example_id: c.instance_id.clone(),
            similarity: c.similarity,
            label: c.label.clone(),
            draft_rationale: draft,
            operator_rationale: None,
            saved: false,
            edited_by: None,
            edited_at: None,
        }
    }

    /// Marks the candidate saved, with an operator rationale or the accepted
    /// draft. Drafts are never saved implicitly.
    pub fn save(&mut self, operator_rationale: Option<String>, editor: Option<String>) -> Result<(), KShotError> {
        let operator_rationale = operator_rationale.filter(|r| !r.trim().is_empty());
        if operator_rationale.is_none() && self.draft_rationale.trim().is_empty() {
            return Err(KShotError::NothingToSave);
        }
        self.operator_rationale = operator_rationale;
        self.saved = true;
        self.edited_by = editor;
        self.edited_at = Some(Utc::now());
        Ok(())
    }

    pub fn rationale(&self) -> &str {
        self.operator_rationale.as_deref().unwrap_or(&self.draft_rationale)
    }

    pub fn to_example(&self) -> KShotExample {
        KShotExample {
            instance_id: self.example_id.clone(),
            rationale: self.rationale().to_string(),
            answer: self.label.clone(),
        }
    }
}
