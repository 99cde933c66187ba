//! Prompt composition, per-instance chain-of-thought inference in three modality
//! modes, and extraction of the evidence behind each answer.

pub mod assets;
mod parse;
mod prompt;
mod run;

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

pub use assets::{PromptAssets, ASSET_VERSION};
pub use parse::{evidence_array, extract_json_object, filter_evidence, normalize_label, parse_modality};
pub use prompt::{
    class_list, compose_prompt, subsample_frames, ComposeContext, ComposeError, FrozenPrinciple,
    KShotExample, PromptSpec, ResolvedPrompt,
};
pub use run::{run_split, RunRecord, RunSlot, SlotOutcome};

use crate::dataset::{ClassLabel, Instance};
use crate::gateway::{ChatMessage, ContentPart, Gateway, GatewayError, ResponseFormat};

/// Which modalities the model sees for one inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    LanguageOnly,
    VisionOnly,
    Multimodal,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::VisionOnly, Mode::LanguageOnly, Mode::Multimodal];

    pub fn uses_vision(self) -> bool {
        matches!(self, Mode::VisionOnly | Mode::Multimodal)
    }

    pub fn uses_language(self) -> bool {
        matches!(self, Mode::LanguageOnly | Mode::Multimodal)
    }

    pub fn admits(self, modality: Modality) -> bool {
        match modality {
            Modality::Visual => self.uses_vision(),
            Modality::Language => self.uses_language(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::LanguageOnly => "language_only",
            Mode::VisionOnly => "vision_only",
            Mode::Multimodal => "multimodal",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "language_only" | "language" => Ok(Mode::LanguageOnly),
            "vision_only" | "vision" | "visual" => Ok(Mode::VisionOnly),
            "multimodal" => Ok(Mode::Multimodal),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Language,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Language => "language",
        }
    }
}

/// A model's final answer: a class label, or `UNPARSEABLE`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Answer {
    Label(ClassLabel),
    Unparseable,
}

pub const UNPARSEABLE: &str = "UNPARSEABLE";

impl Answer {
    pub fn label(&self) -> Option<&ClassLabel> {
        match self {
            Answer::Label(l) => Some(l),
            Answer::Unparseable => None,
        }
    }

    pub fn is(&self, label: &ClassLabel) -> bool {
        self.label() == Some(label)
    }

    pub fn as_str(&self) -> &str {
        match self {
            Answer::Label(l) => l.as_str(),
            Answer::Unparseable => UNPARSEABLE,
        }
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Answer {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Answer {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(if s == UNPARSEABLE {
            Answer::Unparseable
        } else {
            Answer::Label(ClassLabel::new(s))
        })
    }
}

/// A quoted cue from one modality and the label the model says it implies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub modality: Modality,
    pub span: String,
    pub inferred_label: Option<ClassLabel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceSource {
    /// Emitted by the reasoning model inside its structured answer.
    InBand,
    /// Recovered from the rationale by the auxiliary model.
    Extracted,
    /// Nothing to extract from (empty rationale).
    Empty,
    /// The auxiliary model failed; the instance is left out of pattern mining.
    ExtractionFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningResult {
    pub instance_id: String,
    pub mode: Mode,
    pub answer: Answer,
    pub rationale: String,
    pub evidence: Vec<EvidenceItem>,
    pub evidence_source: EvidenceSource,
    #[serde(default)]
    pub dropped_evidence: usize,
    pub raw: String,
}

/// Model text split into answer, rationale and (if present) in-band evidence.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedOutput {
    pub answer: Answer,
    pub rationale: String,
    pub structured_evidence: Option<Vec<Value>>,
}

/// Never fails: text without a usable object yields `UNPARSEABLE` with the text as rationale.
pub fn parse_output(text: &str, classes: &[ClassLabel]) -> ParsedOutput {
    let Some(obj) = extract_json_object(text) else {
        return ParsedOutput {
            answer: Answer::Unparseable,
            rationale: text.trim().to_string(),
            structured_evidence: None,
        };
    };
    let answer = obj
        .get("answer")
        .and_then(|a| match a {
            Value::String(s) => Some(s.clone()),
            Value::Object(o) => o.get("label").and_then(Value::as_str).map(str::to_string),
            _ => None,
        })
        .and_then(|a| normalize_label(&a, classes))
        .map(Answer::Label)
        .unwrap_or(Answer::Unparseable);
    let rationale = match obj.get("rationale") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Array(steps)) => steps
            .iter()
            .map(|s| s.as_str().map(str::to_string).unwrap_or_else(|| s.to_string()))
            .collect::<Vec<_>>()
            .join(" "),
        _ => String::new(),
    };
    let structured_evidence = match obj.get("evidence") {
        Some(Value::Array(items)) => Some(items.clone()),
        _ => None,
    };
    ParsedOutput {
        answer,
        rationale,
        structured_evidence,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceExtraction {
    pub items: Vec<EvidenceItem>,
    pub dropped: usize,
    pub source: EvidenceSource,
}

/// Evidence for a rationale: in-band items pass through untouched; otherwise one
/// auxiliary call with the fixed extraction template.
pub fn extract_evidence(
    rationale: &str,
    structured: Option<&[Value]>,
    mode: Mode,
    classes: &[ClassLabel],
    gateway: &Gateway,
    assets: &PromptAssets,
) -> EvidenceExtraction {
    if let Some(raw) = structured {
        let (items, dropped) = filter_evidence(raw, mode, classes);
        return EvidenceExtraction {
            items,
            dropped,
            source: EvidenceSource::InBand,
        };
    }
    if rationale.trim().is_empty() {
        return EvidenceExtraction {
            items: Vec::new(),
            dropped: 0,
            source: EvidenceSource::Empty,
        };
    }
    let prompt = assets::fill(
        &assets.evidence_extraction,
        &[("classes", &class_list(classes)), ("rationale", rationale.trim())],
    );
    let request = gateway.chat_request(
        &gateway.roles().auxiliary,
        vec![ChatMessage::user(vec![ContentPart::text(prompt)])],
        ResponseFormat::StructuredObject,
    );
    let failed = EvidenceExtraction {
        items: Vec::new(),
        dropped: 0,
        source: EvidenceSource::ExtractionFailed,
    };
    match gateway.complete(&request) {
        Ok(resp) => match evidence_array(&resp.text) {
            Some(raw) => {
                let (items, dropped) = filter_evidence(&raw, mode, classes);
                if dropped > 0 {
                    log::warn!("dropped {dropped} malformed evidence items");
                }
                EvidenceExtraction {
                    items,
                    dropped,
                    source: EvidenceSource::Extracted,
                }
            }
            None => {
                log::warn!("auxiliary evidence extraction returned no evidence list");
                failed
            }
        },
        Err(e) => {
            log::warn!("auxiliary evidence extraction failed: {e}");
            failed
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InferError {
    #[error(transparent)]
    Compose(#[from] ComposeError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Runs one instance in one mode and parses the result.
pub fn infer(
    instance: &Instance,
    prompt: &ResolvedPrompt,
    mode: Mode,
    ctx: &ComposeContext<'_>,
    gateway: &Gateway,
) -> Result<ReasoningResult, InferError> {
    let request = compose_prompt(prompt, instance, mode, ctx)?;
    let response = gateway.complete(&request)?;
    let classes = ctx.dataset.classes();
    let parsed = parse_output(&response.text, classes);
    let evidence = extract_evidence(
        &parsed.rationale,
        parsed.structured_evidence.as_deref(),
        mode,
        classes,
        gateway,
        ctx.assets,
    );
    Ok(ReasoningResult {
        instance_id: instance.id.clone(),
        mode,
        answer: parsed.answer,
        rationale: parsed.rationale,
        evidence: evidence.items,
        evidence_source: evidence.source,
        dropped_evidence: evidence.dropped,
        raw: response.text,
    })
}
