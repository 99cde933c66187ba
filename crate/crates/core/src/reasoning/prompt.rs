//! Structured prompts and their rendering into chat requests.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::assets::{fill, PromptAssets};
use super::Mode;
use crate::dataset::{ClassLabel, Dataset, Instance};
use crate::gateway::{ChatMessage, ChatRequest, ContentPart, ResponseFormat};

/// A demonstration: an instance from the demonstration split with its worked rationale.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KShotExample {
    pub instance_id: String,
    pub rationale: String,
    pub answer: ClassLabel,
}

/// The editable prompt: instruction, principles by id, k-shot examples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub instruction: String,
    #[serde(default)]
    pub principles: Vec<String>,
    #[serde(default)]
    pub kshot: Vec<KShotExample>,
    /// Attach demonstration frames in multimodal mode.
    #[serde(default = "default_true")]
    pub kshot_frames: bool,
}

fn default_true() -> bool {
    true
}

impl PromptSpec {
    pub fn new(instruction: impl Into<String>) -> Self {
        PromptSpec {
            instruction: instruction.into(),
            principles: Vec::new(),
            kshot: Vec::new(),
            kshot_frames: true,
        }
    }

    /// Freezes principle texts. Fails with the first unknown principle id.
    pub fn resolve<F>(&self, principle_text: F) -> Result<ResolvedPrompt, String>
    where
        F: Fn(&str) -> Option<String>,
    {
        let principles = self
            .principles
            .iter()
            .map(|id| {
                principle_text(id)
                    .map(|text| FrozenPrinciple {
                        id: id.clone(),
                        text,
                    })
                    .ok_or_else(|| id.clone())
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ResolvedPrompt {
            instruction: self.instruction.clone(),
            principles,
            kshot: self.kshot.clone(),
            kshot_frames: self.kshot_frames,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenPrinciple {
    pub id: String,
    pub text: String,
}

/// A self-contained prompt: principle texts are frozen, so it renders the same
/// regardless of later edits to the principle store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedPrompt {
    pub instruction: String,
    pub principles: Vec<FrozenPrinciple>,
    pub kshot: Vec<KShotExample>,
    #[serde(default = "default_true")]
    pub kshot_frames: bool,
}

impl ResolvedPrompt {
    pub fn zero_shot(instruction: impl Into<String>) -> Self {
        ResolvedPrompt {
            instruction: instruction.into(),
            principles: Vec::new(),
            kshot: Vec::new(),
            kshot_frames: true,
        }
    }

    pub fn spec(&self) -> PromptSpec {
        PromptSpec {
            instruction: self.instruction.clone(),
            principles: self.principles.iter().map(|p| p.id.clone()).collect(),
            kshot: self.kshot.clone(),
            kshot_frames: self.kshot_frames,
        }
    }

    /// Header and body of the instruction section (instruction plus numbered principles).
    pub fn instruction_block(&self) -> String {
        let mut out = self.instruction.trim_end().to_string();
        if !self.principles.is_empty() {
            out.push_str("\n\nPrinciples:");
            for (i, p) in self.principles.iter().enumerate() {
                let _ = write!(out, "\n{}. {}", i + 1, p.text.trim());
            }
        }
        out
    }

    /// Plain-text export of the prompt.
    pub fn render_text(&self) -> String {
        let mut out = self.instruction_block();
        for (i, ex) in self.kshot.iter().enumerate() {
            let _ = write!(
                out,
                "\n\nExample {}: [{}]\nRationale: {}\nAnswer: {}",
                i + 1,
                ex.instance_id,
                ex.rationale.trim(),
                ex.answer
            );
        }
        out.push('\n');
        out
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ComposeError {
    #[error("instance `{instance}`: frame {path} is not readable")]
    UnresolvableFrame { instance: String, path: PathBuf },
    #[error("k-shot example `{0}` is not in the demonstration split")]
    KShotNotInDemonstration(String),
    #[error("unknown instance `{0}`")]
    UnknownInstance(String),
}

/// Everything besides the prompt and the test instance that rendering needs.
#[derive(Debug, Clone, Copy)]
pub struct ComposeContext<'a> {
    pub dataset: &'a Dataset,
    /// When present, every k-shot id must belong to it.
    pub demonstration: Option<&'a BTreeSet<String>>,
    pub assets: &'a PromptAssets,
    pub model_id: &'a str,
    pub temperature: f64,
    pub max_tokens: u32,
    pub max_frames: usize,
}

/// Renders `(instruction + principles, k-shot blocks, test input, format directive)`
/// into a single user message. Language-only requests carry no images;
/// vision-only requests carry no transcripts.
pub fn compose_prompt(
    prompt: &ResolvedPrompt,
    instance: &Instance,
    mode: Mode,
    ctx: &ComposeContext<'_>,
) -> Result<ChatRequest, ComposeError> {
    let mut parts = vec![ContentPart::text(prompt.instruction_block())];

    for (i, ex) in prompt.kshot.iter().enumerate() {
        if let Some(demo) = ctx.demonstration {
            if !demo.contains(&ex.instance_id) {
                return Err(ComposeError::KShotNotInDemonstration(ex.instance_id.clone()));
            }
        }
        let example = ctx
            .dataset
            .get(&ex.instance_id)
            .ok_or_else(|| ComposeError::UnknownInstance(ex.instance_id.clone()))?;
        parts.push(ContentPart::text(format!("Example {}:", i + 1)));
        let with_frames = mode.uses_vision() && (mode != Mode::Multimodal || prompt.kshot_frames);
        push_input(&mut parts, example, mode, with_frames, ctx)?;
        parts.push(ContentPart::text(format!(
            "Rationale: {}\nAnswer: {}",
            ex.rationale.trim(),
            ex.answer
        )));
    }

    parts.push(ContentPart::text("Input:"));
    push_input(&mut parts, instance, mode, mode.uses_vision(), ctx)?;

    let classes = class_list(ctx.dataset.classes());
    parts.push(ContentPart::text(fill(
        &ctx.assets.format_directive,
        &[("classes", &classes)],
    )));

    Ok(ChatRequest {
        model_id: ctx.model_id.to_string(),
        messages: vec![ChatMessage::user(merge_text(parts))],
        temperature: ctx.temperature,
        max_tokens: ctx.max_tokens,
        response_format: ResponseFormat::StructuredObject,
    })
}

fn push_input(
    parts: &mut Vec<ContentPart>,
    instance: &Instance,
    mode: Mode,
    with_frames: bool,
    ctx: &ComposeContext<'_>,
) -> Result<(), ComposeError> {
    if with_frames {
        parts.push(ContentPart::text("Frames:"));
        for path in subsample_frames(&instance.frames, ctx.max_frames) {
            if std::fs::metadata(path).is_err() {
                return Err(ComposeError::UnresolvableFrame {
                    instance: instance.id.clone(),
                    path: path.clone(),
                });
            }
            parts.push(ContentPart::image(path.clone()));
        }
    }
    if mode.uses_language() {
        parts.push(ContentPart::text(format!("Transcript: \"{}\"", instance.transcript)));
    }
    Ok(())
}

/// Adjacent text parts are joined with a blank line so that the request is a
/// simple alternation of text blocks and images.
fn merge_text(parts: Vec<ContentPart>) -> Vec<ContentPart> {
    let mut out: Vec<ContentPart> = Vec::with_capacity(parts.len());
    for part in parts {
        match (out.last_mut(), part) {
            (Some(ContentPart::Text { text: prev }), ContentPart::Text { text }) => {
                prev.push_str("\n\n");
                prev.push_str(&text);
            }
            (_, part) => out.push(part),
        }
    }
    out
}

/// At most `cap` frames, picked uniformly across the sequence.
pub fn subsample_frames(frames: &[PathBuf], cap: usize) -> Vec<&PathBuf> {
    let cap = cap.max(1);
    if frames.len() <= cap {
        return frames.iter().collect();
    }
    (0..cap).map(|i| &frames[i * frames.len() / cap]).collect()
}

pub fn class_list(classes: &[ClassLabel]) -> String {
    classes
        .iter()
        .map(|c| format!("\"{c}\""))
        .collect::<Vec<_>>()
        .join(", ")
}
