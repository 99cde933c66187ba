//! A scripted provider and the three-step iteration session it drives:
//! zero-shot baseline, then an imported principle, then three k-shot examples.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use promptlens_core::dataset::{SplitName, SplitRatios};
use promptlens_core::gateway::{ChatRequest, ChatResponse, ContentPart, EmbedItem, Gateway, GatewayConfig};
use promptlens_core::kshot::Target;
use promptlens_core::principles::PrincipleLevel;
use promptlens_core::project::Project;
use promptlens_core::prompts::bundled_templates;
use promptlens_core::reasoning::{Mode, PromptSpec};
use promptlens_core::session::{self, KShotSave};
use promptlens_core::testing::{write_fixture, FnTransport};

pub const CLASSES: [&str; 3] = ["positive", "negative", "neutral"];

/// 100 clips (40/36/24 per class); a 2:1:1 split leaves 50 for validation.
pub fn write_dataset(dir: &Path) -> PathBuf {
    let mut records = Vec::new();
    for (class, n) in [("positive", 40), ("negative", 36), ("neutral", 24)] {
        for i in 0..n {
            let id = format!("{}{i:02}", &class[..3]);
            records.push((id.clone(), class, format!("[{id}] I talk about the movie I watched, clip {i}.")));
        }
    }
    let recs: Vec<(&str, &str, &str)> = records.iter().map(|(a, b, c)| (a.as_str(), *b, c.as_str())).collect();
    write_fixture(dir, "scripted-sentiment", &CLASSES, &recs, 2).expect("fixture written")
}

pub const RATIOS: SplitRatios = SplitRatios { validation: 2, demonstration: 1, test: 1 };
pub const SPLIT_SEED: u64 = 11;

/// Which validation clips the scripted model gets right at each stage.
pub const CORRECT_PER_STAGE: [usize; 3] = [35, 37, 41];

fn wrong(label: &str) -> &'static str {
    let i = CLASSES.iter().position(|c| *c == label).expect("known class");
    CLASSES[(i + 1) % CLASSES.len()]
}

fn bracketed_ids(text: &str) -> Vec<String> {
    text.match_indices("Transcript: \"[")
        .filter_map(|(i, m)| {
            let rest = &text[i + m.len()..];
            rest.find(']').map(|end| rest[..end].to_string())
        })
        .collect()
}

/// The instance a request is about: the last clip referenced, since
/// demonstrations precede the input.
fn subject(req: &ChatRequest) -> Option<String> {
    let mut last = None;
    for m in &req.messages {
        for part in &m.content {
            match part {
                ContentPart::Text { text } => {
                    if let Some(id) = bracketed_ids(text).pop() {
                        last = Some(id);
                    }
                }
                ContentPart::Image { path } => {
                    let stem = path.file_stem()?.to_str()?;
                    last = Some(stem.rsplit_once('_').map_or(stem, |(a, _)| a).to_string());
                }
            }
        }
    }
    last
}

fn embed_vector(key: &str) -> Vec<f32> {
    // FNV-1a then a small LCG stream: deterministic and well spread.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in key.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    (0..16)
        .map(|_| {
            h = h.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((h >> 33) as f32 / (1u64 << 31) as f32) - 0.5
        })
        .collect()
}

pub fn scripted_transport(truth: BTreeMap<String, String>, validation: Vec<String>) -> FnTransport {
    let correct: Vec<BTreeSet<String>> = CORRECT_PER_STAGE
        .iter()
        .map(|n| validation.iter().take(*n).cloned().collect())
        .collect();
    FnTransport::new(move |req| {
        let text = req.all_text();
        let id = subject(req);
        if text.contains("Condense them") {
            return Ok(ChatResponse::stop(
                r#"{"principles": ["Balance visual cues such as facial expressions against explicit verbal sentiment; when they disagree, weigh what is said.", "Judge the overall sentiment of the monologue rather than a single remark."]}"#,
            ));
        }
        if text.contains("Model rationale:") {
            let id = id.unwrap_or_default();
            return Ok(ChatResponse::stop(format!(
                r#"{{"error_cause": "the smile in {id} outweighed the words", "principle": "In clips like {id}, do not let a polite smile override negative words."}}"#
            )));
        }
        if text.contains("write a concise step-by-step rationale") {
            let id = id.unwrap_or_default();
            let label = truth.get(&id).cloned().unwrap_or_default();
            return Ok(ChatResponse::stop(format!(
                r#"{{"rationale": "The speaker's expression and words agree, so the clip reads as {label}.", "answer": "{label}"}}"#
            )));
        }
        let id = id.expect("reasoning request names its clip");
        let t = truth[&id].as_str();
        let stage = if text.contains("Example 1:") {
            2
        } else if text.contains("Principles:") {
            1
        } else {
            0
        };
        let has_images = req.image_count() > 0;
        let has_transcript = text.contains(&format!("Transcript: \"[{id}]"));
        let answer = match (has_images, has_transcript) {
            (true, true) if correct[stage].contains(&id) || !validation.contains(&id) => t,
            (true, true) => wrong(t),
            // Unimodal answers: vision follows the truth, language disagrees on every third clip.
            (true, false) => t,
            _ => {
                if id.bytes().map(|b| b as usize).sum::<usize>() % 3 == 0 {
                    wrong(t)
                } else {
                    t
                }
            }
        };
        // Evidence phrasing follows the true label, so mining finds one concept per class.
        let (look, words) = match t {
            "positive" => ("broad smile", "loved it"),
            "negative" => ("deep frown", "didn't like"),
            _ => ("blank stare", "it was fine"),
        };
        Ok(ChatResponse::stop(format!(
            r#"{{"answer": "{answer}", "rationale": "Looking at the clip step by step, it reads as {answer}.", "evidence": [{{"modality": "visual", "span": "{look}", "inferred_label": "{t}"}}, {{"modality": "language", "span": "{words}", "inferred_label": "{t}"}}]}}"#
        )))
    })
    .with_embed(move |req| {
        Ok(req
            .items
            .iter()
            .map(|item| match item {
                EmbedItem::Text { text } => embed_vector(text),
                EmbedItem::Image { path } => embed_vector(&path.file_name().unwrap().to_string_lossy()),
            })
            .collect())
    })
}

pub fn gateway_config() -> GatewayConfig {
    GatewayConfig { parallelism: 8, ..GatewayConfig::default() }
}

pub fn quiet(g: Gateway) -> Gateway {
    g.with_sleeper(|_| {})
}

pub struct SessionOutcome {
    pub project: Project,
    /// Accuracy per version from the timeline.
    pub trajectory: Vec<Option<f64>>,
    pub run_ids: Vec<String>,
}

/// Runs the whole iteration loop against `gateway` in a fresh project under `root`.
pub fn run_session(root: &Path, gateway: &Gateway) -> SessionOutcome {
    let manifest = write_dataset(&root.join("data"));
    let mut p = Project::create(root.join("project"), "scripted").unwrap();
    session::ingest(&mut p, &manifest).unwrap();
    session::split(&mut p, SPLIT_SEED, RATIOS).unwrap();
    let modes = Mode::ALL;
    let progress = |_: usize, _: usize| {};
    let progress: &(dyn Fn(usize, usize) + Sync) = &progress;

    let instruction = bundled_templates()[0].instruction.clone();
    let spec1 = PromptSpec::new(instruction);
    let v1 = session::save_version(&mut p, &spec1, None, None).unwrap().version_id;
    let (run1, report1) = session::run_version(&mut p, v1, SplitName::Validation, &modes, gateway, progress).unwrap();

    let errors1: Vec<String> = report1.outcomes.iter().filter(|o| !o.correct).map(|o| o.instance_id.clone()).collect();
    session::generate_principles(&mut p, &run1.run_id, &errors1, gateway).unwrap();
    let generalized = session::generalize_principles(&mut p, None, gateway).unwrap();
    let first = generalized.created.first().expect("at least one general principle").clone();
    assert_eq!(p.principles.get(&first).unwrap().level, PrincipleLevel::InstanceAgnostic);
    let (spec2, _) = promptlens_core::principles::import_into_prompt(&p.principles, &[first], &spec1).unwrap();
    let v2 = session::save_version(&mut p, &spec2, None, None).unwrap().version_id;
    let (run2, report2) = session::run_version(&mut p, v2, SplitName::Validation, &modes, gateway, progress).unwrap();

    let errors2: Vec<String> = report2.outcomes.iter().filter(|o| !o.correct).map(|o| o.instance_id.clone()).collect();
    let rec = session::recommend(&mut p, Target::Group(errors2), Some(3), gateway).unwrap();
    let saves: Vec<KShotSave> = rec
        .candidates
        .iter()
        .map(|c| KShotSave { example_id: c.example_id.clone(), rationale: None, editor: Some("operator".into()) })
        .collect();
    let saved = session::save_kshot(&mut p, &saves).unwrap();
    let mut spec3 = spec2.clone();
    spec3.kshot = saved.iter().map(|c| c.to_example()).collect();
    let v3 = session::save_version(&mut p, &spec3, None, None).unwrap().version_id;
    let (run3, _) = session::run_version(&mut p, v3, SplitName::Validation, &modes, gateway, progress).unwrap();

    let trajectory = p.versions.timeline().iter().map(|r| r.accuracy).collect();
    SessionOutcome { project: p, trajectory, run_ids: vec![run1.run_id, run2.run_id, run3.run_id] }
}

/// Truth labels and sorted validation ids for the scripted dataset, computed
/// the same way the session will (same manifest, same split seed).
pub fn script_inputs(root: &Path) -> (BTreeMap<String, String>, Vec<String>) {
    let manifest = write_dataset(&root.join("data"));
    let ds = promptlens_core::dataset::load_manifest(&manifest).unwrap();
    let split = promptlens_core::dataset::stratified_split(&ds, RATIOS, SPLIT_SEED).unwrap();
    let truth = ds.instances().iter().map(|i| (i.id.clone(), i.label.to_string())).collect();
    (truth, split.validation.iter().cloned().collect())
}
