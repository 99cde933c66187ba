//! Helpers for exercising the engine offline: closure-backed transports and
//! on-disk fixture datasets.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

use crate::dataset::{ClassLabel, Dataset, Instance};
use crate::gateway::{ChatRequest, ChatResponse, EmbeddingRequest, Transport, TransportError};
use crate::reasoning::{
    Answer, EvidenceItem, EvidenceSource, FrozenPrinciple, KShotExample, Modality, Mode, ReasoningResult,
    ResolvedPrompt, RunRecord, RunSlot, SlotOutcome,
};

type ChatFn = dyn Fn(&ChatRequest) -> Result<ChatResponse, TransportError> + Send + Sync;
type EmbedFn = dyn Fn(&EmbeddingRequest) -> Result<Vec<Vec<f32>>, TransportError> + Send + Sync;

/// A [`Transport`] whose answers come from closures; counts every call.
pub struct FnTransport {
    chat: Box<ChatFn>,
    embed: Box<EmbedFn>,
    chat_calls: AtomicUsize,
    embed_calls: AtomicUsize,
}

impl FnTransport {
    pub fn new(
        chat: impl Fn(&ChatRequest) -> Result<ChatResponse, TransportError> + Send + Sync + 'static,
    ) -> Self {
        FnTransport {
            chat: Box::new(chat),
            embed: Box::new(|_| Err(TransportError::status(501, "embeddings not scripted"))),
            chat_calls: AtomicUsize::new(0),
            embed_calls: AtomicUsize::new(0),
        }
    }

    /// A transport that fails every call; used to prove replay never goes live.
    pub fn unreachable() -> Self {
        Self::new(|_| Err(TransportError::network("no network in this test")))
            .with_embed(|_| Err(TransportError::network("no network in this test")))
    }

    pub fn with_embed(
        mut self,
        embed: impl Fn(&EmbeddingRequest) -> Result<Vec<Vec<f32>>, TransportError> + Send + Sync + 'static,
    ) -> Self {
        self.embed = Box::new(embed);
        self
    }

    pub fn chat_calls(&self) -> usize {
        self.chat_calls.load(Ordering::SeqCst)
    }

    pub fn embed_calls(&self) -> usize {
        self.embed_calls.load(Ordering::SeqCst)
    }

    pub fn total_calls(&self) -> usize {
        self.chat_calls() + self.embed_calls()
    }
}

impl Transport for FnTransport {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, TransportError> {
        self.chat_calls.fetch_add(1, Ordering::SeqCst);
        (self.chat)(request)
    }

    fn embed(&self, request: &EmbeddingRequest) -> Result<Vec<Vec<f32>>, TransportError> {
        self.embed_calls.fetch_add(1, Ordering::SeqCst);
        (self.embed)(request)
    }
}

/// One fixture record: id, label, transcript.
pub type FixtureRecord<'a> = (&'a str, &'a str, &'a str);

/// Writes a manifest plus `frames_per_instance` small frame files per record
/// under `dir`, and returns the manifest path.
pub fn write_fixture(
    dir: &Path,
    name: &str,
    classes: &[&str],
    records: &[FixtureRecord<'_>],
    frames_per_instance: usize,
) -> std::io::Result<PathBuf> {
    let frames_dir = dir.join("frames");
    std::fs::create_dir_all(&frames_dir)?;
    let mut instances = Vec::with_capacity(records.len());
    for (id, label, transcript) in records {
        let mut frames = Vec::new();
        for f in 0..frames_per_instance.max(1) {
            let rel = format!("frames/{id}_{f}.png");
            std::fs::write(dir.join(&rel), format!("frame {f} of {id} ({label})"))?;
            frames.push(rel);
        }
        instances.push(serde_json::json!({
            "id": id,
            "frames": frames,
            "transcript": transcript,
            "label": label,
        }));
    }
    let manifest = serde_json::json!({
        "name": name,
        "classes": classes,
        "instances": instances,
    });
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap())?;
    Ok(path)
}

/// Builds an in-memory dataset whose frames live in `dir` (written to disk).
pub fn fixture_dataset(
    dir: &Path,
    classes: &[&str],
    records: &[FixtureRecord<'_>],
) -> Dataset {
    let path = write_fixture(dir, "fixture", classes, records, 2).expect("fixture written");
    crate::dataset::load_manifest(path).expect("fixture manifest loads")
}

/// An instance with placeholder frames, for pure-logic tests.
pub fn bare_instance(id: &str, label: &str, transcript: &str) -> Instance {
    Instance {
        id: id.to_string(),
        frames: vec![PathBuf::from(format!("{id}.png"))],
        transcript: transcript.to_string(),
        label: ClassLabel::new(label),
        source_video: None,
        duration_s: None,
    }
}

/// A successful slot; `answer` of `"?"` means unparseable.
pub fn result_slot(id: &str, mode: Mode, answer: &str, evidence: Vec<EvidenceItem>) -> RunSlot {
    let answer = if answer == "?" {
        Answer::Unparseable
    } else {
        Answer::Label(ClassLabel::new(answer))
    };
    RunSlot {
        instance_id: id.to_string(),
        mode,
        outcome: SlotOutcome::Ok {
            result: ReasoningResult {
                instance_id: id.to_string(),
                mode,
                answer,
                rationale: String::new(),
                evidence_source: if evidence.is_empty() {
                    EvidenceSource::Empty
                } else {
                    EvidenceSource::InBand
                },
                evidence,
                dropped_evidence: 0,
                raw: String::new(),
            },
        },
        elapsed_ms: 0,
    }
}

pub fn evidence(modality: Modality, span: &str, label: Option<&str>) -> EvidenceItem {
    EvidenceItem {
        modality,
        span: span.to_string(),
        inferred_label: label.map(ClassLabel::new),
    }
}

/// A finished run over `slots`; instance order follows first appearance.
pub fn run_record(run_id: &str, modes: &[Mode], slots: Vec<RunSlot>) -> RunRecord {
    let mut instance_ids: Vec<String> = Vec::new();
    for s in &slots {
        if !instance_ids.contains(&s.instance_id) {
            instance_ids.push(s.instance_id.clone());
        }
    }
    let mut modes = modes.to_vec();
    modes.sort();
    RunRecord {
        run_id: run_id.to_string(),
        version_id: None,
        split: None,
        modes,
        instance_ids,
        slots,
        started_at: chrono::DateTime::<chrono::Utc>::UNIX_EPOCH,
        finished_at: chrono::DateTime::<chrono::Utc>::UNIX_EPOCH,
    }
}

/// Three tight blobs of `per_blob` unit vectors plus `outliers` scattered
/// points; returns the points and their generating label (`None` for outliers).
///
/// Blob centres share a common axis, so blobs sit ~0.34 apart in cosine
/// distance while members scatter with standard deviation `spread` per axis. Each outlier owns a private
/// axis tilted toward the blob mass: it is ~0.41 from the blobs and ~0.6 from
/// every other outlier, so it can never gather a dense group of its own.
/// (Uniform points on a high-dimensional sphere are nearly equidistant and
/// would form a legitimate cluster among themselves.)
pub fn blob_fixture(seed: u64, per_blob: usize, outliers: usize, spread: f32) -> (Vec<Vec<f32>>, Vec<Option<usize>>) {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let dim = 4 + outliers;
    let shared = 3;
    let centre = |k: usize| -> Vec<f32> {
        (0..dim).map(|d| if d == k { 1.0 } else if d == shared { 1.4 } else { 0.0 }).collect()
    };
    let mass = crate::vecmath::mean_direction((0..3).map(|k| crate::vecmath::normalized(&centre(k)).unwrap()).collect::<Vec<_>>().iter().map(Vec::as_slice))
        .expect("non-zero");
    // Isotropic Gaussian noise (Box-Muller) with standard deviation `amount`.
    let mut jitter = |v: Vec<f32>, amount: f32| -> Vec<f32> {
        let v: Vec<f32> = v
            .iter()
            .map(|x| {
                let (u1, u2): (f32, f32) = (rng.random_range(f32::EPSILON..1.0), rng.random());
                x + amount * (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos()
            })
            .collect();
        crate::vecmath::normalized(&v).expect("non-zero")
    };
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for blob in 0..3 {
        let c = crate::vecmath::normalized(&centre(blob)).unwrap();
        for _ in 0..per_blob {
            points.push(jitter(c.clone(), spread));
            labels.push(Some(blob));
        }
    }
    for k in 0..outliers {
        let v: Vec<f32> = (0..dim).map(|d| 0.8 * mass[d] + if d == 4 + k { 1.0 } else { 0.0 }).collect();
        points.push(jitter(v, 0.02));
        labels.push(None);
    }
    (points, labels)
}

const WORDS: &[&str] = &[
    "analyze", "the", "speaker", "sentiment", "visual", "cues", "verbal", "tone", "carefully", "answer", "smile", "frown",
];
const GAPS: &[&str] = &[" ", " ", " ", "  ", "\n", "\n\n", "\t"];

fn random_text(rng: &mut impl Rng, max_words: usize) -> String {
    let n = rng.random_range(0..=max_words);
    let mut out = String::new();
    if rng.random_bool(0.1) {
        out.push_str(GAPS[rng.random_range(0..GAPS.len())]);
    }
    for i in 0..n {
        if i > 0 {
            out.push_str(GAPS[rng.random_range(0..GAPS.len())]);
        }
        out.push_str(WORDS[rng.random_range(0..WORDS.len())]);
    }
    if rng.random_bool(0.1) {
        out.push('\n');
    }
    out
}

/// A random snapshot drawing ids from small pools so lists overlap.
pub fn random_prompt(rng: &mut impl Rng) -> ResolvedPrompt {
    let mut p = ResolvedPrompt::zero_shot(random_text(rng, 12));
    for _ in 0..rng.random_range(0..5) {
        random_edit(rng, &mut p, 2);
        random_edit(rng, &mut p, 3);
    }
    p
}

/// Applies one random edit: section chosen by `kind` (0 instruction,
/// 1 principles, 2 k-shot, 3 frames toggle), anything else picks at random.
pub fn random_edit(rng: &mut impl Rng, p: &mut ResolvedPrompt, kind: u8) {
    let kind = if kind > 3 { rng.random_range(0..4) } else { kind };
    match kind {
        0 => {
            let mut words: Vec<String> = p.instruction.split(' ').map(str::to_string).collect();
            let at = rng.random_range(0..=words.len());
            match rng.random_range(0..4) {
                0 => words.insert(at, WORDS[rng.random_range(0..WORDS.len())].to_string()),
                1 if !words.is_empty() => {
                    words.remove(at.min(words.len() - 1));
                }
                2 if !words.is_empty() => {
                    let i = at.min(words.len() - 1);
                    words[i] = random_text(rng, 2);
                }
                _ => words.insert(at, random_text(rng, 3)),
            }
            p.instruction = words.join(" ");
        }
        1 => {
            let id = format!("p{}", rng.random_range(1..8));
            let text = random_text(rng, 5);
            edit_list(rng, &mut p.principles, |x| &x.id, FrozenPrinciple { id, text }, |x, t| x.text = t);
        }
        2 => {
            let ex = KShotExample {
                instance_id: format!("d{}", rng.random_range(1..8)),
                rationale: random_text(rng, 6),
                answer: ["positive", "negative", "neutral"][rng.random_range(0..3)].into(),
            };
            edit_list(rng, &mut p.kshot, |x| &x.instance_id, ex, |x, t| x.rationale = t);
        }
        _ => p.kshot_frames = !p.kshot_frames,
    }
}

fn edit_list<T: Clone>(
    rng: &mut impl Rng,
    list: &mut Vec<T>,
    id: impl Fn(&T) -> &String,
    fresh: T,
    retext: impl Fn(&mut T, String),
) {
    match rng.random_range(0..4) {
        0 if !list.is_empty() => {
            let i = rng.random_range(0..list.len());
            list.remove(i);
        }
        1 if list.len() > 1 => {
            let i = rng.random_range(0..list.len());
            let item = list.remove(i);
            let j = rng.random_range(0..=list.len());
            list.insert(j, item);
        }
        2 if !list.is_empty() => {
            let i = rng.random_range(0..list.len());
            retext(&mut list[i], random_text(rng, 4));
        }
        _ => {
            if !list.iter().any(|x| id(x) == id(&fresh)) {
                let j = rng.random_range(0..=list.len());
                list.insert(j, fresh);
            }
        }
    }
}
