//! Tolerant parsing of model output into answers and evidence.

use serde_json::Value;

use super::{EvidenceItem, Modality, Mode};
use crate::dataset::ClassLabel;

/// First JSON object found in `text`: the whole text, a fenced block, or the
/// first `{` from which a complete object parses.
pub fn extract_json_object(text: &str) -> Option<serde_json::Map<String, Value>> {
    let trimmed = text.trim();
    if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(trimmed) {
        return Some(map);
    }
    for (i, _) in text.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(map))) = stream.next() {
            return Some(map);
        }
    }
    None
}

/// Maps a free-form answer onto the class set: case-insensitive exact match first,
/// then a class name uniquely contained in the answer, then an answer uniquely
/// contained in a class name.
pub fn normalize_label(raw: &str, classes: &[ClassLabel]) -> Option<ClassLabel> {
    let cleaned = raw
        .trim()
        .trim_matches(|c: char| c == '"' || c == '\'' || c == '.' || c == '`')
        .trim()
        .to_lowercase();
    if cleaned.is_empty() {
        return None;
    }
    if let Some(c) = classes.iter().find(|c| c.as_str().to_lowercase() == cleaned) {
        return Some(c.clone());
    }
    let contained: Vec<&ClassLabel> = classes
        .iter()
        .filter(|c| cleaned.contains(&c.as_str().to_lowercase()))
        .collect();
    if contained.len() == 1 {
        return Some(contained[0].clone());
    }
    if contained.is_empty() && cleaned.chars().count() >= 3 {
        let containing: Vec<&ClassLabel> = classes
            .iter()
            .filter(|c| c.as_str().to_lowercase().contains(&cleaned))
            .collect();
        if containing.len() == 1 {
            return Some(containing[0].clone());
        }
    }
    None
}

pub fn parse_modality(raw: &str) -> Option<Modality> {
    match raw.trim().to_lowercase().as_str() {
        "visual" | "vision" | "image" | "video" | "frames" => Some(Modality::Visual),
        "language" | "text" | "transcript" | "verbal" | "speech" => Some(Modality::Language),
        _ => None,
    }
}

/// Validates raw evidence objects. Returns the kept items and the number dropped
/// (empty span, unknown modality, or a modality the run mode could not have seen).
pub fn filter_evidence(raw: &[Value], mode: Mode, classes: &[ClassLabel]) -> (Vec<EvidenceItem>, usize) {
    let mut kept = Vec::new();
    let mut dropped = 0;
    for item in raw {
        let parsed = (|| {
            let obj = item.as_object()?;
            let modality = parse_modality(obj.get("modality")?.as_str()?)?;
            if !mode.admits(modality) {
                return None;
            }
            let span = obj.get("span")?.as_str()?.trim().to_string();
            if span.is_empty() {
                return None;
            }
            let inferred_label = obj
                .get("inferred_label")
                .and_then(Value::as_str)
                .and_then(|l| normalize_label(l, classes));
            Some(EvidenceItem {
                modality,
                span,
                inferred_label,
            })
        })();
        match parsed {
            Some(e) => kept.push(e),
            None => dropped += 1,
        }
    }
    (kept, dropped)
}

/// Evidence list out of an auxiliary-model reply: `{"evidence": [...]}` or a bare array.
pub fn evidence_array(text: &str) -> Option<Vec<Value>> {
    if let Some(map) = extract_json_object(text) {
        if let Some(Value::Array(items)) = map.get("evidence") {
            return Some(items.clone());
        }
    }
    let start = text.find('[')?;
    let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<Value>();
    match stream.next() {
        Some(Ok(Value::Array(items))) => Some(items),
        _ => None,
    }
}
