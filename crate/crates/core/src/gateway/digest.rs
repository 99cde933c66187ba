//! Stable request digests used as cassette keys.
//!
//! Requests are converted to a JSON value in which image references are replaced
//! by the SHA-256 of the file bytes (so digests do not depend on where a dataset
//! lives on disk), then written in canonical form: object keys sorted, no
//! insignificant whitespace.

use std::fmt::Write as _;
use std::path::Path;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::types::{ChatRequest, EmbeddingRequest};

pub fn chat_digest(request: &ChatRequest) -> String {
    let mut value = serde_json::to_value(request).expect("requests always serialize");
    hash_images(&mut value);
    digest_value("chat", &value)
}

pub fn embedding_digest(request: &EmbeddingRequest) -> String {
    let mut value = serde_json::to_value(request).expect("requests always serialize");
    hash_images(&mut value);
    digest_value("embedding", &value)
}

/// Digest of an arbitrary JSON value under a namespace.
pub fn digest_value(namespace: &str, value: &Value) -> String {
    let mut canonical = String::new();
    write_canonical(value, &mut canonical);
    let mut hasher = Sha256::new();
    hasher.update(namespace.as_bytes());
    hasher.update([0u8]);
    hasher.update(canonical.as_bytes());
    hex::encode(hasher.finalize())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn hash_images(value: &mut Value) {
    match value {
        Value::Object(map) => {
            let is_image = map.get("type").and_then(Value::as_str) == Some("image");
            if is_image {
                if let Some(Value::String(path)) = map.get("path") {
                    let replacement = image_fingerprint(Path::new(path));
                    map.remove("path");
                    map.insert("image".into(), replacement);
                    return;
                }
            }
            for v in map.values_mut() {
                hash_images(v);
            }
        }
        Value::Array(items) => items.iter_mut().for_each(hash_images),
        _ => {}
    }
}

fn image_fingerprint(path: &Path) -> Value {
    match std::fs::read(path) {
        Ok(bytes) => json!({ "sha256": sha256_hex(&bytes) }),
        Err(_) => json!({
            "unreadable": path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default()
        }),
    }
}

pub(crate) fn write_canonical(value: &Value, out: &mut String) {
    match value {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            let _ = write!(out, "{n}");
        }
        Value::String(s) => write_string(s, out),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_string(k, out);
                out.push(':');
                write_canonical(&map[k], out);
            }
            out.push('}');
        }
    }
}

fn write_string(s: &str, out: &mut String) {
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            '\u{08}' => out.push_str("\\b"),
            '\u{0c}' => out.push_str("\\f"),
            c if (c as u32) < 0x20 => {
                let _ = write!(out, "\\u{:04x}", c as u32);
            }
            c => out.push(c),
        }
    }
    out.push('"');
}
