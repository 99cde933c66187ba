//! Blocking transport for chat-completions-style HTTP providers.
//!
//! Requests go to `{base}/chat/completions` and `{base}/embeddings`. Images are
//! inlined as base64 data URLs.

use std::path::Path;
use std::time::Duration;

use base64::Engine as _;
use serde_json::{json, Value};

use super::types::{ChatRequest, ChatResponse, ContentPart, EmbedItem, EmbeddingRequest, ResponseFormat};
use super::{Transport, TransportError};

pub struct HttpTransport {
    base_url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Result<Self, TransportError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .map_err(|e| TransportError::network(e.to_string()))?;
        Ok(HttpTransport {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            client,
        })
    }

    fn post(&self, endpoint: &str, body: &Value) -> Result<Value, TransportError> {
        let mut req = self
            .client
            .post(format!("{}/{endpoint}", self.base_url))
            .json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| TransportError::network(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| TransportError::network(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(TransportError::status(status, truncate(&text, 500)));
        }
        serde_json::from_str(&text).map_err(|e| TransportError::decode(e.to_string()))
    }
}

impl Transport for HttpTransport {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, TransportError> {
        let body = chat_body(request)?;
        let value = self.post("chat/completions", &body)?;
        parse_chat_response(&value)
    }

    fn embed(&self, request: &EmbeddingRequest) -> Result<Vec<Vec<f32>>, TransportError> {
        let body = embedding_body(request)?;
        let value = self.post("embeddings", &body)?;
        parse_embedding_response(&value)
    }
}

pub(crate) fn chat_body(request: &ChatRequest) -> Result<Value, TransportError> {
    let mut messages = Vec::with_capacity(request.messages.len());
    for m in &request.messages {
        let mut parts = Vec::with_capacity(m.content.len());
        for p in &m.content {
            parts.push(match p {
                ContentPart::Text { text } => json!({ "type": "text", "text": text }),
                ContentPart::Image { path } => {
                    json!({ "type": "image_url", "image_url": { "url": data_url(path)? } })
                }
            });
        }
        messages.push(json!({ "role": m.role, "content": parts }));
    }
    let mut body = json!({
        "model": request.model_id,
        "messages": messages,
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
    });
    if request.response_format == ResponseFormat::StructuredObject {
        body["response_format"] = json!({ "type": "json_object" });
    }
    Ok(body)
}

pub(crate) fn embedding_body(request: &EmbeddingRequest) -> Result<Value, TransportError> {
    let input = request
        .items
        .iter()
        .map(|item| match item {
            EmbedItem::Text { text } => Ok(json!(text)),
            EmbedItem::Image { path } => Ok(json!({ "image": data_url(path)? })),
        })
        .collect::<Result<Vec<_>, TransportError>>()?;
    Ok(json!({ "model": request.model_id, "input": input }))
}

pub(crate) fn parse_chat_response(value: &Value) -> Result<ChatResponse, TransportError> {
    let choice = value
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| TransportError::decode("response has no choices"))?;
    let content = &choice["message"]["content"];
    let text = match content {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join(""),
        Value::Null => String::new(),
        _ => return Err(TransportError::decode("unexpected message content")),
    };
    let usage = &value["usage"];
    Ok(ChatResponse {
        text,
        finish_reason: choice["finish_reason"].as_str().unwrap_or("unknown").to_string(),
        prompt_tokens: usage["prompt_tokens"].as_u64().unwrap_or(0) as u32,
        completion_tokens: usage["completion_tokens"].as_u64().unwrap_or(0) as u32,
    })
}

pub(crate) fn parse_embedding_response(value: &Value) -> Result<Vec<Vec<f32>>, TransportError> {
    let data = value
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| TransportError::decode("response has no data array"))?;
    let mut rows: Vec<(usize, Vec<f32>)> = Vec::with_capacity(data.len());
    for (pos, row) in data.iter().enumerate() {
        let index = row["index"].as_u64().map(|i| i as usize).unwrap_or(pos);
        let vector = row["embedding"]
            .as_array()
            .ok_or_else(|| TransportError::decode("embedding row without vector"))?
            .iter()
            .map(|x| x.as_f64().map(|f| f as f32))
            .collect::<Option<Vec<f32>>>()
            .ok_or_else(|| TransportError::decode("non-numeric embedding component"))?;
        rows.push((index, vector));
    }
    rows.sort_by_key(|(i, _)| *i);
    Ok(rows.into_iter().map(|(_, v)| v).collect())
}

fn data_url(path: &Path) -> Result<String, TransportError> {
    let bytes = std::fs::read(path)
        .map_err(|e| TransportError::decode(format!("cannot read image {}: {e}", path.display())))?;
    let mime = match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("jpg") | Some("jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        Some("gif") => "image/gif",
        _ => "image/png",
    };
    Ok(format!(
        "data:{mime};base64,{}",
        base64::engine::general_purpose::STANDARD.encode(bytes)
    ))
}

fn truncate(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((i, _)) => format!("{}…", &s[..i]),
        None => s.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::types::ChatMessage;

    #[test]
    fn chat_body_inlines_images() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("f.jpg");
        std::fs::write(&img, [1u8, 2, 3]).unwrap();
        let req = ChatRequest {
            model_id: "m".into(),
            messages: vec![ChatMessage::user(vec![
                ContentPart::text("look"),
                ContentPart::image(&img),
            ])],
            temperature: 0.0,
            max_tokens: 10,
            response_format: ResponseFormat::StructuredObject,
        };
        let body = chat_body(&req).unwrap();
        assert_eq!(body["messages"][0]["role"], "user");
        assert_eq!(body["messages"][0]["content"][1]["image_url"]["url"], "data:image/jpeg;base64,AQID");
        assert_eq!(body["response_format"]["type"], "json_object");
    }

    #[test]
    fn parses_provider_payloads() {
        let chat = json!({
            "choices": [{ "message": { "content": "hello" }, "finish_reason": "stop" }],
            "usage": { "prompt_tokens": 5, "completion_tokens": 1 }
        });
        let r = parse_chat_response(&chat).unwrap();
        assert_eq!((r.text.as_str(), r.prompt_tokens), ("hello", 5));
        let emb = json!({ "data": [
            { "index": 1, "embedding": [0.0, 1.0] },
            { "index": 0, "embedding": [3.0, 4.0] }
        ]});
        assert_eq!(parse_embedding_response(&emb).unwrap(), vec![vec![3.0, 4.0], vec![0.0, 1.0]]);
    }
}
