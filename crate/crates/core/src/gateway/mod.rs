//! Provider-agnostic access to chat-completion and embedding models.
//!
//! A [`Gateway`] combines an optional live [`Transport`] with an optional
//! [`Cassette`]. In replay mode the cassette is the only source of responses and
//! the transport is never touched. Live calls are retried on transport failures,
//! HTTP 429 and 5xx with exponential backoff and jitter.

mod batch;
mod cassette;
pub mod digest;
mod http;
mod types;

use std::sync::Arc;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use batch::{bounded_map, InFlightGauge, InFlightGuard};
pub use cassette::{write_atomic, Cassette, CassetteEntry, CassetteError, CassetteMode, RecordedResponse};
pub use http::HttpTransport;
pub use types::{
    ChatMessage, ChatRequest, ChatResponse, ContentPart, EmbedItem, EmbeddingRequest,
    ResponseFormat, Role,
};

use crate::vecmath;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportErrorKind {
    Network,
    Status(u16),
    Decode,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{kind:?}: {message}")]
pub struct TransportError {
    pub kind: TransportErrorKind,
    pub message: String,
}

impl TransportError {
    pub fn network(message: impl Into<String>) -> Self {
        TransportError {
            kind: TransportErrorKind::Network,
            message: message.into(),
        }
    }

    pub fn status(status: u16, message: impl Into<String>) -> Self {
        TransportError {
            kind: TransportErrorKind::Status(status),
            message: message.into(),
        }
    }

    pub fn decode(message: impl Into<String>) -> Self {
        TransportError {
            kind: TransportErrorKind::Decode,
            message: message.into(),
        }
    }

    pub fn is_retryable(&self) -> bool {
        match self.kind {
            TransportErrorKind::Network => true,
            TransportErrorKind::Status(s) => s == 429 || (500..600).contains(&s),
            TransportErrorKind::Decode => false,
        }
    }

    pub fn is_auth(&self) -> bool {
        matches!(self.kind, TransportErrorKind::Status(401) | TransportErrorKind::Status(403))
    }
}

/// A live provider connection.
pub trait Transport: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, TransportError>;
    fn embed(&self, request: &EmbeddingRequest) -> Result<Vec<Vec<f32>>, TransportError>;
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("provider rejected credentials: {0}")]
    Auth(String),
    #[error("no recorded response for request digest {digest}")]
    ReplayMiss { digest: String },
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("provider error {status}: {message}")]
    Provider { status: u16, message: String },
    #[error("cannot decode provider response: {0}")]
    Decode(String),
    #[error("embedding {index} has dimension {got}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("provider returned {got} embeddings for {expected} items")]
    CountMismatch { expected: usize, got: usize },
    #[error("no provider configured and no cassette in replay mode")]
    NotConfigured,
}

impl GatewayError {
    pub fn is_replay_miss(&self) -> bool {
        matches!(self, GatewayError::ReplayMiss { .. })
    }
}

/// Model names for the three roles the workbench uses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelRoles {
    pub reasoning: String,
    pub auxiliary: String,
    pub embedding: String,
}

impl Default for ModelRoles {
    fn default() -> Self {
        ModelRoles {
            reasoning: "reasoning-model".into(),
            auxiliary: "auxiliary-model".into(),
            embedding: "embedding-model".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base_delay_ms: 1000,
            jitter: 0.25,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (0-based): `base · 2^attempt · (1 ± jitter)`.
    pub fn delay(&self, attempt: u32, rng: &mut impl Rng) -> Duration {
        let base = self.base_delay_ms as f64 * 2f64.powi(attempt as i32);
        let factor = if self.jitter > 0.0 {
            1.0 + rng.random_range(-self.jitter..=self.jitter)
        } else {
            1.0
        };
        Duration::from_secs_f64((base * factor).max(0.0) / 1000.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub roles: ModelRoles,
    pub retry: RetryPolicy,
    pub parallelism: usize,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Frames per request; longer frame lists are uniformly subsampled.
    pub max_frames: usize,
    /// Items per embedding request.
    pub embedding_batch: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            roles: ModelRoles::default(),
            retry: RetryPolicy::default(),
            parallelism: 4,
            temperature: 0.0,
            max_tokens: 1024,
            max_frames: 8,
            embedding_batch: 128,
        }
    }
}

type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

#[derive(Clone)]
pub struct Gateway {
    transport: Option<Arc<dyn Transport>>,
    cassette: Option<Arc<Cassette>>,
    config: GatewayConfig,
    sleep: Sleeper,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("live", &self.transport.is_some())
            .field("cassette", &self.cassette.as_ref().map(|c| c.mode()))
            .field("config", &self.config)
            .finish()
    }
}

impl Gateway {
    pub fn new(config: GatewayConfig) -> Self {
        Gateway {
            transport: None,
            cassette: None,
            config,
            sleep: Arc::new(std::thread::sleep),
        }
    }

    pub fn with_transport(mut self, transport: Arc<dyn Transport>) -> Self {
        self.transport = Some(transport);
        self
    }

    pub fn with_cassette(mut self, cassette: Arc<Cassette>) -> Self {
        self.cassette = Some(cassette);
        self
    }

    /// Replaces the backoff sleep (tests use a no-op or a recorder).
    pub fn with_sleeper(mut self, sleep: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleep = Arc::new(sleep);
        self
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn roles(&self) -> &ModelRoles {
        &self.config.roles
    }

    pub fn cassette(&self) -> Option<&Arc<Cassette>> {
        self.cassette.as_ref()
    }

    pub fn is_replay(&self) -> bool {
        self.cassette
            .as_ref()
            .is_some_and(|c| c.mode() == CassetteMode::Replay)
    }

    /// Persists the cassette, if any.
    pub fn flush(&self) -> Result<(), CassetteError> {
        match &self.cassette {
            Some(c) => c.save(),
            None => Ok(()),
        }
    }

    /// A request for `role_model` with the configured temperature and token budget.
    pub fn chat_request(
        &self,
        model_id: &str,
        messages: Vec<ChatMessage>,
        response_format: ResponseFormat,
    ) -> ChatRequest {
        ChatRequest {
            model_id: model_id.to_string(),
            messages,
            temperature: self.config.temperature,
            max_tokens: self.config.max_tokens,
            response_format,
        }
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate().map_err(GatewayError::InvalidRequest)?;
        let digest = digest::chat_digest(request);
        let summary = format!("chat {} | {}", request.model_id, summarize(&request.all_text()));
        let response = self.dispatch(&digest, summary, |t| {
            t.chat(request).map(RecordedResponse::Chat)
        })?;
        match response {
            RecordedResponse::Chat(r) => Ok(r),
            other => Err(GatewayError::Decode(format!(
                "cassette entry {digest} is not a chat response: {other:?}"
            ))),
        }
    }

    /// Embeds the items and returns one unit vector per item, in input order.
    pub fn embed(&self, request: &EmbeddingRequest) -> Result<Vec<Vec<f32>>, GatewayError> {
        request.validate().map_err(GatewayError::InvalidRequest)?;
        let digest = digest::embedding_digest(request);
        let summary = format!(
            "embedding {} | {} items, first: {}",
            request.model_id,
            request.items.len(),
            match &request.items[0] {
                EmbedItem::Text { text } => summarize(text),
                EmbedItem::Image { path } => path.display().to_string(),
            }
        );
        let response = self.dispatch(&digest, summary, |t| {
            t.embed(request)
                .map(|vectors| RecordedResponse::Embedding { vectors })
        })?;
        let RecordedResponse::Embedding { vectors } = response else {
            return Err(GatewayError::Decode(format!(
                "cassette entry {digest} is not an embedding response"
            )));
        };
        normalize_batch(vectors, request.items.len())
    }

    /// Embeds texts with the embedding role, chunked by the configured batch size.
    pub fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, GatewayError> {
        let items: Vec<EmbedItem> = texts
            .iter()
            .map(|t| EmbedItem::Text { text: t.clone() })
            .collect();
        self.embed_items(items)
    }

    pub fn embed_images(&self, paths: &[std::path::PathBuf]) -> Result<Vec<Vec<f32>>, GatewayError> {
        let items: Vec<EmbedItem> = paths
            .iter()
            .map(|p| EmbedItem::Image { path: p.clone() })
            .collect();
        self.embed_items(items)
    }

    fn embed_items(&self, items: Vec<EmbedItem>) -> Result<Vec<Vec<f32>>, GatewayError> {
        let mut out = Vec::with_capacity(items.len());
        let mut dim = None;
        for chunk in items.chunks(self.config.embedding_batch.max(1)) {
            let vectors = self.embed(&EmbeddingRequest {
                model_id: self.config.roles.embedding.clone(),
                items: chunk.to_vec(),
            })?;
            for v in vectors {
                let expected = *dim.get_or_insert(v.len());
                if v.len() != expected {
                    return Err(GatewayError::DimensionMismatch {
                        index: out.len(),
                        expected,
                        got: v.len(),
                    });
                }
                out.push(v);
            }
        }
        Ok(out)
    }

    /// Runs every request with at most `parallelism` in flight; results keep input order.
    pub fn run_batch(
        &self,
        requests: &[ChatRequest],
        parallelism: usize,
    ) -> Vec<(usize, Result<ChatResponse, GatewayError>)> {
        bounded_map(requests, parallelism, |i, r| (i, self.complete(r)))
    }

    fn dispatch<F>(&self, digest: &str, summary: String, live: F) -> Result<RecordedResponse, GatewayError>
    where
        F: Fn(&dyn Transport) -> Result<RecordedResponse, TransportError>,
    {
        let mode = self.cassette.as_ref().map(|c| c.mode());
        if mode == Some(CassetteMode::Replay) {
            let cassette = self.cassette.as_ref().unwrap();
            let entry = cassette.lookup(digest).ok_or_else(|| GatewayError::ReplayMiss {
                digest: digest.to_string(),
            })?;
            return match entry.response {
                RecordedResponse::Error { status, message } => {
                    // A recorded failure is what the provider kept answering.
                    let err = TransportError::status(status, message);
                    Err(self.final_error(err, self.config.retry.max_retries + 1))
                }
                ok => Ok(ok),
            };
        }
        let transport = self.transport.as_deref().ok_or(GatewayError::NotConfigured)?;
        let mut rng = rand::rng();
        let mut attempt = 0u32;
        loop {
            match live(transport) {
                Ok(resp) => {
                    if mode == Some(CassetteMode::Record) {
                        self.cassette
                            .as_ref()
                            .unwrap()
                            .insert(digest.to_string(), summary, resp.clone());
                    }
                    return Ok(resp);
                }
                Err(err) if err.is_retryable() && attempt < self.config.retry.max_retries => {
                    log::warn!("provider call failed (attempt {}): {err}; retrying", attempt + 1);
                    (self.sleep)(self.config.retry.delay(attempt, &mut rng));
                    attempt += 1;
                }
                Err(err) => {
                    if let (Some(CassetteMode::Record), TransportErrorKind::Status(status)) =
                        (mode, &err.kind)
                    {
                        if !err.is_auth() {
                            self.cassette.as_ref().unwrap().insert(
                                digest.to_string(),
                                summary,
                                RecordedResponse::Error {
                                    status: *status,
                                    message: err.message.clone(),
                                },
                            );
                        }
                    }
                    return Err(self.final_error(err, attempt + 1));
                }
            }
        }
    }

    fn final_error(&self, err: TransportError, attempts: u32) -> GatewayError {
        if err.is_auth() {
            return GatewayError::Auth(err.message);
        }
        if err.is_retryable() {
            return GatewayError::RetriesExhausted {
                attempts,
                last: err.to_string(),
            };
        }
        match err.kind {
            TransportErrorKind::Status(status) => GatewayError::Provider {
                status,
                message: err.message,
            },
            _ => GatewayError::Decode(err.message),
        }
    }
}

fn normalize_batch(vectors: Vec<Vec<f32>>, expected: usize) -> Result<Vec<Vec<f32>>, GatewayError> {
    if vectors.len() != expected {
        return Err(GatewayError::CountMismatch {
            expected,
            got: vectors.len(),
        });
    }
    let dim = vectors.first().map(Vec::len).unwrap_or(0);
    vectors
        .into_iter()
        .enumerate()
        .map(|(index, v)| {
            if v.len() != dim {
                return Err(GatewayError::DimensionMismatch {
                    index,
                    expected: dim,
                    got: v.len(),
                });
            }
            vecmath::normalized(&v)
                .ok_or_else(|| GatewayError::Decode(format!("embedding {index} is a zero vector")))
        })
        .collect()
}

fn summarize(text: &str) -> String {
    let flat: String = text.split_whitespace().collect::<Vec<_>>().join(" ");
    match flat.char_indices().nth(120) {
        Some((i, _)) => format!("{}…", &flat[..i]),
        None => flat,
    }
}
