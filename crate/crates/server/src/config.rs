//! Provider configuration shared by `serve` and the LLM-backed CLI commands.

use std::path::PathBuf;
use std::sync::Arc;

use clap::Args;
use promptlens_core::gateway::{Cassette, CassetteMode, Gateway, GatewayConfig, HttpTransport};

#[derive(Debug, Clone, Args)]
pub struct GatewayArgs {
    /// Base URL of the chat-completions / embeddings API. Without it only
    /// cassette replay can answer.
    #[arg(long, env = "PROMPTLENS_API_BASE", global = true)]
    pub api_base: Option<String>,
    #[arg(long, env = "PROMPTLENS_API_KEY", global = true, hide_env_values = true)]
    pub api_key: Option<String>,
    #[arg(long, env = "PROMPTLENS_REASONING_MODEL", default_value = "reasoning-model", global = true)]
    pub reasoning_model: String,
    #[arg(long, env = "PROMPTLENS_AUXILIARY_MODEL", default_value = "auxiliary-model", global = true)]
    pub auxiliary_model: String,
    #[arg(long, env = "PROMPTLENS_EMBEDDING_MODEL", default_value = "embedding-model", global = true)]
    pub embedding_model: String,
    /// Concurrent provider requests.
    #[arg(long, env = "PROMPTLENS_PARALLELISM", default_value_t = 4, global = true)]
    pub parallelism: usize,
    #[arg(long, env = "PROMPTLENS_MAX_RETRIES", default_value_t = 3, global = true)]
    pub max_retries: u32,
    /// Record/replay file for provider responses.
    #[arg(long, env = "PROMPTLENS_CASSETTE", global = true)]
    pub cassette: Option<PathBuf>,
    /// record | replay | passthrough
    #[arg(long, env = "PROMPTLENS_CASSETTE_MODE", default_value = "record", global = true)]
    pub cassette_mode: CassetteMode,
}

impl Default for GatewayArgs {
    fn default() -> Self {
        GatewayArgs {
            api_base: None,
            api_key: None,
            reasoning_model: "reasoning-model".into(),
            auxiliary_model: "auxiliary-model".into(),
            embedding_model: "embedding-model".into(),
            parallelism: 4,
            max_retries: 3,
            cassette: None,
            cassette_mode: CassetteMode::Record,
        }
    }
}

impl GatewayArgs {
    pub fn config(&self) -> Result<GatewayConfig, String> {
        if self.parallelism == 0 {
            return Err("parallelism must be at least 1".into());
        }
        let mut cfg = GatewayConfig::default();
        cfg.roles.reasoning = self.reasoning_model.clone();
        cfg.roles.auxiliary = self.auxiliary_model.clone();
        cfg.roles.embedding = self.embedding_model.clone();
        cfg.parallelism = self.parallelism;
        cfg.retry.max_retries = self.max_retries;
        Ok(cfg)
    }

    pub fn build(&self) -> Result<Gateway, String> {
        let mut gateway = Gateway::new(self.config()?);
        if let Some(base) = &self.api_base {
            let http = HttpTransport::new(base.clone(), self.api_key.clone()).map_err(|e| e.to_string())?;
            gateway = gateway.with_transport(Arc::new(http));
        }
        if let Some(path) = &self.cassette {
            let cassette = Cassette::open(path, self.cassette_mode).map_err(|e| e.to_string())?;
            log::info!("cassette {} ({:?}, {} entries)", path.display(), self.cassette_mode, cassette.len());
            gateway = gateway.with_cassette(Arc::new(cassette));
        } else if self.api_base.is_none() {
            log::warn!("no API base and no cassette configured: provider calls will fail");
        }
        Ok(gateway)
    }
}
