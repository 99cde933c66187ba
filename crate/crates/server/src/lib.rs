//! HTTP API, background jobs and CLI over `promptlens-core` projects.

pub mod api;
pub mod cli;
pub mod config;
pub mod jobs;
pub mod state;

use std::net::SocketAddr;
use std::path::PathBuf;

use promptlens_core::gateway::Gateway;
use promptlens_core::project::Project;

/// Blocks serving the API until interrupted.
pub fn serve(addr: SocketAddr, project: Option<Project>, gateway: Gateway, projects_root: Option<PathBuf>) -> Result<(), String> {
    let state = state::AppState::new(project, gateway, projects_root);
    let app = api::router(state);
    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| format!("cannot listen on {addr}: {e}"))?;
        log::info!("listening on http://{addr}");
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| e.to_string())
    })
}
