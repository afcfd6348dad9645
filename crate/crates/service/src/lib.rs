//! HTTP scene service: scene storage, edits, renders and background
//! optimization jobs over a JSON API.

pub mod api;
pub mod error;
pub mod store;

use std::net::SocketAddr;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use layerscene::{Pipeline, PipelineConfig};

pub use api::{router, AppState, JobState, JobStatus, RenderResponse, SceneView};
pub use error::{ApiError, ErrorBody};
pub use store::{SceneRecord, Store};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    #[serde(default = "default_bind")]
    pub bind: String,
    #[serde(default = "default_store")]
    pub store_dir: PathBuf,
    /// Optimization jobs allowed to run at once.
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub pipeline: PipelineConfig,
}

fn default_bind() -> String {
    "127.0.0.1:8080".into()
}

fn default_store() -> PathBuf {
    PathBuf::from("scenes")
}

fn default_workers() -> usize {
    2
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: default_bind(),
            store_dir: default_store(),
            workers: default_workers(),
            pipeline: PipelineConfig::default(),
        }
    }
}

impl ServiceConfig {
    pub fn state(&self) -> layerscene::Result<AppState> {
        AppState::new(
            Pipeline::from_config(self.pipeline.clone())?,
            Store::open(&self.store_dir)?,
            self.workers,
        )
    }
}

/// Binds the configured address and serves until the process exits.
pub async fn serve(config: ServiceConfig) -> layerscene::Result<()> {
    let app = router(config.state()?);
    let listener = tokio::net::TcpListener::bind(&config.bind).await?;
    let addr: SocketAddr = listener.local_addr()?;
    eprintln!("layerscene service listening on http://{addr}");
    axum::serve(listener, app).await?;
    Ok(())
}
