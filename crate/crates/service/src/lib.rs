//! HTTP job service: scene submission, job polling, artifacts and mask previews.
//!
//! Jobs run on a fixed pool of workers and are persisted under `DATA_DIR`, so
//! queued work survives a restart.

pub mod routes;
pub mod store;
pub mod worker;

use std::path::PathBuf;
use std::sync::Arc;

use finecontrol::denoisers::{
    checkpoint, DeltaFactory, DenoiserFactory, SharedFactory, TinyDenoiser,
};
use finecontrol::diffusion::NoiseSchedule;
use tokio::sync::mpsc;

pub use routes::router;
pub use store::{ArtifactKind, JobRecord, JobState, JobStore};

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub port: u16,
    pub workers: usize,
    pub data_dir: PathBuf,
    /// Tiny denoiser checkpoint; without one jobs use the delta renderer.
    pub checkpoint: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            port: 8080,
            workers: 1,
            data_dir: PathBuf::from("data"),
            checkpoint: None,
        }
    }
}

impl Config {
    /// Reads `PORT`, `WORKERS`, `DATA_DIR` and `CHECKPOINT`.
    pub fn from_env() -> anyhow::Result<Self> {
        let mut c = Self::default();
        if let Ok(v) = std::env::var("PORT") {
            c.port = v.parse().map_err(|e| anyhow::anyhow!("PORT={v}: {e}"))?;
        }
        if let Ok(v) = std::env::var("WORKERS") {
            c.workers = v.parse().map_err(|e| anyhow::anyhow!("WORKERS={v}: {e}"))?;
            anyhow::ensure!(c.workers > 0, "WORKERS must be positive");
        }
        if let Ok(v) = std::env::var("DATA_DIR") {
            c.data_dir = v.into();
        }
        if let Ok(v) = std::env::var("CHECKPOINT") {
            c.checkpoint = Some(v.into());
        }
        Ok(c)
    }

    pub fn factory(&self, schedule: &NoiseSchedule) -> anyhow::Result<Arc<dyn DenoiserFactory>> {
        Ok(match &self.checkpoint {
            Some(p) => {
                let params =
                    checkpoint::load(p).map_err(|e| anyhow::anyhow!("{}: {e}", p.display()))?;
                Arc::new(SharedFactory(Arc::new(TinyDenoiser::new(
                    params,
                    schedule.clone(),
                ))))
            }
            None => Arc::new(DeltaFactory {
                schedule: schedule.clone(),
                ..Default::default()
            }),
        })
    }
}

pub struct AppState {
    pub store: JobStore,
    pub factory: Arc<dyn DenoiserFactory>,
    pub schedule: NoiseSchedule,
    queue: mpsc::UnboundedSender<String>,
}

impl AppState {
    pub fn enqueue(&self, id: &str) {
        // The receiver lives as long as the workers, which outlive the state.
        let _ = self.queue.send(id.to_string());
    }
}

/// Opens the store, requeues surviving QUEUED jobs and starts the workers.
/// Must be called inside a tokio runtime.
pub fn start(
    config: &Config,
    factory: Arc<dyn DenoiserFactory>,
    schedule: NoiseSchedule,
) -> anyhow::Result<Arc<AppState>> {
    let recovered = JobStore::open(&config.data_dir)?;
    for id in &recovered.interrupted {
        log::warn!("job {id} was running at shutdown and is now FAILED");
    }
    let (tx, rx) = mpsc::unbounded_channel();
    let state = Arc::new(AppState {
        store: recovered.store,
        factory,
        schedule,
        queue: tx,
    });
    for id in &recovered.queued {
        state.enqueue(id);
    }
    worker::spawn_workers(state.clone(), rx, config.workers);
    Ok(state)
}
