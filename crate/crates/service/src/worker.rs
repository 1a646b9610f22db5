//! Job execution: generation, scoring and artifact files.

use std::path::Path;
use std::sync::Arc;

use finecontrol::benchio::{encode_png, evaluate_image, mask_preview, preview_colors, Evaluators};
use finecontrol::composer::generate_scene;
use finecontrol::metrics::{hnd, ToyPoseDetector, ToySimilarityOracle};
use serde_json::json;
use tokio::sync::{mpsc, Mutex};

use crate::store::{ArtifactKind, JobState};
use crate::AppState;

/// Spawns `workers` tasks that pull job ids from the queue until it closes.
pub fn spawn_workers(state: Arc<AppState>, rx: mpsc::UnboundedReceiver<String>, workers: usize) {
    let rx = Arc::new(Mutex::new(rx));
    for _ in 0..workers.max(1) {
        let (state, rx) = (state.clone(), rx.clone());
        tokio::spawn(async move {
            loop {
                let Some(id) = rx.lock().await.recv().await else {
                    break;
                };
                let st = state.clone();
                let job = id.clone();
                if let Err(e) = tokio::task::spawn_blocking(move || run_job(&st, &job)).await {
                    log::error!("job {id} panicked: {e}");
                    let _ = state.store.transition(&id, JobState::Failed, |r| {
                        r.error = Some(format!("worker panicked: {e}"));
                    });
                }
            }
        });
    }
}

/// Runs one QUEUED job to DONE or FAILED.
pub fn run_job(state: &AppState, id: &str) {
    let rec = match state.store.transition(id, JobState::Running, |_| {}) {
        Ok(r) => r,
        Err(e) => {
            log::warn!("skipping job {id}: {e}");
            return;
        }
    };
    let result = produce_artifacts(state, id, &rec.scene);
    let outcome = match result {
        Ok(artifacts) => state
            .store
            .transition(id, JobState::Done, |r| r.artifacts = artifacts),
        Err(msg) => state
            .store
            .transition(id, JobState::Failed, |r| r.error = Some(msg)),
    };
    if let Err(e) = outcome {
        log::error!("job {id}: {e}");
    }
}

fn produce_artifacts(
    state: &AppState,
    id: &str,
    scene: &finecontrol::prompting::SceneSpec,
) -> Result<std::collections::BTreeMap<ArtifactKind, String>, String> {
    let g = generate_scene(scene, state.factory.as_ref(), &state.schedule)
        .map_err(|e| e.to_string())?;
    let oracle = ToySimilarityOracle::default();
    let detector = ToyPoseDetector::default();
    let eval = Evaluators {
        oracle: &oracle,
        detector: &detector,
    };
    let (instances, detections) =
        evaluate_image(scene, &g.image, eval).map_err(|e| e.to_string())?;
    let ids: Vec<&str> = scene
        .instances
        .iter()
        .map(|i| i.identity.as_str())
        .collect();
    let masks = mask_preview(g.masks.base(), &preview_colors(&ids, &oracle.palette));
    let metrics = json!({
        "version": 1,
        "instances": instances,
        "detections": detections,
        "hnd": hnd(scene.instances.len(), detections.len()),
    });
    let files: [(ArtifactKind, Vec<u8>); 4] = [
        (
            ArtifactKind::Image,
            encode_png(&g.image).map_err(|e| e.to_string())?,
        ),
        (
            ArtifactKind::Masks,
            encode_png(&masks).map_err(|e| e.to_string())?,
        ),
        (
            ArtifactKind::Trace,
            serde_json::to_vec_pretty(&g.trace).map_err(|e| e.to_string())?,
        ),
        (
            ArtifactKind::Metrics,
            serde_json::to_vec_pretty(&metrics).map_err(|e| e.to_string())?,
        ),
    ];
    let rel_dir = state.store.artifact_dir(id);
    let dir = state.store.root().join(&rel_dir);
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let mut out = std::collections::BTreeMap::new();
    for (kind, bytes) in files {
        let rel = rel_dir.join(kind.file_name());
        write_once(&state.store.root().join(&rel), &bytes).map_err(|e| e.to_string())?;
        out.insert(kind, rel.to_string_lossy().into_owned());
    }
    Ok(out)
}

fn write_once(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(tmp, path)
}
