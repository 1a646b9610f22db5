use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use finecontrol::benchio::{encode_mask_png, encode_png, mask_preview, preview_colors};
use finecontrol::composer::HarmonyParams;
use finecontrol::denoisers::{Palette, RENDER_LINE_WIDTH};
use finecontrol::pose_geometry::{build_mask_set, MaskMode, Pose2D};
use finecontrol::prompting::{scene_spec_schema, validate_scene_json, SchemaViolation};
use serde::Serialize;
use serde_json::{json, Value};

use crate::store::{ArtifactKind, JobState};
use crate::AppState;

pub const API_VERSION: u32 = 1;
pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/scenes", post(submit_scene))
        .route("/api/schema/scene", get(scene_schema))
        .route("/api/jobs/{id}", get(get_job))
        .route("/api/jobs/{id}/artifacts/{kind}", get(get_artifact))
        .route("/api/masks/preview", post(preview_masks))
        .with_state(state)
}

/// Error body: `{"version", "error", "message", "violations"?}`.
#[derive(Debug, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    status: StatusCode,
    version: u32,
    error: &'static str,
    message: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    violations: Vec<SchemaViolation>,
}

impl ApiError {
    fn new(status: StatusCode, error: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            version: API_VERSION,
            error,
            message: message.into(),
            violations: Vec::new(),
        }
    }

    fn schema(violations: Vec<SchemaViolation>) -> Self {
        let mut e = Self::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "SCHEMA_INVALID",
            format!("{} schema violation(s)", violations.len()),
        );
        e.violations = violations;
        e
    }

    fn violation(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        Self::schema(vec![SchemaViolation {
            pointer: pointer.into(),
            message: message.into(),
        }])
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL", e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

fn parse_json(body: &[u8]) -> Result<Value, ApiError> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "BAD_JSON", e.to_string()))
}

async fn submit_scene(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, ApiError> {
    let doc = parse_json(&body)?;
    let scene = validate_scene_json(&doc).map_err(ApiError::schema)?;
    let key = match headers.get(IDEMPOTENCY_HEADER) {
        Some(v) => Some(
            v.to_str()
                .map_err(|_| {
                    ApiError::new(
                        StatusCode::BAD_REQUEST,
                        "BAD_HEADER",
                        "idempotency key must be ASCII",
                    )
                })?
                .to_string(),
        ),
        None => None,
    };
    let (rec, created) = state.store.create(scene, key).map_err(ApiError::internal)?;
    if created {
        state.enqueue(&rec.id);
    }
    let body = json!({"version": API_VERSION, "id": rec.id, "state": rec.state});
    Ok((
        StatusCode::ACCEPTED,
        [(header::LOCATION, format!("/api/jobs/{}", rec.id))],
        Json(body),
    )
        .into_response())
}

async fn scene_schema() -> Json<Value> {
    Json(scene_spec_schema())
}

fn unknown_job(id: &str) -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "UNKNOWN_JOB", format!("no job {id}"))
}

async fn get_job(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    let rec = state.store.get(&id).ok_or_else(|| unknown_job(&id))?;
    Ok(Json(&*rec).into_response())
}

async fn get_artifact(
    State(state): State<Arc<AppState>>,
    Path((id, kind)): Path<(String, String)>,
) -> Result<Response, ApiError> {
    let rec = state.store.get(&id).ok_or_else(|| unknown_job(&id))?;
    let kind: ArtifactKind = kind.parse().map_err(|_| {
        ApiError::new(
            StatusCode::NOT_FOUND,
            "UNKNOWN_ARTIFACT",
            format!("no artifact kind {kind}"),
        )
    })?;
    if rec.state != JobState::Done {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "NOT_READY",
            format!("job {id} is {:?}", rec.state),
        ));
    }
    let bytes = state
        .store
        .read_artifact(&rec, kind)
        .ok_or_else(|| {
            ApiError::new(
                StatusCode::NOT_FOUND,
                "UNKNOWN_ARTIFACT",
                format!("job {id} has no {kind:?}"),
            )
        })?
        .map_err(ApiError::internal)?;
    Ok(([(header::CONTENT_TYPE, kind.content_type())], bytes).into_response())
}

/// `{"version"?, "canvas": {h, w}, "poses": [...], "harmony"?, "mask_mode"?, "identities"?}`
async fn preview_masks(body: Bytes) -> Result<Response, ApiError> {
    let doc = parse_json(&body)?;
    let obj = doc
        .as_object()
        .ok_or_else(|| ApiError::violation("", "must be an object"))?;
    if let Some(v) = obj.get("version") {
        if v.as_u64() != Some(API_VERSION as u64) {
            return Err(ApiError::violation(
                "/version",
                format!("must be {API_VERSION}"),
            ));
        }
    }
    let dim = |key: &str| -> Result<usize, ApiError> {
        let ptr = format!("/canvas/{key}");
        let n = doc
            .pointer(&ptr)
            .and_then(Value::as_u64)
            .ok_or_else(|| ApiError::violation(&ptr, "must be a positive integer"))?;
        if n < 4 || n > 4096 || n % 4 != 0 {
            return Err(ApiError::violation(
                ptr,
                "must be a multiple of 4 in [4, 4096]",
            ));
        }
        Ok(n as usize)
    };
    let (h, w) = (dim("h")?, dim("w")?);
    let raw_poses = obj
        .get("poses")
        .and_then(Value::as_array)
        .ok_or_else(|| ApiError::violation("/poses", "must be an array"))?;
    if raw_poses.is_empty() {
        return Err(ApiError::violation("/poses", "needs at least one pose"));
    }
    let mut poses = Vec::with_capacity(raw_poses.len());
    for (i, p) in raw_poses.iter().enumerate() {
        let pose: Pose2D = serde_json::from_value(p.clone())
            .map_err(|e| ApiError::violation(format!("/poses/{i}"), e.to_string()))?;
        pose.check_canvas(h, w)
            .map_err(|e| ApiError::violation(format!("/poses/{i}"), e.to_string()))?;
        poses.push(pose);
    }
    let harmony: HarmonyParams = match obj.get("harmony") {
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| ApiError::violation("/harmony", e.to_string()))?,
        None => HarmonyParams::default(),
    };
    harmony
        .validate()
        .map_err(|e| ApiError::violation("/harmony", e.to_string()))?;
    let mode: MaskMode = match obj.get("mask_mode") {
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| ApiError::violation("/mask_mode", e.to_string()))?,
        None => MaskMode::Soft,
    };
    let identities: Vec<String> = match obj.get("identities") {
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| ApiError::violation("/identities", e.to_string()))?,
        None => Vec::new(),
    };
    let refs: Vec<&Pose2D> = poses.iter().collect();
    let set = build_mask_set(&refs, h, w, RENDER_LINE_WIDTH, harmony.tau, mode, &[])
        .map_err(|e| ApiError::violation("/poses", e.to_string()))?;
    let b64 = |bytes: Vec<u8>| base64::engine::general_purpose::STANDARD.encode(bytes);
    let base = set.base();
    let masks = base
        .masks()
        .iter()
        .enumerate()
        .map(|(i, m)| Ok(json!({"instance": i, "png": b64(encode_mask_png(m, h, w).map_err(ApiError::internal)?)})))
        .collect::<Result<Vec<_>, ApiError>>()?;
    let palette = Palette::default();
    let names: Vec<&str> = (0..poses.len())
        .map(|i| match identities.get(i) {
            Some(id) => id.as_str(),
            None => palette.entries()[i % palette.entries().len()].0.as_str(),
        })
        .collect();
    let overlay = encode_png(&mask_preview(base, &preview_colors(&names, &palette)))
        .map_err(ApiError::internal)?;
    Ok(Json(json!({
        "version": API_VERSION,
        "mask_mode": mode,
        "tau": harmony.tau,
        "height": h,
        "width": w,
        "masks": masks,
        "overlay": b64(overlay),
    }))
    .into_response())
}
