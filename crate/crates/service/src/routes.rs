use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde_json::json;

use atnf_core::controller::{min_max_normalize, EditSpec};
use atnf_core::dataset;
use atnf_core::diffusion::SamplerConfig;
use atnf_core::image_io::gray_png_bytes;
use atnf_core::Tensor;

use crate::api::{
    png_base64, ApiError, AttentionQuery, CreateInversion, CreateSession, EditMetrics, EditResponse,
    HeatmapFormat, HeatmapValues, SessionResource,
};
use crate::engine::{heatmap, Origin, SessionSpec};
use crate::AppState;

type Shared = State<Arc<AppState>>;

pub fn routes() -> Router<Arc<AppState>> {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/sessions", post(create_session))
        .route("/api/inversions", post(create_inversion))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/edits", post(create_edit))
        .route("/api/sessions/{id}/attention", get(attention))
}

/// Runs `job` on a free worker, or fails fast when none is free.
async fn on_worker<T, F>(state: &AppState, job: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    let permit = state
        .pool
        .clone()
        .try_acquire_owned()
        .map_err(|_| ApiError::saturated())?;
    let task = tokio::task::spawn_blocking(move || {
        let _held = permit;
        job()
    });
    match tokio::time::timeout(state.timeout, task).await {
        Err(_) => Err(ApiError::timeout()),
        Ok(Err(join)) => Err(ApiError::internal(join)),
        Ok(Ok(r)) => r,
    }
}

fn parse_body<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("request body: {e}")))
}

async fn health(State(state): Shared) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "checkpoint": state.engine.fingerprint() }))
}

async fn generate_session(
    state: &AppState,
    spec: SessionSpec,
) -> Result<(StatusCode, Json<SessionResource>), ApiError> {
    state
        .engine
        .vocabulary()
        .tokenize(&spec.prompt)
        .map_err(ApiError::bad_request)?;
    let engine = state.engine.clone();
    let store = state.store.clone();
    let stored = on_worker(state, move || {
        let g = engine.generate(&spec).map_err(ApiError::bad_request)?;
        Ok(store.insert(&engine, spec, g)?)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(stored.resource.clone())))
}

async fn create_session(
    State(state): Shared,
    body: Bytes,
) -> Result<(StatusCode, Json<SessionResource>), ApiError> {
    let req: CreateSession = parse_body(&body)?;
    let defaults = SamplerConfig::default();
    let spec = SessionSpec {
        prompt: req.prompt,
        // Kept below 2^53 so JavaScript clients round-trip it exactly.
        seed: req.seed.unwrap_or_else(|| rand::random::<u32>() as u64),
        steps: req.steps.unwrap_or(defaults.steps),
        guidance: req.guidance.unwrap_or(defaults.guidance),
        origin: Origin::Seed,
    };
    generate_session(&state, spec).await
}

async fn create_inversion(
    State(state): Shared,
    body: Bytes,
) -> Result<(StatusCode, Json<SessionResource>), ApiError> {
    let req: CreateInversion = parse_body(&body)?;
    let spec = SessionSpec {
        prompt: req
            .prompt
            .unwrap_or_else(|| dataset::gen_scene(req.dataset_seed).prompt),
        seed: req.dataset_seed,
        steps: req.steps.unwrap_or(SamplerConfig::default().steps),
        guidance: req.guidance.unwrap_or(1.0),
        origin: Origin::Inversion {
            dataset_seed: req.dataset_seed,
        },
    };
    generate_session(&state, spec).await
}

async fn get_session(State(state): Shared, Path(id): Path<String>) -> Result<Json<SessionResource>, ApiError> {
    let s = state.store.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    Ok(Json(s.resource.clone()))
}

async fn create_edit(
    State(state): Shared,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<EditResponse>, ApiError> {
    let stored = state.store.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let text = std::str::from_utf8(&body)
        .map_err(|_| ApiError::invalid_edit(atnf_core::Error::field("", "body is not UTF-8")))?;
    let spec = EditSpec::from_json(text).map_err(ApiError::invalid_edit)?;
    spec.compile(state.engine.vocabulary(), &stored.generated.tokens)
        .map_err(ApiError::invalid_edit)?;
    let engine = state.engine.clone();
    let session = stored.generated.session.clone();
    let outcome = on_worker(&state, move || engine.edit(&session, &spec).map_err(ApiError::invalid_edit)).await?;
    Ok(Json(EditResponse {
        session_id: id,
        image: png_base64(&outcome.edited)?,
        metrics: EditMetrics {
            l2_to_source: outcome.l2_to_source,
        },
    }))
}

async fn attention(
    State(state): Shared,
    Path(id): Path<String>,
    query: Result<Query<AttentionQuery>, QueryRejection>,
) -> Result<Response, ApiError> {
    let stored = state.store.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let Query(q) = query.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))?;
    let len = stored.generated.tokens.len();
    if q.token >= len {
        return Err(ApiError {
            status: StatusCode::BAD_REQUEST,
            body: json!({
                "error": format!("token {} beyond the {len}-token prompt", q.token),
                "field": "token",
            }),
        });
    }
    let map = heatmap(&stored.generated.records, q.token, q.resolution, q.kind)?.ok_or_else(|| {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            body: json!({
                "error": format!("no {:?} attention at resolution {}", q.kind, q.resolution),
                "field": "resolution",
            }),
        }
    })?;
    Ok(match q.format {
        HeatmapFormat::Json => Json(HeatmapValues {
            token: q.token,
            resolution: q.resolution,
            values: map.values.data().to_vec(),
            column_total: map.column_total.data().to_vec(),
        })
        .into_response(),
        HeatmapFormat::Png => {
            let shown = min_max_normalize(&map.values).unwrap_or_else(|| Tensor::zeros(map.values.shape()));
            ([(header::CONTENT_TYPE, "image/png")], gray_png_bytes(&shown)?).into_response()
        }
    })
}
