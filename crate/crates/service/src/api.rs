use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use ferbench_core::stimuli::ExpressionLabel;
use ferbench_core::trial::{write_trials_jsonl, TrialRecord};
use serde::{Deserialize, Serialize};

use crate::app::{AppState, ClickResponse, SessionCreated, TrialResponse};
use crate::ServiceError;

pub const JSONL_CONTENT_TYPE: &str = "application/x-ndjson";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CreateSessionRequest {
    pub participant_code: String,
    #[serde(default)]
    pub stimulus_set_id: Option<String>,
    /// Fixes the trial order; normally left to the server.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClickRequest {
    pub stimulus_id: String,
    pub x: i64,
    pub y: i64,
    #[serde(default)]
    pub client_ms: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChoiceRequest {
    pub stimulus_id: String,
    pub choice: ExpressionLabel,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/trial", get(next_trial))
        .route("/sessions/{id}/clicks", post(record_click))
        .route("/sessions/{id}/choice", post(submit_choice))
        .route("/sessions/{id}/export", get(export_session))
        .route("/export", get(export_all))
        .with_state(state)
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    Json(req): Json<CreateSessionRequest>,
) -> Result<(StatusCode, Json<SessionCreated>), ServiceError> {
    let created = app.create_session(
        &req.participant_code,
        req.stimulus_set_id.as_deref(),
        req.seed,
    )?;
    Ok((StatusCode::CREATED, Json(created)))
}

async fn next_trial(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<TrialResponse>, ServiceError> {
    Ok(Json(app.next_trial(&id)?))
}

async fn record_click(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<ClickRequest>,
) -> Result<Json<ClickResponse>, ServiceError> {
    Ok(Json(app.click(
        &id,
        &req.stimulus_id,
        req.x,
        req.y,
        req.client_ms,
    )?))
}

async fn submit_choice(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<ChoiceRequest>,
) -> Result<Json<TrialRecord>, ServiceError> {
    Ok(Json(app.choose(&id, &req.stimulus_id, req.choice)?))
}

fn jsonl(records: &[TrialRecord]) -> Result<impl IntoResponse, ServiceError> {
    let mut body = Vec::new();
    write_trials_jsonl(&mut body, records)?;
    Ok(([(header::CONTENT_TYPE, JSONL_CONTENT_TYPE)], body))
}

async fn export_session(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<impl IntoResponse, ServiceError> {
    jsonl(&app.export(&id)?)
}

async fn export_all(State(app): State<Arc<AppState>>) -> Result<impl IntoResponse, ServiceError> {
    jsonl(&app.export_all()?)
}
