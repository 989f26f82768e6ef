//! HTTP service for the click-to-reveal two-alternative forced-choice
//! experiment.
//!
//! Participants only ever receive the blurred-grayscale rendition of a
//! stimulus and, per click, the original pixels inside one reveal disk. Every
//! state change is journaled before it is applied, so a restarted server
//! resumes sessions where they stopped.

pub mod api;
pub mod app;
pub mod clock;
pub mod config;
pub mod journal;
pub mod participant;
pub mod patch;
pub mod session;
pub mod stimulus_set;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use thiserror::Error;

pub use api::router;
pub use app::AppState;
pub use clock::{Clock, ManualClock, SystemClock};
pub use config::ServiceConfig;
pub use stimulus_set::StimulusSet;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("journal: {0}")]
    Journal(String),
    #[error("internal: {0}")]
    Internal(String),
    #[error(transparent)]
    Stimuli(#[from] ferbench_core::stimuli::StimuliError),
    #[error(transparent)]
    Trial(#[from] ferbench_core::trial::TrialError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = self.status();
        if status.is_server_error() {
            tracing::error!(error = %self, "request failed");
        }
        (
            status,
            Json(serde_json::json!({ "error": self.to_string() })),
        )
            .into_response()
    }
}
