use std::path::PathBuf;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};
use steexlab_core::types::TrajectoryStep;
use thiserror::Error;

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] steexlab_core::Error),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    InvalidModel(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Internal(String),
}

impl ServiceError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ServiceError::Io { path: path.into(), source }
    }

    pub fn class(&self) -> &'static str {
        match self {
            ServiceError::Core(e) => e.class(),
            ServiceError::BadRequest(_) => "bad_request",
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Conflict(_) => "conflict",
            ServiceError::InvalidModel(_) => "invalid_model",
            ServiceError::Io { .. } => "io",
            ServiceError::Internal(_) => "internal",
        }
    }

    pub fn status(&self) -> StatusCode {
        use steexlab_core::Error as E;
        match self {
            ServiceError::BadRequest(_) | ServiceError::InvalidModel(_) => StatusCode::BAD_REQUEST,
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Core(
                E::Shape(_)
                | E::InvalidMask(_)
                | E::InvalidImage(_)
                | E::Rejected(_)
                | E::Unsupported(_)
                | E::Precondition(_)
                | E::Config(_)
                | E::Png { .. }
                | E::Json(_),
            ) => StatusCode::BAD_REQUEST,
            ServiceError::Core(_) | ServiceError::Io { .. } | ServiceError::Internal(_) => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
        }
    }

    pub fn detail(&self) -> ErrorDetail {
        match self {
            ServiceError::Core(e) => core_detail(e),
            _ => ErrorDetail { class: self.class().into(), message: self.to_string(), step: None, trajectory: None },
        }
    }
}

pub fn core_detail(e: &steexlab_core::Error) -> ErrorDetail {
    let (step, trajectory) = match e {
        steexlab_core::Error::NumericalFailure { step, trajectory } => (Some(*step), Some(trajectory.clone())),
        _ => (None, None),
    };
    ErrorDetail { class: e.class().into(), message: e.to_string(), step, trajectory }
}

/// Error payload shared by HTTP responses, failed jobs and the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorDetail {
    pub class: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<Vec<TrajectoryStep>>,
}

#[derive(Serialize)]
pub struct ErrorBody<'a> {
    pub error: &'a ErrorDetail,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let detail = self.detail();
        (self.status(), Json(ErrorBody { error: &detail })).into_response()
    }
}
