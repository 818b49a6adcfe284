use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;

use tidecast::Error as CoreError;

#[derive(Clone, Debug, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    pub fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    pub fn unavailable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "not_loaded", message)
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::UnknownPatch(_) => Self::new(StatusCode::NOT_FOUND, "unknown_patch", msg),
            CoreError::InsufficientTimesteps { .. } => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "insufficient_history", msg)
            }
            CoreError::InvalidPolygon(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_polygon", msg),
            CoreError::MissingEnsemble(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "missing_ensemble", msg),
            CoreError::InvalidParameter(_) | CoreError::ShapeMismatch(_) | CoreError::StepOutOfRange { .. } => {
                Self::unprocessable(msg)
            }
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", msg),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "code": self.code, "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}
