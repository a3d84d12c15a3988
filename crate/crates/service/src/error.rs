use axum::extract::rejection::JsonRejection;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

use dvp_core::error::{BankError, EngineError};

/// Error body returned by every endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    pub retryable: bool,
}

impl ApiError {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        Self {
            code: code.to_string(),
            message: message.into(),
            retryable: false,
        }
    }

    pub fn not_found(code: &str, what: impl std::fmt::Display) -> Self {
        Self::new(code, format!("{what} not found"))
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new("BadRequest", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new("Internal", message)
    }

    pub fn status(&self) -> StatusCode {
        status_for(&self.code)
    }
}

/// HTTP status for an error code.
pub fn status_for(code: &str) -> StatusCode {
    match code {
        "UnknownBank" | "UnknownSession" | "UnknownJob" | "UnknownImage" | "UnknownArtifact"
        | "NotFound" => StatusCode::NOT_FOUND,
        "BankLocked" => StatusCode::CONFLICT,
        "BackendUnavailable" | "Timeout" => StatusCode::SERVICE_UNAVAILABLE,
        "IoError" | "JsonError" | "Internal" => StatusCode::INTERNAL_SERVER_ERROR,
        _ => StatusCode::BAD_REQUEST,
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        Self {
            code: e.code().to_string(),
            message: e.to_string(),
            retryable: e.is_retryable(),
        }
    }
}

impl From<BankError> for ApiError {
    fn from(e: BankError) -> Self {
        EngineError::from(e).into()
    }
}

impl From<std::io::Error> for ApiError {
    fn from(e: std::io::Error) -> Self {
        EngineError::from(e).into()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(self)).into_response()
    }
}
