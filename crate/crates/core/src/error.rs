use thiserror::Error;

use crate::store::StoreError;
use crate::vital::VitalError;

/// Errors surfaced by gateway operations. Each maps to one wire error code.
#[derive(Debug, Error)]
pub enum ApiError {
    #[error("unauthorized")]
    Unauthorized,
    #[error("forbidden: {0}")]
    Forbidden(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("invalid bounds: {0}")]
    InvalidBounds(String),
    #[error("invalid transition: {0}")]
    InvalidTransition(String),
    #[error("session {0} is closed")]
    SessionClosed(String),
    #[error("payload of {size} bytes exceeds cap of {cap}")]
    PayloadTooLarge { size: usize, cap: usize },
    #[error("malformed request: {0}")]
    Malformed(String),
    #[error("service unavailable: {0}")]
    Unavailable(String),
}

impl ApiError {
    /// Stable machine-readable code used in error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            ApiError::Unauthorized => "unauthorized",
            ApiError::Forbidden(_) => "forbidden",
            ApiError::NotFound(_) => "not_found",
            ApiError::Conflict(_) => "conflict",
            ApiError::InvalidBounds(_) => "invalid_bounds",
            ApiError::InvalidTransition(_) => "invalid_transition",
            ApiError::SessionClosed(_) => "session_closed",
            ApiError::PayloadTooLarge { .. } => "payload_too_large",
            ApiError::Malformed(_) => "malformed",
            ApiError::Unavailable(_) => "unavailable",
        }
    }

    pub fn http_status(&self) -> u16 {
        match self {
            ApiError::Unauthorized => 401,
            ApiError::Forbidden(_) => 403,
            ApiError::NotFound(_) => 404,
            ApiError::Conflict(_) | ApiError::InvalidTransition(_) => 409,
            ApiError::SessionClosed(_) => 410,
            ApiError::PayloadTooLarge { .. } => 413,
            ApiError::InvalidBounds(_) => 422,
            ApiError::Malformed(_) => 400,
            ApiError::Unavailable(_) => 503,
        }
    }

    /// Human-readable detail without the category prefix; the `message` field on the wire.
    pub fn detail(&self) -> String {
        match self {
            ApiError::Unauthorized => "authentication required".into(),
            ApiError::Forbidden(m)
            | ApiError::NotFound(m)
            | ApiError::Conflict(m)
            | ApiError::InvalidBounds(m)
            | ApiError::InvalidTransition(m)
            | ApiError::Malformed(m)
            | ApiError::Unavailable(m) => m.clone(),
            ApiError::SessionClosed(_) | ApiError::PayloadTooLarge { .. } => self.to_string(),
        }
    }

    pub fn from_code(code: &str, message: String) -> Self {
        match code {
            "unauthorized" => ApiError::Unauthorized,
            "forbidden" => ApiError::Forbidden(message),
            "not_found" => ApiError::NotFound(message),
            "conflict" => ApiError::Conflict(message),
            "invalid_bounds" => ApiError::InvalidBounds(message),
            "invalid_transition" => ApiError::InvalidTransition(message),
            "session_closed" => ApiError::SessionClosed(message),
            "payload_too_large" => ApiError::PayloadTooLarge { size: 0, cap: 0 },
            "malformed" => ApiError::Malformed(message),
            _ => ApiError::Unavailable(message),
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound { kind, id } => ApiError::NotFound(format!("{kind}/{id}")),
            other => ApiError::Unavailable(other.to_string()),
        }
    }
}

impl From<VitalError> for ApiError {
    fn from(e: VitalError) -> Self {
        match e {
            VitalError::InvalidBounds { .. } => ApiError::InvalidBounds(e.to_string()),
            other => ApiError::Malformed(other.to_string()),
        }
    }
}
