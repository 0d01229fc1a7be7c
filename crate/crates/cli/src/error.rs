//! The single error shape returned by the API and printed by the CLI.

use std::path::Path;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

use stancefact_core::dataset::StoreError;
use stancefact_core::embedding::EmbeddingError;
use stancefact_core::fact::FactParseError;
use stancefact_core::llm::LlmError;
use stancefact_core::tree::{CatalogError, TreeError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[error("{code}: {message}")]
pub struct ApiError {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<serde_json::Value>,
    #[serde(skip, default = "default_status")]
    pub status: u16,
}

fn default_status() -> u16 {
    500
}

impl ApiError {
    pub fn new(status: StatusCode, code: impl Into<String>, message: impl Into<String>) -> Self {
        Self { code: code.into(), message: message.into(), detail: None, status: status.as_u16() }
    }

    pub fn bad_request(code: impl Into<String>, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }

    pub fn not_found(code: impl Into<String>, message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, code, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL", message)
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        let status = if e.kind() == std::io::ErrorKind::NotFound {
            StatusCode::NOT_FOUND
        } else {
            StatusCode::INTERNAL_SERVER_ERROR
        };
        Self::new(status, "IO", format!("{}: {e}", path.display()))
    }

    pub fn with_detail(mut self, detail: impl Serialize) -> Self {
        self.detail = serde_json::to_value(detail).ok();
        self
    }

    pub fn status_code(&self) -> StatusCode {
        StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("error serializes")
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status_code(), Json(self)).into_response()
    }
}

impl From<LlmError> for ApiError {
    fn from(e: LlmError) -> Self {
        let status = match e {
            LlmError::Transcript(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::BAD_GATEWAY,
        };
        let mut out = Self::new(status, e.code(), e.to_string());
        if let LlmError::ReplayMiss { kind, input_hash } = &e {
            out = out.with_detail(serde_json::json!({ "kind": kind, "input_hash": input_hash }));
        }
        out
    }
}

impl From<EmbeddingError> for ApiError {
    fn from(e: EmbeddingError) -> Self {
        let status = match e {
            EmbeddingError::ProviderUnavailable(_) => StatusCode::BAD_GATEWAY,
            _ => StatusCode::BAD_REQUEST,
        };
        Self::new(status, e.code(), e.to_string())
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match e {
            StoreError::UnknownDataset(_) => StatusCode::NOT_FOUND,
            StoreError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        Self::new(status, e.code(), e.to_string())
    }
}

impl From<CatalogError> for ApiError {
    fn from(e: CatalogError) -> Self {
        match e {
            CatalogError::Store(e) => e.into(),
            CatalogError::Embedding(e) => e.into(),
        }
    }
}

impl From<FactParseError> for ApiError {
    fn from(e: FactParseError) -> Self {
        Self::bad_request(e.code(), e.to_string())
    }
}

impl From<TreeError> for ApiError {
    fn from(e: TreeError) -> Self {
        match e {
            TreeError::Llm(e) => e.into(),
            TreeError::Embedding(e) => e.into(),
            TreeError::FactParse(e) => e.into(),
            TreeError::UnknownNode(_) | TreeError::UnknownFact { .. } => {
                Self::not_found(e.code(), e.to_string())
            }
            TreeError::NodeBusy(_) => Self::new(StatusCode::CONFLICT, e.code(), e.to_string()),
            TreeError::InvalidFact(ref r) => Self::bad_request(e.code(), e.to_string()).with_detail(r),
            _ => Self::bad_request(e.code(), e.to_string()),
        }
    }
}
