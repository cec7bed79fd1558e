//! Wire types and error bodies.

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use atnf_core::image_io::png_bytes;
use atnf_core::{Error, Tensor};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub prompt: String,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub guidance: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateInversion {
    pub dataset_seed: u64,
    /// Defaults to the dataset caption.
    pub prompt: Option<String>,
    pub steps: Option<usize>,
    /// Defaults to 1, where inversion is most faithful.
    pub guidance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionInfo {
    pub dataset_seed: u64,
    /// The inverted image, base64 PNG.
    pub original: String,
    /// Reconstruction PSNR in dB; `null` when the reconstruction is exact.
    pub psnr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionResource {
    pub id: String,
    pub prompt: String,
    pub seed: u64,
    pub steps: usize,
    pub guidance: f64,
    pub checkpoint: String,
    pub created_unix_ms: u64,
    pub tokens: Vec<String>,
    /// Source image, base64 PNG.
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inversion: Option<InversionInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditMetrics {
    /// L2 distance between edited and source images in `[−1, 1]` units.
    pub l2_to_source: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditResponse {
    pub session_id: String,
    pub image: String,
    pub metrics: EditMetrics,
}

#[derive(Debug, Clone, Deserialize)]
pub struct AttentionQuery {
    pub token: usize,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default = "default_site")]
    pub kind: crate::engine::SiteFilter,
    #[serde(default)]
    pub format: HeatmapFormat,
}

fn default_resolution() -> usize {
    16
}

fn default_site() -> crate::engine::SiteFilter {
    crate::engine::SiteFilter::All
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapFormat {
    #[default]
    Png,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapValues {
    pub token: usize,
    pub resolution: usize,
    /// Row-major mean attention of the token, before normalization.
    pub values: Vec<f32>,
    /// Row-major mean attention summed over all columns, padding included.
    pub column_total: Vec<f32>,
}

pub fn png_base64(img: &Tensor) -> atnf_core::Result<String> {
    Ok(STANDARD.encode(png_bytes(img)?))
}

pub fn decode_base64(s: &str) -> Option<Vec<u8>> {
    STANDARD.decode(s).ok()
}

/// An HTTP status with a JSON body carrying at least `"error"`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: Value,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: json!({ "error": message.into() }),
        }
    }

    pub fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("no session {id}"))
    }

    pub fn saturated() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "worker pool saturated")
    }

    pub fn timeout() -> Self {
        Self::new(StatusCode::GATEWAY_TIMEOUT, "request timed out")
    }

    pub fn internal(detail: impl std::fmt::Display) -> Self {
        log::error!("internal error: {detail}");
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, detail.to_string())
    }

    /// Errors of a malformed request such as session creation.
    pub fn bad_request(e: Error) -> Self {
        match e {
            Error::UnknownWord { ref word, position } => ApiError {
                status: StatusCode::BAD_REQUEST,
                body: json!({ "error": e.to_string(), "unknown_word": word, "position": position }),
            },
            Error::Field { ref field, ref detail } => ApiError {
                status: StatusCode::BAD_REQUEST,
                body: json!({ "error": e.to_string(), "field": field, "detail": detail }),
            },
            Error::PromptTooLong { .. } | Error::Config(_) | Error::Contract(_) => {
                Self::new(StatusCode::BAD_REQUEST, e.to_string())
            }
            other => Self::from(other),
        }
    }

    /// Errors of an edit specification, reported field by field.
    pub fn invalid_edit(e: Error) -> Self {
        let (field, detail) = match &e {
            Error::Field { field, detail } => (field.clone(), detail.clone()),
            Error::UnknownWord { .. }
            | Error::PromptTooLong { .. }
            | Error::Config(_)
            | Error::Contract(_) => (String::new(), e.to_string()),
            _ => return Self::from(e),
        };
        ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            body: json!({
                "error": "invalid edit specification",
                "errors": [{ "field": field, "detail": detail }],
            }),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        Self::internal(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}
