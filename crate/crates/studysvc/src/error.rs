use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

/// Stable integer codes carried in every error body.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "u32", try_from = "u32")]
pub enum ErrorCode {
    InvalidRequest = 1001,
    UnknownSession = 1002,
    UnknownItem = 1003,
    UnknownPair = 1004,
    MissingCrops = 1005,
    InvalidSlice = 1006,
    UnorderedPair = 1007,
    AlreadyAnswered = 2001,
    ItemNotServed = 2002,
    NothingAnswered = 2003,
    SessionIncomplete = 2004,
    Storage = 3001,
    CorruptLog = 3002,
    Internal = 3003,
}

impl ErrorCode {
    pub const ALL: [ErrorCode; 14] = [
        ErrorCode::InvalidRequest,
        ErrorCode::UnknownSession,
        ErrorCode::UnknownItem,
        ErrorCode::UnknownPair,
        ErrorCode::MissingCrops,
        ErrorCode::InvalidSlice,
        ErrorCode::UnorderedPair,
        ErrorCode::AlreadyAnswered,
        ErrorCode::ItemNotServed,
        ErrorCode::NothingAnswered,
        ErrorCode::SessionIncomplete,
        ErrorCode::Storage,
        ErrorCode::CorruptLog,
        ErrorCode::Internal,
    ];

    pub fn status(self) -> StatusCode {
        use ErrorCode::*;
        match self {
            InvalidRequest | UnknownPair | MissingCrops | InvalidSlice | UnorderedPair => StatusCode::BAD_REQUEST,
            UnknownSession | UnknownItem => StatusCode::NOT_FOUND,
            AlreadyAnswered | ItemNotServed | NothingAnswered | SessionIncomplete => StatusCode::CONFLICT,
            Storage | CorruptLog | Internal => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<ErrorCode> for u32 {
    fn from(c: ErrorCode) -> u32 {
        c as u32
    }
}

impl TryFrom<u32> for ErrorCode {
    type Error = String;

    fn try_from(v: u32) -> Result<Self, String> {
        ErrorCode::ALL
            .into_iter()
            .find(|c| *c as u32 == v)
            .ok_or_else(|| format!("unknown error code {v}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        ApiError {
            code,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "error {}: {}", self.code as u32, self.message)
    }
}

impl std::error::Error for ApiError {}

#[derive(Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ApiError,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.code.status(), Json(ErrorBody { error: self })).into_response()
    }
}
