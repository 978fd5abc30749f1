use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use epiqc_core::gate::HoldError;
use epiqc_core::issues::IssueError;
use epiqc_core::region::RegionError;
use epiqc_core::store::StoreError;
use epiqc_core::EngineError;
use serde::Serialize;

/// Machine-readable error tag. Each tag has exactly one status code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ErrorTag {
    UnknownRegion,
    UnknownTicket,
    UnknownIssue,
    UnknownSource,
    NotFound,
    AlreadyResolved,
    InvalidTransition,
    Superseded,
    MissingLink,
    Validation,
    Unauthorized,
    Internal,
}

impl ErrorTag {
    pub fn status(self) -> StatusCode {
        match self {
            ErrorTag::UnknownRegion
            | ErrorTag::UnknownTicket
            | ErrorTag::UnknownIssue
            | ErrorTag::UnknownSource
            | ErrorTag::NotFound => StatusCode::NOT_FOUND,
            ErrorTag::AlreadyResolved | ErrorTag::InvalidTransition | ErrorTag::Superseded => StatusCode::CONFLICT,
            ErrorTag::MissingLink | ErrorTag::Validation => StatusCode::UNPROCESSABLE_ENTITY,
            ErrorTag::Unauthorized => StatusCode::UNAUTHORIZED,
            ErrorTag::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, thiserror::Error)]
#[error("{tag:?}: {message}")]
pub struct ApiError {
    pub status: u16,
    pub tag: ErrorTag,
    pub message: String,
}

impl ApiError {
    pub fn new(tag: ErrorTag, message: impl Into<String>) -> Self {
        Self {
            status: tag.status().as_u16(),
            tag,
            message: message.into(),
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self::new(ErrorTag::Validation, message)
    }

    pub fn unknown_region(region: &str) -> Self {
        Self::new(ErrorTag::UnknownRegion, format!("unknown region `{region}`"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.tag.status(), Json(self)).into_response()
    }
}

impl From<RegionError> for ApiError {
    fn from(e: RegionError) -> Self {
        match e {
            RegionError::NotFound(_) | RegionError::UnknownParent(_) => Self::new(ErrorTag::UnknownRegion, e.to_string()),
            other => Self::validation(other.to_string()),
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::UnknownRegion(_) => Self::new(ErrorTag::UnknownRegion, e.to_string()),
            StoreError::Region(r) => r.into(),
            other => Self::validation(other.to_string()),
        }
    }
}

impl From<HoldError> for ApiError {
    fn from(e: HoldError) -> Self {
        let tag = match e {
            HoldError::UnknownTicket(_) => ErrorTag::UnknownTicket,
            HoldError::AlreadyResolved(_) => ErrorTag::AlreadyResolved,
            HoldError::NoRules => ErrorTag::Validation,
        };
        Self::new(tag, e.to_string())
    }
}

impl From<IssueError> for ApiError {
    fn from(e: IssueError) -> Self {
        let tag = match e {
            IssueError::MissingLink => ErrorTag::MissingLink,
            IssueError::UnknownRegion(_) => ErrorTag::UnknownRegion,
            IssueError::UnknownIssue(_) => ErrorTag::UnknownIssue,
            IssueError::InvalidTransition { .. } => ErrorTag::InvalidTransition,
            IssueError::Validation(_) => ErrorTag::Validation,
        };
        Self::new(tag, e.to_string())
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::UnknownRegion(_) => Self::new(ErrorTag::UnknownRegion, e.to_string()),
            EngineError::UnknownSource(_) => Self::new(ErrorTag::UnknownSource, e.to_string()),
            EngineError::Superseded(_) => Self::new(ErrorTag::Superseded, e.to_string()),
            EngineError::Store(s) => s.into(),
            EngineError::Hold(h) => h.into(),
            EngineError::Issue(i) => i.into(),
            EngineError::Region(r) => r.into(),
            other => Self::new(ErrorTag::Internal, other.to_string()),
        }
    }
}
