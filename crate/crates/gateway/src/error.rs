use edgepod_core::lifecycle::LifecycleError;
use edgepod_core::ports::PortError;
use edgepod_core::reservation::{ReservationError, Window};
use serde_json::{json, Value};
use thiserror::Error;

use crate::auth::AuthError;
use crate::platform::SessionDescriptor;

/// Retry hint handed out with 503 responses.
pub const RETRY_AFTER_S: u64 = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ApiError {
    #[error("{0}")]
    Unauthorized(String),
    #[error("{message}")]
    Forbidden {
        message: String,
        next_window: Option<Window>,
    },
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{message}")]
    Conflict { message: String, detail: Option<Value> },
    #[error("{message}")]
    Unavailable {
        message: String,
        retry_after_s: u64,
        session: Option<Box<SessionDescriptor>>,
    },
    #[error("{0}")]
    PayloadTooLarge(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn forbidden(message: impl Into<String>) -> Self {
        ApiError::Forbidden {
            message: message.into(),
            next_window: None,
        }
    }

    pub fn unavailable(message: impl Into<String>, session: Option<SessionDescriptor>) -> Self {
        ApiError::Unavailable {
            message: message.into(),
            retry_after_s: RETRY_AFTER_S,
            session: session.map(Box::new),
        }
    }

    pub fn status(&self) -> u16 {
        match self {
            ApiError::Unauthorized(_) => 401,
            ApiError::Forbidden { .. } => 403,
            ApiError::NotFound(_) => 404,
            ApiError::BadRequest(_) => 400,
            ApiError::Conflict { .. } => 409,
            ApiError::PayloadTooLarge(_) => 413,
            ApiError::Unavailable { .. } => 503,
            ApiError::Internal(_) => 500,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ApiError::Unauthorized(_) => "unauthorized",
            ApiError::Forbidden { .. } => "forbidden",
            ApiError::NotFound(_) => "not-found",
            ApiError::BadRequest(_) => "bad-request",
            ApiError::Conflict { .. } => "conflict",
            ApiError::PayloadTooLarge(_) => "payload-too-large",
            ApiError::Unavailable { .. } => "unavailable",
            ApiError::Internal(_) => "internal",
        }
    }

    /// JSON error body: `{"error": kind, "message": ..}` plus kind-specific fields.
    pub fn body(&self) -> Value {
        let mut body = json!({ "error": self.kind(), "message": self.to_string() });
        match self {
            ApiError::Forbidden {
                next_window: Some(w),
                ..
            } => body["next_window"] = json!(w),
            ApiError::Conflict {
                detail: Some(d), ..
            } => body["detail"] = d.clone(),
            ApiError::Unavailable {
                retry_after_s,
                session,
                ..
            } => {
                body["retry_after_s"] = json!(retry_after_s);
                if let Some(s) = session {
                    body["session"] = json!(s);
                }
            }
            _ => {}
        }
        body
    }
}

impl From<AuthError> for ApiError {
    fn from(e: AuthError) -> Self {
        match e {
            AuthError::Locked(_) => ApiError::forbidden(e.to_string()),
            AuthError::InvalidUsers(_) => ApiError::Internal(e.to_string()),
            _ => ApiError::Unauthorized(e.to_string()),
        }
    }
}

impl From<ReservationError> for ApiError {
    fn from(e: ReservationError) -> Self {
        match &e {
            ReservationError::NotFound(_) => ApiError::NotFound(e.to_string()),
            ReservationError::Conflict {
                blocking,
                start,
                end,
                resource,
            } => ApiError::Conflict {
                detail: Some(json!({
                    "blocking": blocking,
                    "start": start,
                    "end": end,
                    "resource": resource,
                })),
                message: e.to_string(),
            },
            ReservationError::InvalidWindow(_) | ReservationError::InvalidRequest(_) => {
                ApiError::BadRequest(e.to_string())
            }
            ReservationError::Forbidden(_) => ApiError::forbidden(e.to_string()),
            ReservationError::InvalidInventory(_) | ReservationError::Journal(_) => {
                ApiError::Internal(e.to_string())
            }
        }
    }
}

impl From<PortError> for ApiError {
    fn from(e: PortError) -> Self {
        match &e {
            PortError::AlreadyAllocated { .. } => ApiError::Conflict {
                message: e.to_string(),
                detail: None,
            },
            PortError::InvalidConfig(_) => ApiError::Internal(e.to_string()),
            _ => ApiError::unavailable(e.to_string(), None),
        }
    }
}

impl From<LifecycleError> for ApiError {
    fn from(e: LifecycleError) -> Self {
        match e {
            LifecycleError::Ports(p) => p.into(),
            LifecycleError::InvalidRequest(m) => ApiError::BadRequest(m),
            LifecycleError::NotFound(m) => ApiError::NotFound(m),
            LifecycleError::SessionBusy { .. } => ApiError::Conflict {
                message: e.to_string(),
                detail: None,
            },
            LifecycleError::Sim(s) => ApiError::Internal(s.to_string()),
        }
    }
}
