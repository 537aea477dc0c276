//! Service layer: design sessions, a generation job queue and the HTTP API
//! in front of them.

use thiserror::Error;

pub mod jobs;
pub mod server;
pub mod session;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{0}")]
    BadRequest(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("internal error: {0}")]
    Internal(String),
}
