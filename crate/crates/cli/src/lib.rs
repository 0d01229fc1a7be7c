//! HTTP API and batch commands over the retrieval core.

pub mod api;
pub mod app;
pub mod commands;
pub mod error;

pub use error::ApiError;
