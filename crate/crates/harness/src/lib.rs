//! Blocking HTTP client for the activations/logits protocol and an axum
//! server that exposes the deterministic mock model over the same protocol.

mod client;
mod server;

pub use client::HttpBackend;
pub use server::{router, serve_blocking, MockServer, ServerOptions};

pub const ENDPOINT_ENV: &str = "ACTMON_ENDPOINT";
