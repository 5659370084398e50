//! HTTP service for the retrieval engine.

pub mod server;
