//! HTTP surfaces, transports and the multi-process-shaped cluster harness.

pub mod client;
pub mod harness;
pub mod server;
pub mod wire;
