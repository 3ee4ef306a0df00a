//! Library surface of the batch CLI: configuration, the run pipeline,
//! command implementations, and output writers. The binary in `main.rs` is a
//! thin argument-parsing layer over this.

pub mod commands;
pub mod config;
pub mod pipeline;
pub mod plots;
pub mod report;
