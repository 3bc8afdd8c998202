//! Command implementations behind the `poi-icl` binary.

pub mod commands;
pub mod config;
pub mod lock;
