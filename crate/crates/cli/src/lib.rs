//! Runner and debug-protocol server behind the `hvdbg` binary.

pub mod protocol;
pub mod runner;
pub mod serve;

pub use runner::{parse_keys, Report, RunConfig, Target, ToolKind};
