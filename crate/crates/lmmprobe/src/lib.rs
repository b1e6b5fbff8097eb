//! File formats, command-line driver and benchmark harness for
//! [`lmmprobe_core`].

pub mod artifacts;
pub mod bench;
pub mod cli;
pub mod config;
pub mod csvio;

pub use cli::run;
