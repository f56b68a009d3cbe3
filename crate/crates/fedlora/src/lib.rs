//! Files, configuration and command line for `fedlora-core`.

pub mod codec;
pub mod config;
pub mod exec;
pub mod output;
pub mod presets;
pub mod runner;

pub use exec::Parallel;
