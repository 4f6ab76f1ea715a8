//! Config-driven experiment runner over `markovgen-core`.

pub mod checks;
pub mod config;
pub mod error;
pub mod experiments;
pub mod runner;
pub mod table;

pub use error::CliError;
