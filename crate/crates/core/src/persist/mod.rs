//! Checkpoint serialization and run configuration files.

mod checkpoint;
mod config;

pub use checkpoint::{Checkpoint, PersistError, FORMAT_VERSION};
pub use config::{ConfigError, RunConfig};
