//! On-disk formats and run configuration.

pub mod checkpoint;
mod codec;
pub mod config;
pub mod dataset;
pub mod report;

pub use checkpoint::{config_digest, load_checkpoint, save_checkpoint};
pub use config::RunConfig;
pub use dataset::{load_dataset, save_dataset};
pub use report::{read_report, write_report};

/// Writes `bytes` to `path` atomically, creating parent directories.
pub fn write_bytes(path: &std::path::Path, bytes: &[u8]) -> crate::Result<()> {
    codec::write_file(path, bytes)
}
