//! Files on disk: images, checkpoints and configuration.

pub mod checkpoint;
pub mod config;
pub mod pnm;

pub use config::Config;
