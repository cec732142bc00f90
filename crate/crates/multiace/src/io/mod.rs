//! File formats and run configuration.

pub mod config;
pub mod extxyz;

pub use config::RunConfig;
pub use extxyz::{parse_extxyz, parse_extxyz_str, write_extxyz, write_extxyz_str, Dataset};
