//! Command-line driver: config parsing, experiment dispatch and reports.

pub mod commands;
pub mod config;
pub mod selfcheck;

pub use commands::{bench_codec, cmd_train, infoplane_from_dump, read_dump, write_atomic, InfoplaneOptions, TrainReport};
pub use config::{parse_config, parse_str, ConfigErrors, ExperimentConfig, Overrides};
