pub mod config;
pub mod data;
pub mod metrics;
pub mod model;
pub mod run;

pub use config::*;
pub use data::{Dataset, Sample, ShardSampler};
pub use metrics::{MetricRow, MetricsSeries};
pub use model::*;
pub use run::*;
