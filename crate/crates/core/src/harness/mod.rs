//! Experiment harness: configuration, synthetic data, heterogeneity
//! schedules, experiment orchestration over all balancing modes, and metrics
//! emission.

pub mod audit;
pub mod config;
pub mod data;
pub mod experiment;
pub mod metrics;

pub use config::{
    load_config, load_config_str, ConfigError, ExperimentConfig, HeterogeneityProfile, Mode,
    ScheduleEntry,
};
pub use data::SyntheticDataset;
pub use experiment::{run_experiment, HarnessError, RunArtifacts};
pub use metrics::{emit_metrics, MetricsRow, RunSummary};

/// Deterministic sub-seed derivation (splitmix64 over the base and parts).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(0x9e3779b97f4a7c15).wrapping_add(p);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^= z >> 31;
    }
    z
}
