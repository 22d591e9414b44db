//! Experiment configuration: a strict JSON schema with documented defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comm::{CostParams, Rank};
use crate::matrix::ImputationPolicy;
use crate::migrate::{CollectionMode, PrimitiveFamily};
use crate::model::ModelConfig;
use crate::resize::UpdateRule;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Balancing mode under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Baseline,
    ZeroRd,
    ZeroPri,
    ZeroPridiffE,
    ZeroPridiffR,
    Mig,
    Semi,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::ZeroRd => "zero-rd",
            Mode::ZeroPri => "zero-pri",
            Mode::ZeroPridiffE => "zero-pridiff-e",
            Mode::ZeroPridiffR => "zero-pridiff-r",
            Mode::Mig => "mig",
            Mode::Semi => "semi",
        }
    }

    pub fn uses_priority(&self) -> bool {
        matches!(
            self,
            Mode::ZeroPri | Mode::ZeroPridiffE | Mode::ZeroPridiffR | Mode::Semi
        )
    }

    pub fn prunes(&self) -> bool {
        !matches!(self, Mode::Baseline | Mode::Mig)
    }
}

fn max_epoch() -> usize {
    usize::MAX
}

/// One window of injected slowness.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScheduleEntry {
    /// First epoch (1-based, inclusive).
    pub from_epoch: usize,
    /// Last epoch (inclusive); open-ended when omitted.
    #[serde(default = "max_epoch")]
    pub to_epoch: usize,
    pub ranks: Vec<Rank>,
    /// Skewness multiplier per listed rank (a single value applies to all).
    pub chi: Vec<f64>,
    /// Rotate through `ranks` one epoch at a time instead of slowing all of
    /// them at once.
    #[serde(default)]
    pub round_robin: bool,
}

/// Straggler schedule: which ranks are how much slower, when.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct HeterogeneityProfile {
    #[serde(default)]
    pub schedule: Vec<ScheduleEntry>,
}

impl HeterogeneityProfile {
    /// Single straggler rotating round-robin through all ranks.
    pub fn round_robin(chi: f64, e: usize) -> Self {
        Self {
            schedule: vec![ScheduleEntry {
                from_epoch: 1,
                to_epoch: usize::MAX,
                ranks: (1..=e).collect(),
                chi: vec![chi],
                round_robin: true,
            }],
        }
    }

    /// Fixed stragglers: rank `i+1` gets `chis[i]`.
    pub fn fixed(chis: &[f64]) -> Self {
        Self {
            schedule: vec![ScheduleEntry {
                from_epoch: 1,
                to_epoch: usize::MAX,
                ranks: (1..=chis.len()).collect(),
                chi: chis.to_vec(),
                round_robin: false,
            }],
        }
    }

    pub fn chi_for(&self, epoch: usize, rank: Rank) -> f64 {
        for entry in &self.schedule {
            if epoch < entry.from_epoch || epoch > entry.to_epoch {
                continue;
            }
            if entry.round_robin {
                let active = entry.ranks[(epoch - entry.from_epoch) % entry.ranks.len()];
                if rank == active {
                    return entry.chi[(epoch - entry.from_epoch) % entry.chi.len().max(1)]
                        .max(entry.chi[0]);
                }
            } else if let Some(pos) = entry.ranks.iter().position(|&r| r == rank) {
                return entry.chi[pos % entry.chi.len()];
            }
        }
        1.0
    }

    /// Concurrent straggler count at this epoch.
    pub fn nu(&self, epoch: usize, e: usize) -> usize {
        (1..=e).filter(|&r| self.chi_for(epoch, r) > 1.0).count()
    }

    fn validate(&self, e: usize) -> Result<(), ConfigError> {
        for entry in &self.schedule {
            if entry.ranks.is_empty() || entry.chi.is_empty() {
                return Err(ConfigError::Invalid(
                    "heterogeneity entry needs ranks and chi".into(),
                ));
            }
            if entry.from_epoch == 0 || entry.from_epoch > entry.to_epoch {
                return Err(ConfigError::Invalid(format!(
                    "bad epoch range {}..{}",
                    entry.from_epoch, entry.to_epoch
                )));
            }
            for &r in &entry.ranks {
                if r < 1 || r > e {
                    return Err(ConfigError::Invalid(format!(
                        "straggler rank {r} outside 1..={e}"
                    )));
                }
            }
            for &c in &entry.chi {
                if !(c >= 1.0) {
                    return Err(ConfigError::Invalid(format!(
                        "chi must be >= 1, got {c}"
                    )));
                }
            }
        }
        // Overlapping static windows for the same rank are ambiguous.
        for (i, a) in self.schedule.iter().enumerate() {
            for b in &self.schedule[i + 1..] {
                let overlap = a.from_epoch <= b.to_epoch && b.from_epoch <= a.to_epoch;
                if overlap && a.ranks.iter().any(|r| b.ranks.contains(r)) {
                    return Err(ConfigError::Invalid(
                        "overlapping schedule entries for the same rank".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

fn d_theta_iter() -> f64 {
    1e-3
}
fn d_alpha_decay() -> f64 {
    0.8
}
fn d_gamma_max() -> f64 {
    0.9
}
fn d_refresh_threshold() -> f64 {
    0.1
}

/// Resizing knobs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ZeroParams {
    pub theta_iter: f64,
    pub alpha_decay: f64,
    pub gamma_max: f64,
    pub refresh_threshold: f64,
    pub priority_update: UpdateRule,
}

impl Default for ZeroParams {
    fn default() -> Self {
        Self {
            theta_iter: d_theta_iter(),
            alpha_decay: d_alpha_decay(),
            gamma_max: d_gamma_max(),
            refresh_threshold: d_refresh_threshold(),
            priority_update: UpdateRule::Incremental,
        }
    }
}

/// Forced migration for homogeneous cost-comparison sweeps: the listed ranks
/// each migrate `gamma` of every layer regardless of timing statistics.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ForcedMigration {
    pub ranks: Vec<Rank>,
    pub gamma: f64,
}

/// Migration knobs.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MigrationParams {
    pub collection: CollectionMode,
    pub family: PrimitiveFamily,
    pub forced: Option<ForcedMigration>,
}

fn d_epsilon() -> f64 {
    0.02
}
fn d_sample_gammas() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 0.75, 1.0]
}

/// Hybrid-allocator knobs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SemiParams {
    pub epsilon: f64,
    pub sample_gammas: Vec<f64>,
    /// Force the migration-group size (the manual sweep knob).
    pub forced_lambda: Option<usize>,
}

impl Default for SemiParams {
    fn default() -> Self {
        Self {
            epsilon: d_epsilon(),
            sample_gammas: d_sample_gammas(),
            forced_lambda: None,
        }
    }
}

fn d_eval_size() -> usize {
    256
}
fn d_spread() -> f64 {
    0.3
}
fn d_separation() -> f64 {
    2.0
}

/// Synthetic dataset knobs (Gaussian clusters through a fixed projection).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetParams {
    pub eval_size: usize,
    pub spread: f64,
    pub separation: f64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            eval_size: d_eval_size(),
            spread: d_spread(),
            separation: d_separation(),
        }
    }
}

/// Full experiment description.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub mode: Mode,
    pub epochs: usize,
    pub iterations: usize,
    pub seed: u64,
    #[serde(default)]
    pub imputation: ImputationPolicy,
    #[serde(default)]
    pub cost: CostParams,
    #[serde(default)]
    pub heterogeneity: HeterogeneityProfile,
    #[serde(default)]
    pub zero: ZeroParams,
    #[serde(default)]
    pub migration: MigrationParams,
    #[serde(default)]
    pub semi: SemiParams,
    #[serde(default)]
    pub dataset: DatasetParams,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub wall_clock: bool,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.epochs == 0 || self.iterations == 0 {
            return Err(ConfigError::Invalid(
                "epochs and iterations must be >= 1".into(),
            ));
        }
        self.heterogeneity.validate(self.model.e)?;
        if matches!(self.mode, Mode::Semi | Mode::Mig) && self.model.e < 2 {
            return Err(ConfigError::Invalid(format!(
                "mode {} requires e >= 2",
                self.mode.as_str()
            )));
        }
        if self.mode == Mode::Semi && self.semi.sample_gammas.len() < 2 {
            return Err(ConfigError::Invalid(
                "semi.sample_gammas needs at least 2 points".into(),
            ));
        }
        if let Some(f) = &self.migration.forced {
            if !(0.0..=1.0).contains(&f.gamma) {
                return Err(ConfigError::Invalid(
                    "migration.forced.gamma must be in [0, 1]".into(),
                ));
            }
            for &r in &f.ranks {
                if r < 1 || r > self.model.e {
                    return Err(ConfigError::Invalid(format!(
                        "forced migration rank {r} outside 1..={}",
                        self.model.e
                    )));
                }
            }
            if f.ranks.len() >= self.model.e {
                return Err(ConfigError::Invalid(
                    "forced migration must leave at least one helper".into(),
                ));
            }
        }
        if !(self.zero.gamma_max > 0.0 && self.zero.gamma_max < 1.0) {
            return Err(ConfigError::Invalid("gamma_max must be in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Parse and validate a config file.
pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    load_config_str(&text)
}

/// Parse and validate config text.
pub fn load_config_str(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let cfg: ExperimentConfig = serde_json::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> String {
        r#"{
            "model": {"depth": 2, "hs": 8, "bs": 2, "sql": 2, "e": 2, "lr": 0.05, "classes": 3},
            "mode": "baseline",
            "epochs": 2,
            "iterations": 3,
            "seed": 7
        }"#
        .to_string()
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = load_config_str(&minimal_json()).unwrap();
        assert_eq!(cfg.zero.theta_iter, 1e-3);
        assert_eq!(cfg.zero.alpha_decay, 0.8);
        assert_eq!(cfg.zero.gamma_max, 0.9);
        assert_eq!(cfg.semi.epsilon, 0.02);
        assert_eq!(cfg.model.expansion, 4);
        assert_eq!(cfg.imputation, ImputationPolicy::Zero);
    }

    #[test]
    fn unknown_key_is_named_in_the_error() {
        let bad = minimal_json().replace("\"seed\": 7", "\"seed\": 7, \"bogus_key\": 1");
        let err = load_config_str(&bad).unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
    }

    #[test]
    fn chi_below_one_is_rejected() {
        let bad = minimal_json().replace(
            "\"seed\": 7",
            r#""seed": 7, "heterogeneity": {"schedule": [
                {"from_epoch": 1, "ranks": [1], "chi": [0.5]}]}"#,
        );
        let err = load_config_str(&bad).unwrap_err();
        assert!(err.to_string().contains("chi"), "{err}");
    }

    #[test]
    fn round_robin_rotates_one_straggler_per_epoch() {
        let p = HeterogeneityProfile::round_robin(4.0, 3);
        for epoch in 1..=6 {
            let active: Vec<usize> = (1..=3).filter(|&r| p.chi_for(epoch, r) > 1.0).collect();
            assert_eq!(active, vec![(epoch - 1) % 3 + 1]);
            assert_eq!(p.nu(epoch, 3), 1);
        }
    }

    #[test]
    fn fixed_profile_assigns_per_rank_chi() {
        let p = HeterogeneityProfile::fixed(&[8.0, 6.0, 4.0, 2.0]);
        assert_eq!(p.chi_for(3, 1), 8.0);
        assert_eq!(p.chi_for(3, 4), 2.0);
        assert_eq!(p.chi_for(3, 5), 1.0);
        assert_eq!(p.nu(1, 8), 4);
    }

    #[test]
    fn overlapping_entries_for_same_rank_rejected() {
        let bad = minimal_json().replace(
            "\"seed\": 7",
            r#""seed": 7, "heterogeneity": {"schedule": [
                {"from_epoch": 1, "to_epoch": 3, "ranks": [1], "chi": [2.0]},
                {"from_epoch": 2, "to_epoch": 4, "ranks": [1], "chi": [3.0]}]}"#,
        );
        assert!(load_config_str(&bad).is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = load_config_str(&minimal_json()).unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back = load_config_str(&text).unwrap();
        assert_eq!(cfg, back);
    }
}
