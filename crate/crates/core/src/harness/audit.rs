//! Built-in invariant battery for the CLI `audit` subcommand: fast
//! self-checks of the worked examples, the cost-model ordering, parallel
//! equivalence, mode hygiene and determinism.

use crate::comm::{estimate_comm_time, CommPattern, CostParams};
use crate::harness::config::{ExperimentConfig, Mode};
use crate::harness::experiment::run_experiment;
use crate::harness::metrics::rows_to_csv;
use crate::resize::{compute_gamma, GammaCriterion, TimingStats};
use crate::semi::{group_boundary_scan, solve_beta, CostModel, PiecewiseLinear, TaskEntry};

/// One named check outcome.
#[derive(Debug, Clone)]
pub struct AuditCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> AuditCheck {
    AuditCheck {
        name,
        passed,
        detail,
    }
}

fn small_cfg(base: &ExperimentConfig, mode: Mode, e: usize) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.mode = mode;
    cfg.model.e = e;
    cfg.model.depth = 2;
    cfg.model.hs = 16;
    cfg.model.expansion = 2;
    cfg.model.bs = 2;
    cfg.model.sql = 4;
    cfg.epochs = 2;
    cfg.iterations = 4;
    cfg.migration.forced = None;
    cfg.semi.forced_lambda = None;
    cfg
}

/// Run every check against (a scaled-down version of) the given config.
pub fn run_audit(cfg: &ExperimentConfig) -> Vec<AuditCheck> {
    let mut checks = Vec::new();

    // Pruning-ratio arithmetic on the worked example.
    {
        let mut s = TimingStats::new(0.1);
        s.record_iteration(20.0, 16.0);
        s.apply_refresh(vec![(10.0, 8.0), (20.0, 16.0)]);
        let g = compute_gamma(&s, GammaCriterion::Avg, 0.9);
        checks.push(check(
            "ratio-worked-example",
            g == Ok(0.3125),
            format!("gamma(T=[10,20], M=16) = {g:?}, expected Ok(0.3125)"),
        ));
    }

    // Split-equation bisection on the linear worked example.
    {
        let lin = |s: f64| PiecewiseLinear::fit(vec![(0.0, 0.0), (200.0, 200.0 * s)]).unwrap();
        let cm = CostModel {
            omega1: 0.0,
            omega2: lin(1.0),
            phi1: lin(1.0),
            phi2: lin(1.0),
        };
        let beta = solve_beta(100.0, &cm, 2).unwrap_or(f64::NAN);
        checks.push(check(
            "split-worked-example",
            (beta - 1.0 / 3.0).abs() <= 1e-9,
            format!("beta = {beta}, expected 1/3"),
        ));
    }

    // Boundary scan on the worked example.
    {
        let entries = vec![
            TaskEntry { rank: 1, t: 40.0, l: 100.0, speed: 0.4 },
            TaskEntry { rank: 2, t: 30.0, l: 100.0, speed: 0.1 },
            TaskEntry { rank: 3, t: 10.0, l: 100.0, speed: 0.1 },
            TaskEntry { rank: 4, t: 10.0, l: 100.0, speed: 0.1 },
        ];
        let phi1 = PiecewiseLinear::fit(vec![(0.0, 0.0), (1000.0, 100.0)]).unwrap();
        let x = group_boundary_scan(&entries, 2, 10.0, &phi1);
        checks.push(check(
            "boundary-worked-example",
            x == Ok(1),
            format!("x = {x:?}, expected Ok(1)"),
        ));
    }

    // Tree broadcast beats root-serial scatter under defaults.
    {
        let p = CostParams::default();
        let ok = (3..=8).all(|e| {
            estimate_comm_time(4096, CommPattern::Broadcast, e, &p)
                < estimate_comm_time(4096, CommPattern::Scatter, e, &p)
        });
        checks.push(check(
            "comm-cost-ordering",
            ok,
            "broadcast < scatter for e in 3..=8, 4 KiB payloads".into(),
        ));
    }

    // Parallel degrees agree with the dense run.
    {
        let dense = run_experiment(&small_cfg(cfg, Mode::Baseline, 1));
        let tp = run_experiment(&small_cfg(cfg, Mode::Baseline, 2));
        let outcome = match (&dense, &tp) {
            (Ok(a), Ok(b)) => {
                let mut worst: f64 = 0.0;
                for (i, blk) in a.models[0].blocks.iter().enumerate() {
                    let shards1: Vec<&crate::matrix::Matrix> =
                        b.models.iter().map(|m| &m.blocks[i].lin1.w_local).collect();
                    let cat1 = crate::matrix::Matrix::concat_rows(&shards1).unwrap();
                    worst = worst.max(cat1.max_abs_diff(&blk.lin1.w_local));
                    let shards2: Vec<&crate::matrix::Matrix> =
                        b.models.iter().map(|m| &m.blocks[i].lin2.w_local).collect();
                    let cat2 = crate::matrix::Matrix::concat_cols(&shards2).unwrap();
                    worst = worst.max(cat2.max_abs_diff(&blk.lin2.w_local));
                }
                (worst <= 1e-9, format!("max weight drift e=2 vs dense: {worst:.3e}"))
            }
            _ => (false, "run failed".into()),
        };
        checks.push(check("tp-equivalence", outcome.0, outcome.1));
    }

    // Baseline runs no resize or migration machinery.
    {
        let r = run_experiment(&small_cfg(cfg, Mode::Baseline, 2));
        let outcome = match &r {
            Ok(a) => {
                let m = &a.summary.mode_audit;
                (
                    m.prunes == 0 && m.imputations == 0 && m.migrated_matmuls == 0,
                    format!(
                        "prunes={} imputations={} migrated={}",
                        m.prunes, m.imputations, m.migrated_matmuls
                    ),
                )
            }
            Err(e) => (false, e.to_string()),
        };
        checks.push(check("baseline-mode-audit", outcome.0, outcome.1));
    }

    // Pure migration never imputes.
    {
        let mut c = small_cfg(cfg, Mode::Mig, 4);
        c.heterogeneity = crate::harness::config::HeterogeneityProfile::fixed(&[4.0]);
        let r = run_experiment(&c);
        let outcome = match &r {
            Ok(a) => {
                let m = &a.summary.mode_audit;
                (
                    m.imputations == 0 && m.prunes == 0 && m.migrated_matmuls > 0,
                    format!(
                        "imputations={} prunes={} migrated={}",
                        m.imputations, m.prunes, m.migrated_matmuls
                    ),
                )
            }
            Err(e) => (false, e.to_string()),
        };
        checks.push(check("migration-mode-audit", outcome.0, outcome.1));
    }

    // One all-reduce per block per direction.
    {
        let r = run_experiment(&small_cfg(cfg, Mode::Baseline, 2));
        let outcome = match &r {
            Ok(a) => {
                let per_iter = a.summary.mode_audit.all_reduces_per_iteration;
                (
                    per_iter == 2 * 2,
                    format!("all-reduces per iteration = {per_iter}, expected 4 at depth 2"),
                )
            }
            Err(e) => (false, e.to_string()),
        };
        checks.push(check("collective-count", outcome.0, outcome.1));
    }

    // Byte-identical reruns.
    {
        let c = small_cfg(cfg, cfg.mode, cfg.model.e.min(4).max(1));
        let a = run_experiment(&c);
        let b = run_experiment(&c);
        let outcome = match (&a, &b) {
            (Ok(x), Ok(y)) => {
                let ca = rows_to_csv(&x.rows);
                let cb = rows_to_csv(&y.rows);
                (ca == cb, format!("{} bytes compared", ca.len()))
            }
            _ => (false, "run failed".into()),
        };
        checks.push(check("determinism", outcome.0, outcome.1));
    }

    checks
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::load_config_str;

    #[test]
    fn audit_battery_passes_on_defaults() {
        let cfg = load_config_str(
            r#"{
                "model": {"depth": 2, "hs": 16, "expansion": 2, "bs": 2, "sql": 4,
                          "e": 2, "lr": 0.05, "classes": 3},
                "mode": "baseline", "epochs": 2, "iterations": 4, "seed": 11
            }"#,
        )
        .unwrap();
        let checks = run_audit(&cfg);
        for c in &checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
        assert!(checks.len() >= 8);
    }
}
