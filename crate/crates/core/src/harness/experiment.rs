//! Experiment orchestration: one logical task per rank (mapped onto scoped
//! threads), per-mode plan construction, the epoch/iteration loop, held-out
//! evaluation, and assembly of the metrics rows.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::comm::{CollectiveEngine, CommError, Rank, TaskCtx};
use crate::exec::{
    eval_forward, train_iteration, ActiveMigration, ExecError, IterState, IterationPolicy,
};
use crate::harness::config::{ConfigError, ExperimentConfig, Mode};
use crate::harness::data::SyntheticDataset;
use crate::harness::derive_seed;
use crate::harness::metrics::{EpochSummary, MetricsRow, ModeAudit, RunSummary};
use crate::matrix::{IndexSet, Matrix};
use crate::migrate::MigAmount;
use crate::model::{Model, ModelError};
use crate::resize::{
    epoch_priority_update, init_priority_layers, maybe_refresh_group_stats, plan_from_state,
    prune_count, LayerResize, PriorityState, ResizeError, ResizePlan, TimingStats,
};
use crate::semi::{
    build_plan, pretest_costs, solve_beta, CostModel, PlanParams, PretestDims, SemiError,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("rank {rank} failed at epoch {epoch} iteration {iteration}: {source}")]
    Iteration {
        rank: Rank,
        epoch: usize,
        iteration: usize,
        source: ExecError,
    },
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Resize(#[from] ResizeError),
    #[error(transparent)]
    Semi(#[from] SemiError),
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error("worker thread panicked")]
    WorkerPanic,
}

/// Everything a finished run exposes: metrics rows, the summary, and each
/// rank's final model (rank-ordered) for equivalence checks.
pub struct RunArtifacts {
    pub rows: Vec<MetricsRow>,
    pub summary: RunSummary,
    pub models: Vec<Model>,
}

#[derive(Debug, Clone)]
struct EpochRecord {
    clock_end: f64,
    busy: f64,
    comm_iters: f64,
    comm_total: f64,
    flops: u64,
    loss_mean: f64,
    acc: f64,
    gamma: f64,
    beta: f64,
    lambda: usize,
    prunes: u64,
    imputations: u64,
    migrated_matmuls: u64,
    all_reduces: u64,
    refreshes: u64,
}

struct RankOutcome {
    model: Model,
    clock_start: f64,
    records: Vec<EpochRecord>,
}

/// Per-rank mode machinery: statistics, priority state, the current policy
/// and the decisions worth logging.
///
/// The shed trackers hold each rank's cumulative offloaded fraction. The
/// ratio formula measures the gap of the *current* (already mitigated)
/// iteration, so each refresh composes the fresh ratio onto the running
/// total: `s' = 1 - (1 - s)(1 - raw)`. Negative gaps (an over-mitigated or
/// recovered rank) unwind the total the same way. Every rank updates the
/// trackers from the same gathered statistics, so they agree everywhere.
struct ModeState {
    stats: TimingStats,
    prio: PriorityState,
    iter_state: IterState,
    policy: IterationPolicy,
    cost_model: Option<CostModel>,
    snapshot: Vec<(String, Matrix)>,
    /// Cumulative shed fraction per rank against the group average.
    shed_avg: Vec<f64>,
    /// Cumulative resize fraction per rank against the strict minimum.
    shed_min_m: Vec<f64>,
    /// Cumulative migration fraction per rank against the strict minimum
    /// (workload-proportional form).
    shed_min_t: Vec<f64>,
    gamma_own: f64,
    beta_own: f64,
    lambda: usize,
    reseed: u64,
}

fn compose_shed(current: f64, raw: f64, cap: f64) -> f64 {
    (1.0 - (1.0 - current) * (1.0 - raw.min(cap))).clamp(0.0, cap)
}

fn layer_weights(model: &Model) -> Vec<(String, &Matrix)> {
    model
        .blocks
        .iter()
        .flat_map(|b| {
            [
                (b.lin1.name.clone(), &b.lin1.w_local),
                (b.lin2.name.clone(), &b.lin2.w_local),
            ]
        })
        .collect()
}

impl ModeState {
    fn new(cfg: &ExperimentConfig, model: &Model) -> Self {
        let mut prio = PriorityState::new(
            cfg.zero.theta_iter,
            cfg.zero.alpha_decay,
            cfg.iterations,
        );
        if cfg.mode.prunes() {
            let dims: Vec<(String, usize, usize)> = model
                .blocks
                .iter()
                .flat_map(|b| {
                    [
                        (
                            b.lin1.name.clone(),
                            b.lin1.contraction_local(),
                            b.lin1.w_local.rows(),
                        ),
                        (
                            b.lin2.name.clone(),
                            b.lin2.contraction_local(),
                            b.lin2.w_local.rows(),
                        ),
                    ]
                })
                .collect();
            init_priority_layers(&mut prio, &dims);
        }
        let snapshot = layer_weights(model)
            .into_iter()
            .map(|(n, w)| (n, w.clone()))
            .collect();
        let e = cfg.model.e;
        Self {
            stats: TimingStats::new(cfg.zero.refresh_threshold),
            prio,
            iter_state: IterState::new(),
            policy: IterationPolicy::baseline(),
            cost_model: None,
            snapshot,
            shed_avg: vec![0.0; e],
            shed_min_m: vec![0.0; e],
            shed_min_t: vec![0.0; e],
            gamma_own: 0.0,
            beta_own: 0.0,
            lambda: 0,
            reseed: 0,
        }
    }

    /// Fold freshly gathered statistics into the cumulative shed trackers.
    fn update_trackers(&mut self) {
        let Some(group) = &self.stats.group else {
            return;
        };
        let t_avg = group.iter().map(|(t, _)| t).sum::<f64>() / group.len() as f64;
        let t_min = group
            .iter()
            .map(|(t, _)| *t)
            .fold(f64::INFINITY, f64::min);
        for (k, &(t, m)) in group.iter().enumerate() {
            let raw_avg = if m > 0.0 { (t - t_avg) / m } else { 0.0 };
            let raw_min_m = if m > 0.0 { (t - t_min) / m } else { 0.0 };
            let raw_min_t = if t > 0.0 { (t - t_min) / t } else { 0.0 };
            self.shed_avg[k] = compose_shed(self.shed_avg[k], raw_avg, 1.0);
            self.shed_min_m[k] = compose_shed(self.shed_min_m[k], raw_min_m, 1.0);
            self.shed_min_t[k] = compose_shed(self.shed_min_t[k], raw_min_t, 1.0);
        }
    }

    /// Random per-layer selections for the unprioritized variant.
    fn random_plan(&mut self, cfg: &ExperimentConfig, rank: Rank, gamma: f64) -> ResizePlan {
        let mut plan = ResizePlan {
            gamma_uniform: gamma,
            imputation: cfg.imputation,
            ..ResizePlan::default()
        };
        for (idx, (name, lp)) in self.prio.layers.iter().enumerate() {
            let n = prune_count(lp.l_cols, gamma);
            let mut cols: Vec<usize> = (1..=lp.l_cols).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                cfg.seed,
                &[6, rank as u64, self.reseed, idx as u64],
            ));
            cols.shuffle(&mut rng);
            let prune = IndexSet::new(cols.into_iter().take(n).collect()).expect("distinct");
            plan.layers.insert(name.clone(), LayerResize { gamma, prune });
        }
        plan
    }

    /// Derive this rank's policy from the mode and the shared statistics.
    /// Identical on every rank given identical refreshed stats.
    fn rebuild_policy(
        &mut self,
        cfg: &ExperimentConfig,
        rank: Rank,
        e: usize,
    ) -> Result<(), HarnessError> {
        let gmax = cfg.zero.gamma_max;
        let mut pol = IterationPolicy {
            collection: cfg.migration.collection,
            family: cfg.migration.family,
            ..IterationPolicy::baseline()
        };
        self.gamma_own = 0.0;
        self.beta_own = 0.0;
        self.lambda = 0;
        match cfg.mode {
            Mode::Baseline => {}
            Mode::ZeroRd | Mode::ZeroPri | Mode::ZeroPridiffE | Mode::ZeroPridiffR => {
                let shed = self.shed_avg[rank - 1];
                let gamma_uni = match cfg.mode {
                    // The empirical-ratio variant prunes a fixed half once
                    // straggling is detected.
                    Mode::ZeroPridiffE => {
                        if shed > 0.0 {
                            0.5
                        } else {
                            0.0
                        }
                    }
                    _ => shed.min(gmax),
                };
                self.gamma_own = gamma_uni;
                if gamma_uni > 0.0 {
                    pol.resize = match cfg.mode {
                        Mode::ZeroRd => self.random_plan(cfg, rank, gamma_uni),
                        Mode::ZeroPri => plan_from_state(
                            &self.prio,
                            gamma_uni,
                            gmax,
                            cfg.imputation,
                            false,
                        ),
                        _ => plan_from_state(&self.prio, gamma_uni, gmax, cfg.imputation, true),
                    };
                }
            }
            Mode::Mig => {
                if let Some(forced) = &cfg.migration.forced {
                    pol.migrations = forced
                        .ranks
                        .iter()
                        .map(|&r| ActiveMigration {
                            straggler: r,
                            amount: MigAmount::Fraction(forced.gamma),
                        })
                        .collect();
                } else {
                    for (i, &s) in self.shed_avg.iter().enumerate() {
                        if s > 0.0 {
                            pol.migrations.push(ActiveMigration {
                                straggler: i + 1,
                                amount: MigAmount::Fraction(s),
                            });
                        }
                    }
                }
                self.lambda = pol.migrations.len();
            }
            Mode::Semi => {
                if self.stats.group.is_some() {
                    let cm = self.cost_model.as_ref().expect("pretest ran");
                    // The allocator decides the structure (who migrates, who
                    // resizes, the split); amounts come from the composed
                    // trackers matching each group's criterion.
                    let plan = build_plan(
                        &self.stats,
                        cm,
                        e,
                        &PlanParams {
                            epsilon: cfg.semi.epsilon,
                            gamma_max: gmax,
                            l_repr: cfg.model.hs,
                            forced_lambda: cfg.semi.forced_lambda,
                        },
                    )?;
                    let mut roster = Vec::new();
                    if plan.beta.is_some() {
                        let (rank_s, _) = plan.migration_group[0];
                        let gamma = self.shed_avg[rank_s - 1].min(gmax);
                        if gamma > 0.0 {
                            let beta =
                                solve_beta(cfg.model.hs as f64 * gamma, cm, e)?;
                            if beta > 0.0 {
                                roster.push(ActiveMigration {
                                    straggler: rank_s,
                                    amount: MigAmount::Fraction(gamma * beta),
                                });
                            }
                            if rank_s == rank {
                                self.beta_own = beta;
                                let g_res = gamma * (1.0 - beta);
                                self.gamma_own = g_res;
                                if g_res > 0.0 {
                                    pol.resize = plan_from_state(
                                        &self.prio,
                                        g_res,
                                        gmax,
                                        cfg.imputation,
                                        true,
                                    );
                                }
                            }
                        }
                    } else {
                        for &(k, _) in &plan.migration_group {
                            let f = if plan.lambda == plan.z {
                                self.shed_avg[k - 1]
                            } else {
                                self.shed_min_t[k - 1]
                            };
                            if f > 0.0 {
                                roster.push(ActiveMigration {
                                    straggler: k,
                                    amount: MigAmount::Fraction(f),
                                });
                            }
                        }
                        for &(k, _) in &plan.resize_group {
                            if k == rank {
                                let gamma = if plan.lambda == 0 {
                                    self.shed_avg[k - 1]
                                } else {
                                    self.shed_min_m[k - 1]
                                }
                                .min(gmax);
                                self.gamma_own = gamma;
                                if gamma > 0.0 {
                                    pol.resize = plan_from_state(
                                        &self.prio,
                                        gamma,
                                        gmax,
                                        cfg.imputation,
                                        true,
                                    );
                                }
                            }
                        }
                    }
                    self.lambda = roster.len();
                    pol.migrations = roster;
                }
            }
        }
        self.policy = pol.with_roster(e);
        Ok(())
    }

    /// Epoch-boundary work: refresh the priority statistics against the
    /// epoch-start snapshot, then rebuild the policy.
    fn epoch_boundary(
        &mut self,
        cfg: &ExperimentConfig,
        model: &Model,
        rank: Rank,
        e: usize,
    ) -> Result<(), HarnessError> {
        if cfg.mode.uses_priority() {
            let current = layer_weights(model);
            let weights: Vec<(String, &Matrix, &Matrix)> = current
                .iter()
                .zip(&self.snapshot)
                .map(|((name, w_new), (_, w_old))| (name.clone(), *w_new, w_old))
                .collect();
            epoch_priority_update(
                &mut self.prio,
                &weights,
                self.gamma_own,
                cfg.zero.gamma_max,
                cfg.zero.priority_update,
            )?;
            self.snapshot = current.into_iter().map(|(n, w)| (n, w.clone())).collect();
        }
        if cfg.mode == Mode::ZeroRd {
            self.reseed += 1;
        }
        self.rebuild_policy(cfg, rank, e)
    }
}

fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    let mut correct = 0usize;
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (c, &v) in row.iter().enumerate() {
            if v > best.0 {
                best = (v, c);
            }
        }
        if best.1 + 1 == labels[r] {
            correct += 1;
        }
    }
    correct as f64 / logits.rows() as f64
}

fn run_rank(cfg: &ExperimentConfig, mut ctx: TaskCtx) -> Result<RankOutcome, HarnessError> {
    let rank = ctx.rank();
    let e = ctx.e();
    let mut model = Model::init(cfg.model, rank, cfg.seed)?;
    let ds = SyntheticDataset::new(&cfg.model, &cfg.dataset, cfg.seed);
    let (eval_x, eval_labels) = ds.eval_set(cfg.dataset.eval_size);
    let mut ms = ModeState::new(cfg, &model);
    if cfg.wall_clock {
        ctx.clock.set_wall_scale(Some(1e-7));
    }
    if cfg.mode == Mode::Semi {
        ms.cost_model = Some(pretest_costs(
            PretestDims::from_model(&cfg.model),
            &cfg.semi.sample_gammas,
            cfg.migration.collection,
            cfg.migration.family,
            &mut ctx,
        )?);
    }
    ms.rebuild_policy(cfg, rank, e)?;

    let clock_start = ctx.clock.now();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut audit_prev = ctx.group.audit.clone();
    for epoch in 1..=cfg.epochs {
        ctx.clock.set_chi(cfg.heterogeneity.chi_for(epoch, rank));
        if epoch > 1 {
            ms.epoch_boundary(cfg, &model, rank, e)?;
        }
        let mut busy = 0.0;
        let mut comm_iters = 0.0;
        let mut flops = 0u64;
        let mut loss_sum = 0.0;
        let mut prunes = 0u64;
        let mut imputations = 0u64;
        let mut migrated = 0u64;
        let mut all_reduces = 0u64;
        for iteration in 1..=cfg.iterations {
            let (x, labels) = ds.batch(epoch, iteration, cfg.model.batch_rows());
            let rep = train_iteration(
                &mut model,
                &x,
                &labels,
                &ms.policy,
                &mut ms.iter_state,
                &mut ctx,
            )
            .map_err(|source| HarnessError::Iteration {
                rank,
                epoch,
                iteration,
                source,
            })?;
            ms.stats.record_iteration(rep.t_own, rep.m_own);
            busy += rep.t_own;
            comm_iters += rep.comm_time;
            flops += rep.flops;
            loss_sum += rep.loss;
            prunes += rep.prunes;
            imputations += rep.imputations;
            migrated += rep.migrated_matmuls;
            all_reduces += rep.all_reduces;
            if cfg.mode != Mode::Baseline
                && maybe_refresh_group_stats(&mut ms.stats, &mut ctx)?
            {
                ms.update_trackers();
                ms.rebuild_policy(cfg, rank, e)?;
            }
        }
        let logits = eval_forward(&model, &eval_x, &mut ctx)?;
        let acc = accuracy(&logits, &eval_labels);
        let audit_now = ctx.group.audit.clone();
        records.push(EpochRecord {
            clock_end: ctx.clock.now(),
            busy,
            comm_iters,
            comm_total: audit_now.comm_time - audit_prev.comm_time,
            flops,
            loss_mean: loss_sum / cfg.iterations as f64,
            acc,
            gamma: ms.gamma_own,
            beta: ms.beta_own,
            lambda: ms.lambda,
            prunes,
            imputations,
            migrated_matmuls: migrated,
            all_reduces,
            refreshes: audit_now.stat_refreshes - audit_prev.stat_refreshes,
        });
        audit_prev = audit_now;
    }
    Ok(RankOutcome {
        model,
        clock_start,
        records,
    })
}

/// Run the full experiment and assemble metrics. Deterministic: identical
/// config and seed give identical rows, summaries and final weights.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts, HarnessError> {
    cfg.validate()?;
    let e = cfg.model.e;
    let engine = CollectiveEngine::new(e, cfg.cost);
    let outcomes: Vec<Result<RankOutcome, HarnessError>> = std::thread::scope(|s| {
        let handles: Vec<_> = (1..=e)
            .map(|r| {
                let engine = Arc::clone(&engine);
                s.spawn(move || {
                    let ctx = TaskCtx::new(engine.group(r));
                    let out = run_rank(cfg, ctx);
                    if let Err(err) = &out {
                        engine.abort(r, &err.to_string());
                    }
                    out
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().map_err(|_| HarnessError::WorkerPanic)?)
            .map(Ok)
            .collect::<Vec<_>>()
            .into_iter()
            .map(|r: Result<Result<RankOutcome, HarnessError>, HarnessError>| r?)
            .collect()
    });
    let mut ranks = Vec::with_capacity(e);
    for out in outcomes {
        ranks.push(out?);
    }

    // Epoch RT under synchronized semantics: the slowest rank's clock delta.
    let mut rt = Vec::with_capacity(cfg.epochs);
    let mut prev_max: f64 = ranks.iter().map(|r| r.clock_start).fold(0.0, f64::max);
    for epoch in 0..cfg.epochs {
        let end_max = ranks
            .iter()
            .map(|r| r.records[epoch].clock_end)
            .fold(0.0, f64::max);
        rt.push(end_max - prev_max);
        prev_max = end_max;
    }

    let mut rows = Vec::with_capacity(cfg.epochs * e);
    for epoch in 0..cfg.epochs {
        for (i, rank) in ranks.iter().enumerate() {
            let rec = &rank.records[epoch];
            rows.push(MetricsRow {
                epoch: epoch + 1,
                mode: cfg.mode.as_str().to_string(),
                rank: i + 1,
                rt: rt[epoch],
                compute_t: rec.busy - rec.comm_iters,
                comm_t: rec.comm_total,
                flops: rec.flops,
                gamma: rec.gamma,
                beta: rec.beta,
                lambda: rec.lambda,
                loss: rec.loss_mean,
                acc: rec.acc,
            });
        }
    }

    let audit = ModeAudit {
        prunes: ranks
            .iter()
            .map(|r| r.records.iter().map(|x| x.prunes).sum::<u64>())
            .sum(),
        imputations: ranks
            .iter()
            .map(|r| r.records.iter().map(|x| x.imputations).sum::<u64>())
            .sum(),
        migrated_matmuls: ranks
            .iter()
            .map(|r| r.records.iter().map(|x| x.migrated_matmuls).sum::<u64>())
            .sum(),
        stat_refreshes: ranks
            .iter()
            .map(|r| r.records.iter().map(|x| x.refreshes).sum::<u64>())
            .sum(),
        all_reduces_per_iteration: ranks[0]
            .records
            .first()
            .map(|r| r.all_reduces / cfg.iterations as u64)
            .unwrap_or(0),
    };
    let epochs: Vec<EpochSummary> = (0..cfg.epochs)
        .map(|i| EpochSummary {
            epoch: i + 1,
            rt: rt[i],
            loss: ranks[0].records[i].loss_mean,
            acc: ranks[0].records[i].acc,
            lambda: ranks[0].records[i].lambda,
            nu: cfg.heterogeneity.nu(i + 1, e),
            gammas: ranks.iter().map(|r| r.records[i].gamma).collect(),
        })
        .collect();
    let summary = RunSummary {
        config: cfg.clone(),
        total_rt: rt.iter().sum(),
        final_acc: epochs.last().map(|s| s.acc).unwrap_or(0.0),
        final_loss: epochs.last().map(|s| s.loss).unwrap_or(0.0),
        epochs,
        mode_audit: audit,
    };
    Ok(RunArtifacts {
        rows,
        summary,
        models: ranks.into_iter().map(|r| r.model).collect(),
    })
}
