//! The hybrid balancing controller: pretest-based cost-function fitting,
//! strict straggler detection, the single-straggler resize/migrate split, the
//! multi-straggler group boundary scan, and plan assembly.
//!
//! Planning is pure logic over gathered statistics, executed redundantly and
//! deterministically on every rank.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comm::{Rank, TaskCtx};
use crate::exec::{ActiveMigration, IterState, IterationPolicy};
use crate::matrix::{ImputationPolicy, Matrix};
use crate::migrate::{CollectionMode, MigAmount, PrimitiveFamily};
use crate::model::{ModelConfig, ModelError, SplitMode, TPLinear};
use crate::matrix::IndexSet;
use crate::resize::{gamma_from, ResizeError, TimingStats};

pub use crate::matrix::TensorError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SemiError {
    #[error("cost fit needs at least 2 sample points, got {0}")]
    FitSamples(usize),
    #[error("straggler detection needs a non-empty runtime list")]
    EmptyInput,
    #[error("receiver exhaustion: e - x = 0 during the boundary scan")]
    ReceiverExhaustion,
    #[error("hybrid planning requires e >= 2, got {0}")]
    TooFewTasks(usize),
    #[error(transparent)]
    Resize(#[from] ResizeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Exec(#[from] crate::exec::ExecError),
}

/// Non-decreasing piecewise-linear interpolant through sample points, with
/// linear extrapolation beyond the last segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseLinear {
    points: Vec<(f64, f64)>,
}

impl PiecewiseLinear {
    pub fn fit(mut points: Vec<(f64, f64)>) -> Result<Self, SemiError> {
        points.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        points.dedup_by(|a, b| a.0 == b.0);
        if points.len() < 2 {
            return Err(SemiError::FitSamples(points.len()));
        }
        Ok(Self { points })
    }

    /// Interpolant anchored at (0, 0).
    pub fn fit_through_origin(mut points: Vec<(f64, f64)>) -> Result<Self, SemiError> {
        if !points.iter().any(|(x, _)| *x == 0.0) {
            points.push((0.0, 0.0));
        }
        Self::fit(points)
    }

    pub fn zero() -> Self {
        Self {
            points: vec![(0.0, 0.0), (1.0, 0.0)],
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let pts = &self.points;
        if x <= pts[0].0 {
            let (x0, y0) = pts[0];
            let (x1, y1) = pts[1];
            return y0 + (x - x0) * (y1 - y0) / (x1 - x0);
        }
        for w in pts.windows(2) {
            let (x0, y0) = w[0];
            let (x1, y1) = w[1];
            if x <= x1 {
                return y0 + (x - x0) * (y1 - y0) / (x1 - x0);
            }
        }
        let (x0, y0) = pts[pts.len() - 2];
        let (x1, y1) = pts[pts.len() - 1];
        y1 + (x - x1) * (y1 - y0) / (x1 - x0)
    }

    pub fn is_zero(&self) -> bool {
        self.points.iter().all(|(_, y)| *y == 0.0)
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }
}

/// Fitted per-layer-iteration cost functions: the resize side's constant
/// allocation overhead and extraction cost, and the migration side's
/// communication and helper-compute costs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub omega1: f64,
    /// Extraction cost vs pruned-column count.
    pub omega2: PiecewiseLinear,
    /// Communication cost vs migrated-column count.
    pub phi1: PiecewiseLinear,
    /// Computation cost vs per-helper column count.
    pub phi2: PiecewiseLinear,
}

impl CostModel {
    pub fn is_degenerate(&self) -> bool {
        self.omega1 == 0.0 && self.omega2.is_zero() && self.phi1.is_zero() && self.phi2.is_zero()
    }
}

/// Balance the resize-side and migrate-side costs of shedding `l_gamma`
/// columns: bisection on
/// `omega1 + omega2(l*(1-beta)) = phi1(l*beta) + phi2(l*beta/(e-1))`.
///
/// The left side is non-increasing and the right non-decreasing in `beta`,
/// so a sign change brackets the root; endpoints win otherwise. A fully
/// degenerate cost model returns 1 with a warning (migration is free).
pub fn solve_beta(l_gamma: f64, cm: &CostModel, e: usize) -> Result<f64, SemiError> {
    if e < 2 {
        return Err(SemiError::TooFewTasks(e));
    }
    if cm.is_degenerate() {
        log::warn!("degenerate cost model: all functions zero, defaulting to pure migration");
        return Ok(1.0);
    }
    let h = |beta: f64| -> f64 {
        let resize_cols = l_gamma * (1.0 - beta);
        let mig_cols = l_gamma * beta;
        cm.omega1 + cm.omega2.eval(resize_cols)
            - cm.phi1.eval(mig_cols)
            - cm.phi2.eval(mig_cols / (e - 1) as f64)
    };
    if h(1.0) > 0.0 {
        return Ok(1.0);
    }
    if h(0.0) < 0.0 {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if h(mid) >= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Strict straggler detection over a rank-ordered runtime list.
///
/// Returns the minimum, the stragglers (`T > T_min * (1 + epsilon)`) sorted
/// by descending runtime (rank ascending on ties), and their count.
pub fn detect_stragglers(
    t_list: &[f64],
    epsilon: f64,
) -> Result<(f64, Vec<(Rank, f64)>, usize), SemiError> {
    if t_list.is_empty() {
        return Err(SemiError::EmptyInput);
    }
    let t_min = t_list.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut stragglers: Vec<(Rank, f64)> = t_list
        .iter()
        .enumerate()
        .filter(|(_, &t)| t > t_min * (1.0 + epsilon))
        .map(|(i, &t)| (i + 1, t))
        .collect();
    stragglers.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let z = stragglers.len();
    Ok((t_min, stragglers, z))
}

/// One task's entry in the boundary scan: runtime, current workload in
/// columns, and its per-column processing time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskEntry {
    pub rank: Rank,
    pub t: f64,
    pub l: f64,
    pub speed: f64,
}

/// Total migrated volume if the `x` slowest stragglers offload down to the
/// minimum runtime.
pub fn migration_volume(entries: &[TaskEntry], x: usize, t_min: f64) -> f64 {
    entries[..x]
        .iter()
        .map(|s| s.l * (s.t - t_min) / s.t)
        .sum()
}

/// Cost-effectiveness of migrating the `x` slowest stragglers: the runtime
/// reduction of the x-th one minus the communication cost of the whole
/// migrated volume and the worst added compute among the `e - x` receivers.
pub fn boundary_objective(
    entries: &[TaskEntry],
    x: usize,
    t_min: f64,
    phi1: &PiecewiseLinear,
) -> Result<f64, SemiError> {
    let e = entries.len();
    if x >= e {
        return Err(SemiError::ReceiverExhaustion);
    }
    let gain = entries[x - 1].t - t_min;
    let volume = migration_volume(entries, x, t_min);
    let per_receiver = volume / (e - x) as f64;
    let worst = entries[x..]
        .iter()
        .map(|h| per_receiver * h.speed)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(gain - phi1.eval(volume) - worst)
}

/// Scan `x = 1, 2, ...` while the objective stays positive; the first
/// failure stops the scan. Returns the largest cost-effective prefix length
/// (0 when even the slowest straggler is not worth migrating).
///
/// `entries` holds all `e` tasks sorted by descending runtime; `z` of them
/// are stragglers.
pub fn group_boundary_scan(
    entries: &[TaskEntry],
    z: usize,
    t_min: f64,
    phi1: &PiecewiseLinear,
) -> Result<usize, SemiError> {
    let mut x = 0;
    for k in 1..=z {
        if boundary_objective(entries, k, t_min, phi1)? > 0.0 {
            x = k;
        } else {
            break;
        }
    }
    Ok(x)
}

/// What one rank does under the hybrid plan.
#[derive(Debug, Clone, PartialEq)]
pub enum RankRole {
    Normal,
    /// Migrate this fraction of every layer's migratable width.
    Migrate { fraction: f64 },
    /// Prune with this uniform ratio (differentiated per layer downstream).
    Resize { gamma: f64 },
    /// Single heavy straggler: migrate `gamma * beta`, prune
    /// `gamma * (1 - beta)`.
    Split { gamma: f64, beta: f64 },
}

/// Group-wide allocation decision, derived identically on every rank from
/// refreshed statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridPlan {
    pub z: usize,
    /// Realized migration-group size.
    pub lambda: usize,
    pub beta: Option<f64>,
    pub migration_group: Vec<(Rank, f64)>,
    pub resize_group: Vec<(Rank, f64)>,
}

impl HybridPlan {
    pub fn empty() -> Self {
        Self {
            z: 0,
            lambda: 0,
            beta: None,
            migration_group: vec![],
            resize_group: vec![],
        }
    }

    pub fn role(&self, rank: Rank) -> RankRole {
        if let Some(beta) = self.beta {
            if let Some((_, gamma)) = self.migration_group.iter().find(|(r, _)| *r == rank) {
                return RankRole::Split {
                    gamma: *gamma,
                    beta,
                };
            }
            return RankRole::Normal;
        }
        if let Some((_, f)) = self.migration_group.iter().find(|(r, _)| *r == rank) {
            return RankRole::Migrate { fraction: *f };
        }
        if let Some((_, g)) = self.resize_group.iter().find(|(r, _)| *r == rank) {
            return RankRole::Resize { gamma: *g };
        }
        RankRole::Normal
    }

    /// Migration roster shared by all ranks (the split straggler migrates its
    /// `gamma * beta` share).
    pub fn roster(&self) -> Vec<ActiveMigration> {
        match self.beta {
            Some(beta) => self
                .migration_group
                .iter()
                .map(|&(r, gamma)| ActiveMigration {
                    straggler: r,
                    amount: MigAmount::Fraction(gamma * beta),
                })
                .collect(),
            None => self
                .migration_group
                .iter()
                .map(|&(r, f)| ActiveMigration {
                    straggler: r,
                    amount: MigAmount::Fraction(f),
                })
                .collect(),
        }
    }
}

/// Knobs of the planner.
#[derive(Debug, Clone, Copy)]
pub struct PlanParams {
    pub epsilon: f64,
    pub gamma_max: f64,
    /// Representative layer width for the split equation.
    pub l_repr: usize,
    pub forced_lambda: Option<usize>,
}

/// Assemble the hybrid plan from refreshed statistics.
///
/// - no stragglers: empty plan;
/// - one straggler: split its shed volume between migration and resizing by
///   the cost-balance equation;
/// - several: the boundary scan picks how many of the slowest migrate (to the
///   minimum runtime), the rest resize against the strict minimum criterion.
///
/// Forcing the migration-group size reproduces the manual sweep: the top
/// `lambda` stragglers run the pure-migration policy and the rest the
/// differentiated-resizing policy, so 0 and `z` degrade exactly to those
/// modes.
pub fn build_plan(
    stats: &TimingStats,
    cm: &CostModel,
    e: usize,
    params: &PlanParams,
) -> Result<HybridPlan, SemiError> {
    if e < 2 {
        return Err(SemiError::TooFewTasks(e));
    }
    let group = stats
        .group
        .as_ref()
        .ok_or(ResizeError::NotRefreshed("group stats"))?;
    let t_list: Vec<f64> = group.iter().map(|(t, _)| *t).collect();
    let (t_min, stragglers, z) = detect_stragglers(&t_list, params.epsilon)?;
    if z == 0 {
        return Ok(HybridPlan::empty());
    }
    let t_avg = t_list.iter().sum::<f64>() / e as f64;
    let gamma_avg = |rank: Rank| -> Result<f64, SemiError> {
        let (t, m) = group[rank - 1];
        Ok(gamma_from(t, m, t_avg, params.gamma_max)?)
    };

    if z == 1 && params.forced_lambda.is_none() {
        let (rank, _) = stragglers[0];
        let gamma = gamma_avg(rank)?;
        if gamma == 0.0 {
            return Ok(HybridPlan::empty());
        }
        let beta = solve_beta(params.l_repr as f64 * gamma, cm, e)?;
        return Ok(HybridPlan {
            z,
            lambda: usize::from(beta > 0.0),
            beta: Some(beta),
            migration_group: vec![(rank, gamma)],
            resize_group: vec![],
        });
    }

    let lambda = match params.forced_lambda {
        Some(l) => l.min(z),
        None => {
            // All e tasks sorted by descending runtime; stragglers first.
            let mut entries: Vec<TaskEntry> = t_list
                .iter()
                .enumerate()
                .map(|(i, &t)| TaskEntry {
                    rank: i + 1,
                    t,
                    l: params.l_repr as f64,
                    speed: t / params.l_repr as f64,
                })
                .collect();
            entries.sort_by(|a, b| b.t.partial_cmp(&a.t).unwrap().then(a.rank.cmp(&b.rank)));
            group_boundary_scan(&entries, z, t_min, &cm.phi1)?
        }
    };

    let mut plan = HybridPlan {
        z,
        lambda,
        beta: None,
        migration_group: vec![],
        resize_group: vec![],
    };
    for (pos, &(rank, t)) in stragglers.iter().enumerate() {
        if pos < lambda {
            let fraction = if lambda == z {
                // Pure migration: the standalone policy's volume rule.
                gamma_avg(rank)?
            } else {
                ((t - t_min) / t).clamp(0.0, 1.0)
            };
            plan.migration_group.push((rank, fraction));
        } else {
            let (tt, mm) = group[rank - 1];
            let criterion = if lambda == 0 {
                // Pure resizing: degrade to the average-criterion policy.
                t_avg
            } else {
                t_min
            };
            let gamma = gamma_from(tt, mm, criterion, params.gamma_max)?;
            plan.resize_group.push((rank, gamma));
        }
    }
    Ok(plan)
}

/// Dimensions of the representative layer used by the pretest probes.
#[derive(Debug, Clone, Copy)]
pub struct PretestDims {
    /// Contraction width (columns of the weight shard).
    pub l: usize,
    /// Rows of the weight shard.
    pub r: usize,
    /// Batch rows.
    pub n: usize,
}

impl PretestDims {
    pub fn from_model(cfg: &ModelConfig) -> Self {
        Self {
            l: cfg.hs,
            r: cfg.expansion * cfg.hs / cfg.e,
            n: cfg.batch_rows(),
        }
    }
}

/// Measure the cost functions before training by probing the real machinery
/// in virtual time at each sampled volume.
///
/// The allocation constant comes straight from an allocation probe; the
/// extraction samples subtract it; communication samples run the actual
/// migration collectives group-wide; computation samples time the helper-
/// sized matmuls at the local (pre-skew) rate.
pub fn pretest_costs(
    dims: PretestDims,
    sample_gammas: &[f64],
    collection: CollectionMode,
    family: PrimitiveFamily,
    ctx: &mut TaskCtx,
) -> Result<CostModel, SemiError> {
    if sample_gammas.len() < 2 {
        return Err(SemiError::FitSamples(sample_gammas.len()));
    }
    let mut gammas: Vec<f64> = sample_gammas.to_vec();
    gammas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let layer = TPLinear::new(SplitMode::Column, "pretest", dims.l, dims.r * ctx.e(), ctx.e(), ctx.rank(), 0xC0);
    let x = Matrix::zeros(dims.n, dims.l);

    // Allocation constant: the fixed per-matrix charges of one pruned
    // forward+backward (6 resize allocations).
    let busy0 = measure_busy(ctx, |ctx| {
        for _ in 0..6 {
            ctx.charge_resize(0);
        }
        Ok(())
    })?;
    let omega1 = busy0;

    let mut omega2_pts = Vec::new();
    let mut phi1_pts = Vec::new();
    let mut phi2_pts = Vec::new();
    for &gamma in &gammas {
        let u = ((dims.l as f64 * gamma) + 0.5).floor() as usize;
        let u = u.min(dims.l - 1);
        let v = ((dims.r as f64 * gamma) + 0.5).floor() as usize;

        // Extraction cost at u pruned columns (resize path charges).
        if u > 0 {
            let p = IndexSet::new((1..=u).collect()).expect("ascending");
            let t = measure_busy(ctx, |ctx| {
                let mut lineage = crate::resize::LineageTable::new();
                let lr = crate::resize::LayerResize {
                    gamma,
                    prune: p.clone(),
                };
                let y =
                    crate::resize::pruned_linear_forward(&layer, &x, &lr, &mut lineage, ctx)?;
                let mut history = crate::resize::SameHistory::new();
                crate::resize::pruned_linear_backward(
                    &layer,
                    &x,
                    &y,
                    ImputationPolicy::Zero,
                    &lineage,
                    &mut history,
                    ctx,
                )?;
                Ok(())
            })?;
            let compute = probe_matmul_time(ctx, dims.n, dims.l - u, layer.w_local.rows())?;
            omega2_pts.push((u as f64, (t - compute - omega1).max(0.0)));
        }

        // Communication cost of migrating v columns through the configured
        // primitives (group-wide probe).
        let comm0 = ctx.group.audit.comm_time;
        run_migration_probe(&layer, &x, v, collection, family, ctx)?;
        let comm = ctx.group.audit.comm_time - comm0;
        if v > 0 {
            phi1_pts.push((v as f64, comm));
        }

        // Helper compute for w = v / (e - 1) columns across the three
        // migrated dataflows.
        if ctx.e() > 1 {
            let w = (v as f64 / (ctx.e() - 1) as f64).round() as usize;
            if w > 0 {
                let t = 3.0 * probe_matmul_time(ctx, dims.n, dims.l, w)?;
                phi2_pts.push((w as f64, t));
            }
        }
    }

    Ok(CostModel {
        omega1,
        omega2: PiecewiseLinear::fit_through_origin(omega2_pts)?,
        phi1: PiecewiseLinear::fit_through_origin(phi1_pts)?,
        phi2: if phi2_pts.is_empty() {
            PiecewiseLinear::zero()
        } else {
            PiecewiseLinear::fit_through_origin(phi2_pts)?
        },
    })
}

fn measure_busy<F>(ctx: &mut TaskCtx, f: F) -> Result<f64, SemiError>
where
    F: FnOnce(&mut TaskCtx) -> Result<(), SemiError>,
{
    ctx.clock.begin_iteration();
    f(ctx)?;
    let (busy, _) = ctx.clock.iteration_times();
    Ok(busy)
}

/// Matmul time for an `[n x k] * [k x w]` product at this task's current rate.
fn probe_matmul_time(ctx: &mut TaskCtx, n: usize, k: usize, w: usize) -> Result<f64, SemiError> {
    if n == 0 || k == 0 || w == 0 {
        return Ok(0.0);
    }
    let before = ctx.clock.iteration_times();
    let a = Matrix::zeros(n, k);
    let b = Matrix::zeros(k, w);
    ctx.matmul(&a, &b).map_err(ModelError::Tensor)?;
    let after = ctx.clock.iteration_times();
    Ok(after.1 - before.1)
}

/// Exercise the migration collectives for a `v`-column block rooted at rank 1
/// on dummy data (every rank participates).
fn run_migration_probe(
    layer: &TPLinear,
    x: &Matrix,
    v: usize,
    collection: CollectionMode,
    family: PrimitiveFamily,
    ctx: &mut TaskCtx,
) -> Result<(), SemiError> {
    if v == 0 || ctx.e() < 2 {
        return Ok(());
    }
    let pol = IterationPolicy {
        resize: Default::default(),
        migrations: vec![ActiveMigration {
            straggler: 1,
            amount: MigAmount::Columns(v.min(layer.out_width_local())),
        }],
        eligible: vec![],
        collection,
        family,
    }
    .with_roster(ctx.e());
    let mut st = IterState::new();
    let y = crate::exec::layer_forward(layer, x, &pol, &mut st, ctx)?;
    crate::exec::layer_backward(layer, x, &y, &pol, &mut st, ctx)?;
    Ok(())
}
