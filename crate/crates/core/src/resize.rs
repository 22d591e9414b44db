//! Dynamic matrix resizing: straggler self-detection from timing statistics,
//! pruning-ratio computation, dual pruning with consistency-preserving
//! imputation and lineage, and priority selection with incremental updates
//! and differentiated per-layer ratios.
//!
//! All state here is task-local; the only cross-task interaction is the
//! on-demand statistics refresh.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comm::{CommError, TaskCtx};
use crate::matrix::{
    column_delta, impute_columns, prune_columns, ImputationPolicy, IndexSet, Matrix, TensorError,
};
use crate::model::{tp_linear_backward, tp_linear_forward, ModelError, SplitMode, TPLinear};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ResizeError {
    #[error("no matmul baseline: M_own is zero, cannot derive a pruning ratio")]
    NoMatmulBaseline,
    #[error("group statistics not refreshed yet ({0} unavailable)")]
    NotRefreshed(&'static str),
    #[error("lineage miss: no entry for layer {layer} matrix {matrix:?}")]
    LineageMiss { layer: String, matrix: MatrixName },
    #[error("duplicate lineage entry for layer {layer} matrix {matrix:?}")]
    LineageDuplicate { layer: String, matrix: MatrixName },
    #[error("priority state corrupted for layer {layer}: column count changed {was} -> {now}")]
    StateCorruption {
        layer: String,
        was: usize,
        now: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Straggling criterion for the pruning-ratio formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GammaCriterion {
    /// Group average runtime.
    Avg,
    /// Group minimum runtime (the strict criterion used by the hybrid plan).
    Min,
}

/// Per-task timing statistics feeding the ratio formulas.
///
/// `t_own`/`m_own` come from the local clock each iteration; the group
/// aggregates refresh only through the on-demand collective.
#[derive(Debug, Clone, Default)]
pub struct TimingStats {
    pub t_own: f64,
    pub m_own: f64,
    pub t_avg: Option<f64>,
    pub t_min: Option<f64>,
    /// Rank-ordered (T, M) pairs from the last refresh.
    pub group: Option<Vec<(f64, f64)>>,
    last_refreshed_t: Option<f64>,
    refresh_threshold: f64,
}

impl TimingStats {
    pub fn new(refresh_threshold: f64) -> Self {
        Self {
            refresh_threshold,
            ..Self::default()
        }
    }

    pub fn record_iteration(&mut self, t_own: f64, m_own: f64) {
        debug_assert!(m_own <= t_own + 1e-12);
        self.t_own = t_own;
        self.m_own = m_own;
    }

    /// True when the local runtime drifted beyond the threshold since the
    /// last refresh (always true before the first one).
    pub fn wants_refresh(&self) -> bool {
        match self.last_refreshed_t {
            None => true,
            Some(last) => {
                if last == 0.0 {
                    self.t_own != 0.0
                } else {
                    (self.t_own - last).abs() / last > self.refresh_threshold
                }
            }
        }
    }

    pub fn apply_refresh(&mut self, group: Vec<(f64, f64)>) {
        let e = group.len() as f64;
        self.t_avg = Some(group.iter().map(|(t, _)| t).sum::<f64>() / e);
        self.t_min = Some(group.iter().map(|(t, _)| *t).fold(f64::INFINITY, f64::min));
        self.group = Some(group);
        self.last_refreshed_t = Some(self.t_own);
    }

    pub fn criterion_value(&self, criterion: GammaCriterion) -> Result<f64, ResizeError> {
        match criterion {
            GammaCriterion::Avg => self.t_avg.ok_or(ResizeError::NotRefreshed("T_avg")),
            GammaCriterion::Min => self.t_min.ok_or(ResizeError::NotRefreshed("T_min")),
        }
    }

    pub fn t_list(&self) -> Result<Vec<f64>, ResizeError> {
        Ok(self
            .group
            .as_ref()
            .ok_or(ResizeError::NotRefreshed("T list"))?
            .iter()
            .map(|(t, _)| *t)
            .collect())
    }
}

/// Core of the ratio formula on explicit values:
/// `clamp((t - criterion) / m, 0, gamma_max)`.
pub fn gamma_from(t: f64, m: f64, criterion_value: f64, gamma_max: f64) -> Result<f64, ResizeError> {
    if m <= 0.0 {
        return Err(ResizeError::NoMatmulBaseline);
    }
    Ok(((t - criterion_value) / m).clamp(0.0, gamma_max))
}

/// Uniform pruning ratio for this task under the given criterion.
pub fn compute_gamma(
    stats: &TimingStats,
    criterion: GammaCriterion,
    gamma_max: f64,
) -> Result<f64, ResizeError> {
    let c = stats.criterion_value(criterion)?;
    gamma_from(stats.t_own, stats.m_own, c, gamma_max)
}

/// On-demand group statistics refresh.
///
/// Every rank calls this once per iteration end; a zero-cost rendezvous ORs
/// the local drift triggers, and only when some rank triggered does the group
/// pay for a real collective (one all-gather of the (T, M) pairs, from which
/// every rank derives the average, the minimum and the full list). Returns
/// whether a refresh happened.
pub fn maybe_refresh_group_stats(
    stats: &mut TimingStats,
    ctx: &mut TaskCtx,
) -> Result<bool, ResizeError> {
    let fire = ctx.vote(stats.wants_refresh())?;
    if fire {
        refresh_group_stats(stats, ctx)?;
    }
    Ok(fire)
}

/// Unconditional refresh (used by the rendezvous and the pretest).
pub fn refresh_group_stats(stats: &mut TimingStats, ctx: &mut TaskCtx) -> Result<(), ResizeError> {
    let ts = ctx.all_gather_scalar(stats.t_own)?;
    let ms = ctx.all_gather_scalar(stats.m_own)?;
    ctx.group.audit.stat_refreshes += 1;
    stats.apply_refresh(ts.into_iter().zip(ms).collect());
    Ok(())
}

/// Which operand a lineage entry covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MatrixName {
    Input,
    Weight,
}

/// Per-iteration record of pruned index sets, keyed by (layer, matrix);
/// cleared after the weight update consumes it.
#[derive(Debug, Clone, Default)]
pub struct LineageTable {
    entries: BTreeMap<(String, MatrixName), IndexSet>,
}

impl LineageTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(
        &mut self,
        layer: &str,
        matrix: MatrixName,
        p: IndexSet,
    ) -> Result<(), ResizeError> {
        let key = (layer.to_string(), matrix);
        if self.entries.contains_key(&key) {
            return Err(ResizeError::LineageDuplicate {
                layer: layer.to_string(),
                matrix,
            });
        }
        self.entries.insert(key, p);
        Ok(())
    }

    pub fn lookup(&self, layer: &str, matrix: MatrixName) -> Option<&IndexSet> {
        self.entries.get(&(layer.to_string(), matrix))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// Per-layer slice of the priority state.
#[derive(Debug, Clone)]
pub struct LayerPriority {
    /// Carried per-column variation values, length `l_cols`.
    pub w_var: Vec<f64>,
    /// Columns currently slated for pruning, ascending.
    pub pri_list: IndexSet,
    /// Variation-derived ratio from the last epoch update (before the
    /// uniform-floor max).
    pub gamma_var: f64,
    pub l_cols: usize,
    pub r_rows: usize,
}

/// Weight-variation bookkeeping across epochs, plus the knobs of the
/// priority scheme.
#[derive(Debug, Clone)]
pub struct PriorityState {
    pub layers: BTreeMap<String, LayerPriority>,
    /// Per-iteration micro-threshold.
    pub theta_iter: f64,
    /// Decay factor applied to the uniform ratio floor.
    pub alpha: f64,
    /// Iterations per epoch; the variation threshold is `n_iter * theta_iter`.
    pub n_iter: usize,
}

impl PriorityState {
    pub fn new(theta_iter: f64, alpha: f64, n_iter: usize) -> Self {
        Self {
            layers: BTreeMap::new(),
            theta_iter,
            alpha,
            n_iter,
        }
    }

    pub fn theta(&self) -> f64 {
        self.n_iter as f64 * self.theta_iter
    }
}

/// Statistics update rule at epoch boundaries. `Full` recomputes every
/// column's variation and exists to demonstrate the re-pruning feedback loop
/// it causes; `Incremental` preserves the carried values of columns that were
/// pruned last epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum UpdateRule {
    #[default]
    Incremental,
    Full,
}

/// Per-layer resize decision for the current iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerResize {
    pub gamma: f64,
    pub prune: IndexSet,
}

/// A task's pruning plan: per-layer ratios and index sets plus the
/// imputation policy.
#[derive(Debug, Clone, Default)]
pub struct ResizePlan {
    pub gamma_uniform: f64,
    pub layers: BTreeMap<String, LayerResize>,
    pub imputation: ImputationPolicy,
}

impl ResizePlan {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.values().all(|l| l.prune.is_empty())
    }

    pub fn layer(&self, name: &str) -> Option<&LayerResize> {
        self.layers.get(name).filter(|l| !l.prune.is_empty())
    }
}

/// Round-half-up count of columns to prune, never the full width.
pub fn prune_count(l_cols: usize, gamma: f64) -> usize {
    let n = (l_cols as f64 * gamma + 0.5).floor() as usize;
    n.min(l_cols.saturating_sub(1))
}

/// Pick `n` columns with the smallest carried variation, ties broken by
/// ascending index; the result is ascending.
pub fn select_smallest(w_var: &[f64], n: usize) -> IndexSet {
    let mut order: Vec<usize> = (0..w_var.len()).collect();
    order.sort_by(|&a, &b| {
        w_var[a]
            .partial_cmp(&w_var[b])
            .unwrap()
            .then(a.cmp(&b))
    });
    IndexSet::new(order.into_iter().take(n).map(|i| i + 1).collect()).expect("distinct indices")
}

/// Epoch-boundary priority update over all layers.
///
/// Per layer: compute fresh per-column variations against the previous
/// epoch's weights, carry the previous values for columns that were in the
/// last pri_list (incremental rule), derive the variation ratio from the
/// count of columns above the threshold, floor it by `alpha * gamma_uniform`,
/// and select the smallest-variation columns for the new pri_list.
pub fn epoch_priority_update(
    ps: &mut PriorityState,
    weights: &[(String, &Matrix, &Matrix)],
    gamma_uniform: f64,
    gamma_max: f64,
    rule: UpdateRule,
) -> Result<ResizePlan, ResizeError> {
    let theta = ps.theta();
    let mut plan = ResizePlan {
        gamma_uniform,
        ..ResizePlan::default()
    };
    for (name, w_new, w_old) in weights {
        let fresh = column_delta(w_new, w_old)?;
        let l_cols = fresh.len();
        let carried = match (rule, ps.layers.get(name.as_str())) {
            (UpdateRule::Incremental, Some(prev)) => {
                if prev.l_cols != l_cols {
                    return Err(ResizeError::StateCorruption {
                        layer: name.clone(),
                        was: prev.l_cols,
                        now: l_cols,
                    });
                }
                let mut merged = fresh;
                for &idx in prev.pri_list.indices() {
                    merged[idx - 1] = prev.w_var[idx - 1];
                }
                merged
            }
            _ => fresh,
        };
        let l_uni = carried.iter().filter(|&&d| d > theta).count();
        let gamma_var = 1.0 - l_uni as f64 / l_cols as f64;
        let gamma_k = gamma_var.max(ps.alpha * gamma_uniform).clamp(0.0, gamma_max);
        let n = prune_count(l_cols, gamma_k);
        let pri_list = select_smallest(&carried, n);
        plan.layers.insert(
            name.clone(),
            LayerResize {
                gamma: gamma_k,
                prune: pri_list.clone(),
            },
        );
        ps.layers.insert(
            name.clone(),
            LayerPriority {
                w_var: carried,
                pri_list,
                gamma_var,
                l_cols,
                r_rows: w_new.rows(),
            },
        );
    }
    Ok(plan)
}

/// Rebuild a plan from existing priority state, e.g. when the uniform ratio
/// moved mid-epoch (the selection order is reused, only the counts change).
///
/// `differentiated` applies the per-layer variation ratio with the
/// `alpha * gamma_uniform` floor; otherwise every layer uses the uniform
/// ratio directly.
pub fn plan_from_state(
    ps: &PriorityState,
    gamma_uniform: f64,
    gamma_max: f64,
    imputation: ImputationPolicy,
    differentiated: bool,
) -> ResizePlan {
    let mut plan = ResizePlan {
        gamma_uniform,
        imputation,
        ..ResizePlan::default()
    };
    for (name, lp) in &ps.layers {
        let gamma_k = if differentiated {
            lp.gamma_var.max(ps.alpha * gamma_uniform)
        } else {
            gamma_uniform
        }
        .clamp(0.0, gamma_max);
        let n = prune_count(lp.l_cols, gamma_k);
        plan.layers.insert(
            name.clone(),
            LayerResize {
                gamma: gamma_k,
                prune: select_smallest(&lp.w_var, n),
            },
        );
    }
    plan
}

/// Seed a fresh priority state with the given layer dimensions; columns start
/// at infinite variation so nothing looks converged before real statistics
/// exist.
pub fn init_priority_layers(ps: &mut PriorityState, dims: &[(String, usize, usize)]) {
    for (name, l_cols, r_rows) in dims {
        ps.layers.insert(
            name.clone(),
            LayerPriority {
                w_var: vec![f64::INFINITY; *l_cols],
                pri_list: IndexSet::empty(),
                gamma_var: 0.0,
                l_cols: *l_cols,
                r_rows: *r_rows,
            },
        );
    }
}

/// History of previous full matrices for Same-policy imputation, kept only
/// while that policy is active.
#[derive(Debug, Clone, Default)]
pub struct SameHistory {
    prev: BTreeMap<(String, MatrixName), Matrix>,
}

impl SameHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, layer: &str, matrix: MatrixName) -> Option<&Matrix> {
        self.prev.get(&(layer.to_string(), matrix))
    }

    pub fn store(&mut self, layer: &str, matrix: MatrixName, m: Matrix) {
        self.prev.insert((layer.to_string(), matrix), m);
    }
}

/// Dual-pruned forward: remove the plan's columns from the contraction
/// dimension of both the local input and the local weight shard, multiply,
/// and record the lineage. The output keeps the unpruned shape.
pub fn pruned_linear_forward(
    layer: &TPLinear,
    x_local: &Matrix,
    lr: &LayerResize,
    lineage: &mut LineageTable,
    ctx: &mut TaskCtx,
) -> Result<Matrix, ResizeError> {
    if lr.prune.is_empty() {
        return Ok(tp_linear_forward(layer, x_local, ctx)?);
    }
    let u = lr.prune.len() as u64;
    let px = prune_columns(x_local, &lr.prune)?;
    ctx.charge_resize(u * x_local.rows() as u64);
    let pw = prune_columns(&layer.w_local, &lr.prune)?;
    ctx.charge_resize(u * layer.w_local.rows() as u64);
    ctx.exec_audit.prunes += 2;
    lineage.record(&layer.name, MatrixName::Input, lr.prune.clone())?;
    lineage.record(&layer.name, MatrixName::Weight, lr.prune.clone())?;
    Ok(ctx.matmul(&px, &pw.transpose())?)
}

/// Dual-pruned backward. The upstream gradient is never pruned; the weight
/// gradient is computed against the pruned input and re-expanded with zeros
/// at the pruned positions via the lineage (so surviving column gradients
/// land on the right weight columns), and the input gradient is computed
/// against the pruned weight and imputed back to full width by the plan's
/// policy. Column mode ends with the usual all-reduce.
pub fn pruned_linear_backward(
    layer: &TPLinear,
    x_saved: &Matrix,
    g: &Matrix,
    policy: ImputationPolicy,
    lineage: &LineageTable,
    history: &mut SameHistory,
    ctx: &mut TaskCtx,
) -> Result<(Matrix, Matrix), ResizeError> {
    let p = lineage
        .lookup(&layer.name, MatrixName::Weight)
        .ok_or_else(|| ResizeError::LineageMiss {
            layer: layer.name.clone(),
            matrix: MatrixName::Weight,
        })?
        .clone();
    if p.is_empty() {
        return Ok(tp_linear_backward(layer, x_saved, g, ctx)?);
    }
    let full = layer.contraction_local();
    let u = p.len() as u64;

    let px = prune_columns(x_saved, &p)?;
    ctx.charge_resize(u * x_saved.rows() as u64);
    let gw_pruned = ctx.matmul(&g.transpose(), &px)?;
    let gw = impute_columns(&gw_pruned, &p, full, ImputationPolicy::Zero, None)?;
    ctx.charge_resize(u * gw.rows() as u64);

    let pw = prune_columns(&layer.w_local, &p)?;
    ctx.charge_resize(u * layer.w_local.rows() as u64);
    let gx_pruned = ctx.matmul(g, &pw)?;
    let prev = history.get(&layer.name, MatrixName::Input).cloned();
    let gx_local = match policy {
        ImputationPolicy::Same if prev.is_none() => {
            // No history yet (first pruned iteration): fall back to zeros.
            impute_columns(&gx_pruned, &p, full, ImputationPolicy::Zero, None)?
        }
        _ => impute_columns(&gx_pruned, &p, full, policy, prev.as_ref())?,
    };
    ctx.charge_resize(u * gx_local.rows() as u64);
    ctx.exec_audit.prunes += 2;
    ctx.exec_audit.imputations += 2;
    if policy == ImputationPolicy::Same {
        history.store(&layer.name, MatrixName::Input, gx_local.clone());
    }

    let gx = match layer.mode {
        SplitMode::Column => ctx.all_reduce_sum(gx_local)?,
        SplitMode::Row => gx_local,
    };
    Ok((gx, gw))
}
