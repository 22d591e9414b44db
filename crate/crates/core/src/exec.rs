//! Per-iteration training executor. Composes the plain tensor-parallel
//! dataflow with the per-rank pruning plan and the group-wide migration
//! roster: stragglers broadcast only what helpers lack, helpers compute their
//! assigned column blocks and results return either through a dedicated
//! reduce or by local accumulation ahead of the already-required all-reduce.
//!
//! Every rank executes the same collective sequence (the roster is derived
//! deterministically from shared statistics), so runs are reproducible under
//! any thread scheduling.

use std::collections::BTreeMap;

use crate::comm::{Rank, TaskCtx};
use crate::matrix::{impute_columns, prune_columns, ImputationPolicy, Matrix};
use crate::migrate::{
    plan_migration, CollectionMode, MigAmount, MigrateError, MigrationPlan, PrimitiveFamily,
};
use crate::model::{
    gelu, gelu_derivative, loss_and_grad, sgd_update, tp_linear_backward, tp_linear_forward,
    FFNBlock, Model, ModelError, SavedFFN, SplitMode, TPLinear,
};
use crate::resize::{LineageTable, MatrixName, ResizeError, ResizePlan, SameHistory};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExecError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Resize(#[from] ResizeError),
    #[error(transparent)]
    Migrate(#[from] MigrateError),
}

impl From<crate::matrix::TensorError> for ExecError {
    fn from(e: crate::matrix::TensorError) -> Self {
        ExecError::Model(ModelError::Tensor(e))
    }
}

impl From<crate::comm::CommError> for ExecError {
    fn from(e: crate::comm::CommError) -> Self {
        ExecError::Model(ModelError::Comm(e))
    }
}

/// One straggler's migration decision, shared by every rank.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveMigration {
    pub straggler: Rank,
    pub amount: MigAmount,
}

/// Everything a rank needs to execute one iteration under the current plans.
#[derive(Debug, Clone, Default)]
pub struct IterationPolicy {
    /// This rank's pruning plan (layers absent or empty mean no pruning).
    pub resize: ResizePlan,
    /// Group-wide migration roster, ascending straggler rank.
    pub migrations: Vec<ActiveMigration>,
    /// Ranks eligible to receive migrated work (everyone not migrating).
    pub eligible: Vec<Rank>,
    pub collection: CollectionMode,
    pub family: PrimitiveFamily,
}

impl IterationPolicy {
    pub fn baseline() -> Self {
        Self::default()
    }

    /// Normalize: sort the roster and derive the eligible helper set.
    pub fn with_roster(mut self, e: usize) -> Self {
        self.migrations.sort_by_key(|m| m.straggler);
        self.eligible = (1..=e)
            .filter(|r| !self.migrations.iter().any(|m| m.straggler == *r))
            .collect();
        self
    }

    fn own_amount(&self, rank: Rank) -> Option<MigAmount> {
        self.migrations
            .iter()
            .find(|m| m.straggler == rank)
            .map(|m| m.amount)
    }
}

/// Broadcast data and plans retained for the current iteration only.
#[derive(Debug, Clone)]
struct MigCacheEntry {
    plan: MigrationPlan,
    /// First migrated column in the straggler's local output space.
    mig_start: usize,
    w_mig: Matrix,
    x_mig: Option<Matrix>,
}

/// Mutable per-rank iteration state.
#[derive(Debug, Default)]
pub struct IterState {
    pub lineage: LineageTable,
    pub history: SameHistory,
    mig_cache: BTreeMap<(String, Rank), MigCacheEntry>,
}

impl IterState {
    pub fn new() -> Self {
        Self::default()
    }
}

fn layer_migs(
    layer: &TPLinear,
    pol: &IterationPolicy,
) -> Result<Vec<(Rank, usize)>, MigrateError> {
    let width = layer.out_width_local();
    let mut out = Vec::new();
    for am in &pol.migrations {
        let l_mig = am.amount.resolve(width);
        if l_mig > width {
            return Err(MigrateError::PlanWidth { l_mig, width });
        }
        if l_mig > 0 {
            out.push((am.straggler, l_mig));
        }
    }
    Ok(out)
}

/// Forward through one layer under the active plans. The output has the
/// unpruned local shape in every case.
pub fn layer_forward(
    layer: &TPLinear,
    x_local: &Matrix,
    pol: &IterationPolicy,
    st: &mut IterState,
    ctx: &mut TaskCtx,
) -> Result<Matrix, ExecError> {
    let own_resize = pol.resize.layer(&layer.name).cloned();
    let migs = layer_migs(layer, pol)?;
    if migs.is_empty() {
        return match &own_resize {
            Some(lr) => Ok(crate::resize::pruned_linear_forward(
                layer,
                x_local,
                lr,
                &mut st.lineage,
                ctx,
            )?),
            None => Ok(tp_linear_forward(layer, x_local, ctx)?),
        };
    }

    let me = ctx.rank();
    let e = ctx.e();
    let width = layer.out_width_local();
    let n = x_local.rows();

    // Send phase: the straggler broadcasts the data helpers lack (column
    // mode: migrated weight rows; row mode: its input shard too).
    for &(straggler, l_mig) in &migs {
        let start = width - l_mig;
        let w_payload = (me == straggler).then(|| layer.w_local.slice_rows(start, width));
        let w_mig = ctx.broadcast_as(w_payload, straggler, pol.family.send_pattern())?;
        let x_mig = match layer.mode {
            SplitMode::Row => {
                let xp = (me == straggler).then(|| x_local.clone());
                Some(ctx.broadcast_as(xp, straggler, pol.family.send_pattern())?)
            }
            SplitMode::Column => None,
        };
        let plan = plan_migration(straggler, l_mig, &pol.eligible, e)?;
        st.mig_cache.insert(
            (layer.name.clone(), straggler),
            MigCacheEntry {
                plan,
                mig_start: start,
                w_mig,
                x_mig,
            },
        );
    }

    // Own compute: retained output columns only, pruned if resizing.
    let own_l_mig = pol
        .own_amount(me)
        .map_or(0, |a| a.resolve(width).min(width));
    let retained = width - own_l_mig;
    let mut out = Matrix::zeros(n, width);
    if retained > 0 {
        let w_ret = layer.w_local.slice_rows(0, retained);
        let y = match &own_resize {
            Some(lr) => {
                let u = lr.prune.len() as u64;
                let px = prune_columns(x_local, &lr.prune)?;
                ctx.charge_resize(u * n as u64);
                let pw = prune_columns(&w_ret, &lr.prune)?;
                ctx.charge_resize(u * w_ret.rows() as u64);
                ctx.exec_audit.prunes += 2;
                ctx.matmul(&px, &pw.transpose())?
            }
            None => ctx.matmul(x_local, &w_ret.transpose())?,
        };
        out.set_cols(0, &y);
    }
    if let Some(lr) = &own_resize {
        st.lineage
            .record(&layer.name, MatrixName::Input, lr.prune.clone())?;
        st.lineage
            .record(&layer.name, MatrixName::Weight, lr.prune.clone())?;
    }

    // Helper compute and collection. Merging into the following all-reduce is
    // legal only for the row-mode forward output.
    let use_merged = pol.collection == CollectionMode::Merged && layer.mode == SplitMode::Row;
    for &(straggler, l_mig) in &migs {
        let entry = st.mig_cache[&(layer.name.clone(), straggler)].clone();
        if me == straggler {
            if use_merged {
                // Migrated columns stay zero here; helpers accumulated them
                // locally and the all-reduce completes the sum.
            } else {
                let blk = ctx
                    .reduce_to_root_as(
                        Matrix::zeros(n, l_mig),
                        straggler,
                        pol.family.collect_pattern(),
                    )?
                    .expect("root receives");
                out.set_cols(entry.mig_start, &blk);
            }
        } else {
            let contrib = match entry.plan.assignment_for(me) {
                Some(iv) => {
                    let w_rows = entry.w_mig.slice_rows(iv.start, iv.end);
                    let x_src = entry.x_mig.as_ref().unwrap_or(x_local);
                    let blk = ctx.matmul(x_src, &w_rows.transpose())?;
                    ctx.exec_audit.migrated_matmuls += 1;
                    Some((iv, blk))
                }
                None => None,
            };
            if use_merged {
                if let Some((iv, blk)) = contrib {
                    ctx.charge_light(blk.elems());
                    out.add_cols(entry.mig_start + iv.start, &blk);
                }
            } else {
                let mut padded = Matrix::zeros(n, l_mig);
                if let Some((iv, blk)) = contrib {
                    padded.set_cols(iv.start, &blk);
                }
                ctx.reduce_to_root_as(padded, straggler, pol.family.collect_pattern())?;
            }
        }
    }
    Ok(out)
}

/// Backward through one layer under the active plans. Returns the input-path
/// gradient (all-reduced in column mode) and the local weight gradient.
pub fn layer_backward(
    layer: &TPLinear,
    x_saved: &Matrix,
    g: &Matrix,
    pol: &IterationPolicy,
    st: &mut IterState,
    ctx: &mut TaskCtx,
) -> Result<(Matrix, Matrix), ExecError> {
    let own_resize = pol.resize.layer(&layer.name).cloned();
    let migs = layer_migs(layer, pol)?;
    if migs.is_empty() {
        return match &own_resize {
            Some(_) => Ok(crate::resize::pruned_linear_backward(
                layer,
                x_saved,
                g,
                pol.resize.imputation,
                &st.lineage,
                &mut st.history,
                ctx,
            )?),
            None => Ok(tp_linear_backward(layer, x_saved, g, ctx)?),
        };
    }

    let me = ctx.rank();
    let width = layer.out_width_local();
    let cw = layer.contraction_local();
    let n = x_saved.rows();

    // Send phase: column mode broadcasts the straggler's migrated gradient
    // columns; row mode reuses the forward broadcasts (the upstream gradient
    // is replicated there).
    let mut g_migs: BTreeMap<Rank, Matrix> = BTreeMap::new();
    if layer.mode == SplitMode::Column {
        for &(straggler, l_mig) in &migs {
            let start = width - l_mig;
            let payload = (me == straggler).then(|| g.slice_cols(start, width));
            let g_mig = ctx.broadcast_as(payload, straggler, pol.family.send_pattern())?;
            g_migs.insert(straggler, g_mig);
        }
    }

    // Own grads over retained output columns.
    let own_l_mig = pol
        .own_amount(me)
        .map_or(0, |a| a.resolve(width).min(width));
    let retained = width - own_l_mig;
    let mut grad_w = Matrix::zeros(layer.w_local.rows(), cw);
    let mut gx_partial = Matrix::zeros(n, cw);
    if retained > 0 {
        let g_ret = if own_l_mig > 0 {
            g.slice_cols(0, retained)
        } else {
            g.clone()
        };
        let w_ret = layer.w_local.slice_rows(0, retained);
        match &own_resize {
            Some(_) => {
                let p = st
                    .lineage
                    .lookup(&layer.name, MatrixName::Weight)
                    .ok_or_else(|| ResizeError::LineageMiss {
                        layer: layer.name.clone(),
                        matrix: MatrixName::Weight,
                    })?
                    .clone();
                let u = p.len() as u64;
                let px = prune_columns(x_saved, &p)?;
                ctx.charge_resize(u * n as u64);
                let gw_pruned = ctx.matmul(&g_ret.transpose(), &px)?;
                let gw_ret = impute_columns(&gw_pruned, &p, cw, ImputationPolicy::Zero, None)?;
                ctx.charge_resize(u * gw_ret.rows() as u64);
                grad_w.set_rows(0, &gw_ret);

                let pw = prune_columns(&w_ret, &p)?;
                ctx.charge_resize(u * w_ret.rows() as u64);
                let gx_pruned = ctx.matmul(&g_ret, &pw)?;
                let prev = st.history.get(&layer.name, MatrixName::Input).cloned();
                let policy = pol.resize.imputation;
                gx_partial = match policy {
                    ImputationPolicy::Same if prev.is_none() => {
                        impute_columns(&gx_pruned, &p, cw, ImputationPolicy::Zero, None)?
                    }
                    _ => impute_columns(&gx_pruned, &p, cw, policy, prev.as_ref())?,
                };
                ctx.charge_resize(u * n as u64);
                ctx.exec_audit.prunes += 2;
                ctx.exec_audit.imputations += 2;
                if policy == ImputationPolicy::Same {
                    st.history
                        .store(&layer.name, MatrixName::Input, gx_partial.clone());
                }
            }
            None => {
                grad_w.set_rows(0, &ctx.matmul(&g_ret.transpose(), x_saved)?);
                gx_partial = ctx.matmul(&g_ret, &w_ret)?;
            }
        }
    }

    // Helper grads and collections: the migrated weight-gradient rows return
    // to the straggler explicitly (weights live there); the migrated
    // input-gradient terms merge into the column-mode all-reduce when
    // allowed, otherwise they return by reduce as well.
    let use_merged = pol.collection == CollectionMode::Merged && layer.mode == SplitMode::Column;
    for &(straggler, l_mig) in &migs {
        let entry = st.mig_cache[&(layer.name.clone(), straggler)].clone();
        if me == straggler {
            let gw_blk = ctx
                .reduce_to_root_as(
                    Matrix::zeros(l_mig, cw),
                    straggler,
                    pol.family.collect_pattern(),
                )?
                .expect("root receives");
            grad_w.set_rows(retained, &gw_blk);
            if !use_merged {
                let gx_blk = ctx
                    .reduce_to_root_as(
                        Matrix::zeros(n, cw),
                        straggler,
                        pol.family.collect_pattern(),
                    )?
                    .expect("root receives");
                gx_partial.add_assign(&gx_blk)?;
                ctx.charge_light(gx_partial.elems());
            }
        } else {
            let assignment = entry.plan.assignment_for(me);
            let mut gw_pad = Matrix::zeros(l_mig, cw);
            let mut gx_contrib: Option<Matrix> = None;
            if let Some(iv) = assignment {
                let g_src = match layer.mode {
                    SplitMode::Column => g_migs[&straggler].slice_cols(iv.start, iv.end),
                    SplitMode::Row => {
                        g.slice_cols(entry.mig_start + iv.start, entry.mig_start + iv.end)
                    }
                };
                let x_for_gw = entry.x_mig.as_ref().unwrap_or(x_saved);
                let gw_blk = ctx.matmul(&g_src.transpose(), x_for_gw)?;
                gw_pad.set_rows(iv.start, &gw_blk);
                ctx.exec_audit.migrated_matmuls += 1;
                let w_rows = entry.w_mig.slice_rows(iv.start, iv.end);
                gx_contrib = Some(ctx.matmul(&g_src, &w_rows)?);
                ctx.exec_audit.migrated_matmuls += 1;
            }
            ctx.reduce_to_root_as(gw_pad, straggler, pol.family.collect_pattern())?;
            if use_merged {
                if let Some(blk) = gx_contrib {
                    ctx.charge_light(blk.elems());
                    gx_partial.add_assign(&blk)?;
                }
            } else {
                let payload = gx_contrib.unwrap_or_else(|| Matrix::zeros(n, cw));
                ctx.reduce_to_root_as(payload, straggler, pol.family.collect_pattern())?;
            }
        }
    }

    let gx = match layer.mode {
        SplitMode::Column => ctx.all_reduce_sum(gx_partial)?,
        SplitMode::Row => gx_partial,
    };
    Ok((gx, grad_w))
}

/// Block forward under plans; still exactly one all-reduce.
pub fn ffn_forward_policy(
    block: &FFNBlock,
    x: &Matrix,
    pol: &IterationPolicy,
    st: &mut IterState,
    ctx: &mut TaskCtx,
) -> Result<(Matrix, SavedFFN), ExecError> {
    let y1 = layer_forward(&block.lin1, x, pol, st, ctx)?;
    let a = y1.map(gelu);
    ctx.charge_light(a.elems());
    let y2 = layer_forward(&block.lin2, &a, pol, st, ctx)?;
    let z = ctx.all_reduce_sum(y2)?;
    Ok((
        z,
        SavedFFN {
            x: x.clone(),
            y1,
            a,
        },
    ))
}

/// Block backward under plans; still exactly one all-reduce.
pub fn ffn_backward_policy(
    block: &FFNBlock,
    saved: &SavedFFN,
    g: &Matrix,
    pol: &IterationPolicy,
    st: &mut IterState,
    ctx: &mut TaskCtx,
) -> Result<(Matrix, Matrix, Matrix), ExecError> {
    let (ga, gw2) = layer_backward(&block.lin2, &saved.a, g, pol, st, ctx)?;
    let gy1 = ga.hadamard(&saved.y1.map(gelu_derivative))?;
    ctx.charge_light(gy1.elems());
    let (gx, gw1) = layer_backward(&block.lin1, &saved.x, &gy1, pol, st, ctx)?;
    Ok((gx, gw1, gw2))
}

/// Per-iteration record of what one rank did.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport {
    pub t_own: f64,
    pub m_own: f64,
    pub comm_time: f64,
    pub loss: f64,
    pub flops: u64,
    pub all_reduces: u64,
    pub reduces: u64,
    pub broadcasts: u64,
    pub prunes: u64,
    pub imputations: u64,
    pub migrated_matmuls: u64,
}

/// One full training iteration: forward, loss, backward, SGD update, lineage
/// consumption. Plans are injected via `pol`; baseline mode is the empty
/// policy.
pub fn train_iteration(
    model: &mut Model,
    batch_x: &Matrix,
    labels: &[usize],
    pol: &IterationPolicy,
    st: &mut IterState,
    ctx: &mut TaskCtx,
) -> Result<IterationReport, ExecError> {
    ctx.clock.begin_iteration();
    let flops0 = ctx.counter.flops;
    let audit0 = ctx.group.audit.clone();
    let exec0 = ctx.exec_audit.clone();

    let mut x = batch_x.clone();
    let mut saved = Vec::with_capacity(model.blocks.len());
    for block in &model.blocks {
        let (z, s) = ffn_forward_policy(block, &x, pol, st, ctx)?;
        saved.push(s);
        x = z;
    }
    let logits = model.head_forward(&x, ctx)?;
    let (loss, gl) = loss_and_grad(&logits, labels)?;
    let grad_head = ctx.matmul(&gl.transpose(), &x)?;
    let mut g = ctx.matmul(&gl, &model.head)?;
    let mut grads = Vec::with_capacity(model.blocks.len());
    for (block, s) in model.blocks.iter().zip(&saved).rev() {
        let (gx, gw1, gw2) = ffn_backward_policy(block, s, &g, pol, st, ctx)?;
        grads.push((gw1, gw2));
        g = gx;
    }
    grads.reverse();

    let lr = model.cfg.lr;
    for (block, (gw1, gw2)) in model.blocks.iter_mut().zip(&grads) {
        sgd_update(&mut block.lin1.w_local, gw1, lr)?;
        ctx.charge_light(gw1.elems());
        sgd_update(&mut block.lin2.w_local, gw2, lr)?;
        ctx.charge_light(gw2.elems());
    }
    sgd_update(&mut model.head, &grad_head, lr)?;
    ctx.charge_light(grad_head.elems());

    // The weight update consumed the lineage; broadcast data lives for one
    // iteration only.
    st.lineage.clear();
    st.mig_cache.clear();

    let (t_own, m_own) = ctx.clock.iteration_times();
    let a1 = &ctx.group.audit;
    let x1 = &ctx.exec_audit;
    Ok(IterationReport {
        t_own,
        m_own,
        comm_time: a1.comm_time - audit0.comm_time,
        loss,
        flops: ctx.counter.flops - flops0,
        all_reduces: a1.all_reduce - audit0.all_reduce,
        reduces: (a1.reduce + a1.gather) - (audit0.reduce + audit0.gather),
        broadcasts: (a1.broadcast + a1.scatter) - (audit0.broadcast + audit0.scatter),
        prunes: x1.prunes - exec0.prunes,
        imputations: x1.imputations - exec0.imputations,
        migrated_matmuls: x1.migrated_matmuls - exec0.migrated_matmuls,
    })
}

/// Forward-only pass for evaluation: plain dataflow, no plans, and the clock
/// in free mode so measurement does not perturb runtimes.
pub fn eval_forward(
    model: &Model,
    x: &Matrix,
    ctx: &mut TaskCtx,
) -> Result<Matrix, ExecError> {
    ctx.begin_eval();
    let mut h = x.clone();
    let mut result = Ok(());
    for block in &model.blocks {
        match crate::model::ffn_forward(block, &h, ctx) {
            Ok((z, _)) => h = z,
            Err(e) => {
                result = Err(e);
                break;
            }
        }
    }
    let logits = result.and_then(|_| model.head_forward(&h, ctx));
    ctx.end_eval();
    Ok(logits?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::{CollectiveEngine, CostParams};
    use crate::model::ModelConfig;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;
    use std::thread;

    fn run_ranks<F, T>(e: usize, f: F) -> Vec<T>
    where
        F: Fn(TaskCtx) -> T + Sync,
        T: Send,
    {
        let engine = CollectiveEngine::new(e, CostParams::default());
        thread::scope(|s| {
            let hs: Vec<_> = (1..=e)
                .map(|r| {
                    let engine = Arc::clone(&engine);
                    let f = &f;
                    s.spawn(move || f(TaskCtx::new(engine.group(r))))
                })
                .collect();
            hs.into_iter().map(|h| h.join().unwrap()).collect()
        })
    }

    fn seeded(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::new(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn cfg_e(e: usize) -> ModelConfig {
        ModelConfig {
            depth: 2,
            hs: 12,
            expansion: 2,
            bs: 2,
            sql: 3,
            e,
            lr: 0.05,
            classes: 3,
        }
    }

    fn mig_policy(
        e: usize,
        straggler: Rank,
        amount: MigAmount,
        collection: CollectionMode,
        family: PrimitiveFamily,
    ) -> IterationPolicy {
        IterationPolicy {
            resize: ResizePlan::empty(),
            migrations: vec![ActiveMigration { straggler, amount }],
            eligible: vec![],
            collection,
            family,
        }
        .with_roster(e)
    }

    /// Run `iters` iterations at degree `e` under `pol`, returning each
    /// rank's final model and report.
    fn train_under(
        e: usize,
        iters: usize,
        pol: IterationPolicy,
    ) -> Vec<(Model, IterationReport)> {
        run_ranks(e, |mut ctx| {
            let cfg = cfg_e(e);
            let mut model = Model::init(cfg, ctx.rank(), 99).unwrap();
            let mut st = IterState::new();
            let mut last = None;
            for i in 0..iters {
                let x = seeded(cfg.batch_rows(), cfg.hs, 1000 + i as u64);
                let labels: Vec<usize> = (0..cfg.batch_rows())
                    .map(|j| 1 + (j + i) % cfg.classes)
                    .collect();
                let rep =
                    train_iteration(&mut model, &x, &labels, &pol, &mut st, &mut ctx).unwrap();
                last = Some(rep);
            }
            (model, last.unwrap())
        })
    }

    fn weights_close(a: &[(Model, IterationReport)], b: &[(Model, IterationReport)], tol: f64) {
        for ((ma, _), (mb, _)) in a.iter().zip(b) {
            for (ba, bb) in ma.blocks.iter().zip(&mb.blocks) {
                let d1 = ba.lin1.w_local.max_abs_diff(&bb.lin1.w_local);
                let d2 = ba.lin2.w_local.max_abs_diff(&bb.lin2.w_local);
                assert!(d1 <= tol && d2 <= tol, "weight drift {d1} / {d2} > {tol}");
            }
            assert!(ma.head.max_abs_diff(&mb.head) <= tol);
        }
    }

    #[test]
    fn migration_is_lossless_explicit_and_merged() {
        let e = 3;
        let baseline = train_under(e, 4, IterationPolicy::baseline());
        for collection in [CollectionMode::Explicit, CollectionMode::Merged] {
            let migrated = train_under(
                e,
                4,
                mig_policy(
                    e,
                    1,
                    MigAmount::Fraction(0.5),
                    collection,
                    PrimitiveFamily::BroadcastReduce,
                ),
            );
            weights_close(&baseline, &migrated, 1e-12);
        }
    }

    #[test]
    fn merged_equals_explicit_bitwise_tolerance() {
        let e = 4;
        let a = train_under(
            e,
            5,
            mig_policy(
                e,
                2,
                MigAmount::Fraction(0.5),
                CollectionMode::Explicit,
                PrimitiveFamily::BroadcastReduce,
            ),
        );
        let b = train_under(
            e,
            5,
            mig_policy(
                e,
                2,
                MigAmount::Fraction(0.5),
                CollectionMode::Merged,
                PrimitiveFamily::BroadcastReduce,
            ),
        );
        weights_close(&a, &b, 1e-12);
    }

    #[test]
    fn scatter_gather_baseline_same_results_higher_cost() {
        let e = 4;
        let fast = train_under(
            e,
            3,
            mig_policy(
                e,
                1,
                MigAmount::Fraction(0.5),
                CollectionMode::Explicit,
                PrimitiveFamily::BroadcastReduce,
            ),
        );
        let slow = train_under(
            e,
            3,
            mig_policy(
                e,
                1,
                MigAmount::Fraction(0.5),
                CollectionMode::Explicit,
                PrimitiveFamily::ScatterGather,
            ),
        );
        weights_close(&fast, &slow, 0.0);
        // Identical arithmetic, strictly larger modeled comm time.
        assert!(fast[0].1.t_own < slow[0].1.t_own);
    }

    #[test]
    fn full_migration_offloads_everything() {
        let e = 3;
        let baseline = train_under(e, 3, IterationPolicy::baseline());
        let migrated = train_under(
            e,
            3,
            mig_policy(
                e,
                2,
                MigAmount::Fraction(1.0),
                CollectionMode::Explicit,
                PrimitiveFamily::BroadcastReduce,
            ),
        );
        weights_close(&baseline, &migrated, 1e-12);
    }

    #[test]
    fn single_column_migration_works() {
        let e = 4;
        let baseline = train_under(e, 2, IterationPolicy::baseline());
        let migrated = train_under(
            e,
            2,
            mig_policy(
                e,
                3,
                MigAmount::Columns(1),
                CollectionMode::Merged,
                PrimitiveFamily::BroadcastReduce,
            ),
        );
        weights_close(&baseline, &migrated, 1e-12);
    }

    #[test]
    fn zero_migration_equals_baseline_exactly() {
        let e = 2;
        let baseline = train_under(e, 2, IterationPolicy::baseline());
        let zeroed = train_under(
            e,
            2,
            mig_policy(
                e,
                1,
                MigAmount::Columns(0),
                CollectionMode::Explicit,
                PrimitiveFamily::BroadcastReduce,
            ),
        );
        weights_close(&baseline, &zeroed, 0.0);
        assert_eq!(zeroed[0].1.broadcasts, 0);
        assert_eq!(zeroed[0].1.reduces, 0);
    }

    #[test]
    fn straggler_matmul_flops_drop_by_migrated_fraction() {
        let e = 4;
        let base = train_under(e, 1, IterationPolicy::baseline());
        let mig = train_under(
            e,
            1,
            mig_policy(
                e,
                1,
                MigAmount::Fraction(0.5),
                CollectionMode::Merged,
                PrimitiveFamily::BroadcastReduce,
            ),
        );
        let f_base = base[0].1.flops as f64;
        let f_mig = mig[0].1.flops as f64;
        // Straggler sheds the block matmuls (head work stays); expect a
        // reduction close to half of the block share.
        assert!(
            f_mig < 0.62 * f_base,
            "straggler flops {f_mig} vs baseline {f_base}"
        );
        // Helpers picked up extra work.
        assert!(mig[1].1.flops > base[1].1.flops);
        assert_eq!(mig[0].1.migrated_matmuls, 0);
        assert!(mig[1].1.migrated_matmuls > 0);
    }

    #[test]
    fn merged_skips_the_standalone_reduce() {
        let e = 3;
        let explicit = train_under(
            e,
            1,
            mig_policy(
                e,
                1,
                MigAmount::Fraction(0.5),
                CollectionMode::Explicit,
                PrimitiveFamily::BroadcastReduce,
            ),
        );
        let merged = train_under(
            e,
            1,
            mig_policy(
                e,
                1,
                MigAmount::Fraction(0.5),
                CollectionMode::Merged,
                PrimitiveFamily::BroadcastReduce,
            ),
        );
        // Two mergeable sites per block (row forward output, column backward
        // input gradient), depth 2 -> 4 fewer reduce ops.
        assert_eq!(explicit[0].1.reduces - merged[0].1.reduces, 4);
        assert_eq!(explicit[0].1.all_reduces, merged[0].1.all_reduces);
    }

    #[test]
    fn baseline_policy_runs_zero_resize_and_migration_ops() {
        let reports = train_under(2, 2, IterationPolicy::baseline());
        for (_, rep) in &reports {
            assert_eq!(rep.prunes, 0);
            assert_eq!(rep.imputations, 0);
            assert_eq!(rep.migrated_matmuls, 0);
            assert_eq!(rep.all_reduces, 2 * 2); // 2 per block per iteration
        }
    }

    #[test]
    fn resize_policy_composes_with_migration() {
        // The straggler both prunes and migrates; run must complete and keep
        // shapes consistent, with helpers unaffected by the pruning.
        let e = 3;
        let outs = run_ranks(e, |mut ctx| {
            let cfg = cfg_e(e);
            let mut model = Model::init(cfg, ctx.rank(), 7).unwrap();
            let mut st = IterState::new();
            let mut resize = ResizePlan::empty();
            if ctx.rank() == 1 {
                for block in 0..cfg.depth {
                    for (name, lcols) in [
                        (format!("ffn{block}.lin1"), cfg.hs),
                        (format!("ffn{block}.lin2"), cfg.expansion * cfg.hs / e),
                    ] {
                        let prune = crate::resize::select_smallest(
                            &vec![0.0; lcols],
                            lcols / 4,
                        );
                        resize.layers.insert(
                            name,
                            crate::resize::LayerResize { gamma: 0.25, prune },
                        );
                    }
                }
            }
            let pol = IterationPolicy {
                resize,
                migrations: vec![ActiveMigration {
                    straggler: 1,
                    amount: MigAmount::Fraction(0.25),
                }],
                eligible: vec![],
                collection: CollectionMode::Merged,
                family: PrimitiveFamily::BroadcastReduce,
            }
            .with_roster(e);
            let x = seeded(cfg.batch_rows(), cfg.hs, 5);
            let labels: Vec<usize> =
                (0..cfg.batch_rows()).map(|j| 1 + j % cfg.classes).collect();
            train_iteration(&mut model, &x, &labels, &pol, &mut st, &mut ctx).unwrap()
        });
        assert!(outs[0].prunes > 0);
        assert!(outs[0].imputations > 0);
        assert_eq!(outs[1].prunes, 0);
        assert!(outs[1].migrated_matmuls > 0);
    }

    #[test]
    fn eval_forward_is_free_and_identical_across_ranks() {
        let e = 2;
        let outs = run_ranks(e, |mut ctx| {
            let cfg = cfg_e(e);
            let model = Model::init(cfg, ctx.rank(), 31).unwrap();
            let x = seeded(cfg.batch_rows(), cfg.hs, 77);
            let before = ctx.clock.now();
            let logits = eval_forward(&model, &x, &mut ctx).unwrap();
            assert_eq!(ctx.clock.now(), before);
            logits
        });
        assert!(outs[0].max_abs_diff(&outs[1]) == 0.0);
    }
}
