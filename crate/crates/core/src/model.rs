//! 1D tensor-parallel model substrate: column- and row-split linear layers,
//! FFN blocks (column layer first, row layer second, so each block needs one
//! all-reduce per direction), a replicated classification head, softmax
//! cross-entropy and SGD.
//!
//! Weight shards are sliced from a full matrix generated per layer from the
//! run seed, so the concatenation of all shards reconstructs the dense weight
//! and runs at different parallel degrees stay comparable.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comm::{CommError, Rank, TaskCtx};
use crate::matrix::{Matrix, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("config invariant violated: {0}")]
    InvalidConfig(String),
    #[error("{ctx}: expected {expected_rows}x{expected_cols}, got {rows}x{cols}")]
    Shape {
        ctx: &'static str,
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error("label {label} out of range 1..={classes}")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Comm(#[from] CommError),
}

/// Model and batch dimensions.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of stacked FFN blocks.
    pub depth: usize,
    /// Hidden size.
    pub hs: usize,
    /// Inner width multiplier of each FFN.
    #[serde(default = "default_expansion")]
    pub expansion: usize,
    pub bs: usize,
    pub sql: usize,
    /// Tensor-parallel degree.
    pub e: usize,
    pub lr: f64,
    pub classes: usize,
}

fn default_expansion() -> usize {
    4
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("depth", self.depth),
            ("hs", self.hs),
            ("expansion", self.expansion),
            ("bs", self.bs),
            ("sql", self.sql),
            ("e", self.e),
            ("classes", self.classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.hs % self.e != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "hs {} not divisible by e {}",
                self.hs, self.e
            )));
        }
        if self.expansion * self.hs % self.e != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "expansion*hs {} not divisible by e {}",
                self.expansion * self.hs,
                self.e
            )));
        }
        if !(self.lr >= 0.0) {
            return Err(ModelError::InvalidConfig("lr must be >= 0".into()));
        }
        Ok(())
    }

    /// Flattened batch rows: 3D `[bs, sql, h]` tensors are stored `[bs*sql x h]`.
    pub fn batch_rows(&self) -> usize {
        self.bs * self.sql
    }
}

/// Split orientation of a TP linear layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    /// Output dimension split: shard is `[d_out/e x d_in]`, input replicated.
    Column,
    /// Input dimension split: shard is `[d_out x d_in/e]`, input sharded.
    Row,
}

/// One rank's shard of a tensor-parallel linear layer (`y = x * W^T`).
#[derive(Debug, Clone)]
pub struct TPLinear {
    pub mode: SplitMode,
    pub w_local: Matrix,
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub e: usize,
    pub rank: Rank,
}

/// Deterministic full weight: uniform in [-1/sqrt(d_in), +1/sqrt(d_in)].
fn full_weight(d_out: usize, d_in: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (d_in as f64).sqrt();
    let data: Vec<f64> = (0..d_out * d_in)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Matrix::new(d_out, d_in, data).expect("dims checked")
}

impl TPLinear {
    pub fn new(
        mode: SplitMode,
        name: impl Into<String>,
        d_in: usize,
        d_out: usize,
        e: usize,
        rank: Rank,
        seed: u64,
    ) -> Self {
        let full = full_weight(d_out, d_in, seed);
        let w_local = match mode {
            SplitMode::Column => {
                let shard = d_out / e;
                full.slice_rows((rank - 1) * shard, rank * shard)
            }
            SplitMode::Row => {
                let shard = d_in / e;
                full.slice_cols((rank - 1) * shard, rank * shard)
            }
        };
        Self {
            mode,
            w_local,
            name: name.into(),
            d_in,
            d_out,
            e,
            rank,
        }
    }

    /// Width of this rank's slice of the layer output.
    pub fn out_width_local(&self) -> usize {
        match self.mode {
            SplitMode::Column => self.d_out / self.e,
            SplitMode::Row => self.d_out,
        }
    }

    /// Contraction width seen by this rank's matmul (`w_local.cols`).
    pub fn contraction_local(&self) -> usize {
        self.w_local.cols()
    }

    fn check_input(&self, x: &Matrix) -> Result<(), ModelError> {
        if x.cols() != self.contraction_local() {
            return Err(ModelError::Shape {
                ctx: "linear input",
                expected_rows: x.rows(),
                expected_cols: self.contraction_local(),
                rows: x.rows(),
                cols: x.cols(),
            });
        }
        Ok(())
    }
}

/// Local forward slice: no communication in either mode. Column mode returns
/// the rank's output shard; row mode returns the full-width partial product
/// that the FFN later combines with one all-reduce.
pub fn tp_linear_forward(
    layer: &TPLinear,
    x_local: &Matrix,
    ctx: &mut TaskCtx,
) -> Result<Matrix, ModelError> {
    layer.check_input(x_local)?;
    Ok(ctx.matmul(x_local, &layer.w_local.transpose())?)
}

/// Backward through one shard: `grad_w = g^T * x_saved`; the input gradient
/// is all-reduced in column mode (the shards' contributions sum) and stays
/// local in row mode (it is the rank's input-shard gradient).
pub fn tp_linear_backward(
    layer: &TPLinear,
    x_saved: &Matrix,
    g: &Matrix,
    ctx: &mut TaskCtx,
) -> Result<(Matrix, Matrix), ModelError> {
    layer.check_input(x_saved)?;
    if g.cols() != layer.out_width_local() || g.rows() != x_saved.rows() {
        return Err(ModelError::Shape {
            ctx: "upstream gradient",
            expected_rows: x_saved.rows(),
            expected_cols: layer.out_width_local(),
            rows: g.rows(),
            cols: g.cols(),
        });
    }
    let grad_w = ctx.matmul(&g.transpose(), x_saved)?;
    let grad_x_partial = ctx.matmul(g, &layer.w_local)?;
    let grad_x = match layer.mode {
        SplitMode::Column => ctx.all_reduce_sum(grad_x_partial)?,
        SplitMode::Row => grad_x_partial,
    };
    Ok((grad_x, grad_w))
}

/// GeLU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Exact analytic derivative of the tanh-approximated GeLU.
pub fn gelu_derivative(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// One FFN block: column-split expansion, GeLU, row-split contraction.
#[derive(Debug, Clone)]
pub struct FFNBlock {
    pub lin1: TPLinear,
    pub lin2: TPLinear,
}

impl FFNBlock {
    pub fn new(index: usize, cfg: &ModelConfig, rank: Rank, seed: u64) -> Self {
        let inner = cfg.expansion * cfg.hs;
        let lin1 = TPLinear::new(
            SplitMode::Column,
            format!("ffn{index}.lin1"),
            cfg.hs,
            inner,
            cfg.e,
            rank,
            crate::harness::derive_seed(seed, &[1, index as u64, 1]),
        );
        let lin2 = TPLinear::new(
            SplitMode::Row,
            format!("ffn{index}.lin2"),
            inner,
            cfg.hs,
            cfg.e,
            rank,
            crate::harness::derive_seed(seed, &[1, index as u64, 2]),
        );
        debug_assert_eq!(lin1.out_width_local(), lin2.contraction_local());
        Self { lin1, lin2 }
    }
}

/// Activations retained by a block forward for its backward pass.
#[derive(Debug, Clone)]
pub struct SavedFFN {
    /// Block input (replicated).
    pub x: Matrix,
    /// Column-layer output shard, pre-activation.
    pub y1: Matrix,
    /// Post-activation shard (row-layer input).
    pub a: Matrix,
}

/// Plain block forward; exactly one all-reduce (the row layer's collection).
pub fn ffn_forward(
    block: &FFNBlock,
    x: &Matrix,
    ctx: &mut TaskCtx,
) -> Result<(Matrix, SavedFFN), ModelError> {
    let y1 = tp_linear_forward(&block.lin1, x, ctx)?;
    let a = y1.map(gelu);
    ctx.charge_light(a.elems());
    let y2 = tp_linear_forward(&block.lin2, &a, ctx)?;
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

/// Plain block backward; exactly one all-reduce (the column layer's input
/// gradient). The upstream gradient of the block output is already replicated
/// because the forward all-reduce's backward is an identity broadcast.
pub fn ffn_backward(
    block: &FFNBlock,
    saved: &SavedFFN,
    g: &Matrix,
    ctx: &mut TaskCtx,
) -> Result<(Matrix, Matrix, Matrix), ModelError> {
    let (ga, gw2) = tp_linear_backward(&block.lin2, &saved.a, g, ctx)?;
    let gy1 = ga.hadamard(&saved.y1.map(gelu_derivative))?;
    ctx.charge_light(gy1.elems());
    let (gx, gw1) = tp_linear_backward(&block.lin1, &saved.x, &gy1, ctx)?;
    Ok((gx, gw1, gw2))
}

/// Mean softmax cross-entropy over rows; labels are 1-based.
pub fn loss_and_grad(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix), ModelError> {
    let n = logits.rows();
    let classes = logits.cols();
    if labels.len() != n {
        return Err(ModelError::Shape {
            ctx: "labels",
            expected_rows: n,
            expected_cols: 1,
            rows: labels.len(),
            cols: 1,
        });
    }
    for &l in labels {
        if l < 1 || l > classes {
            return Err(ModelError::LabelOutOfRange { label: l, classes });
        }
    }
    let mut grad = Matrix::zeros(n, classes);
    let mut loss = 0.0;
    for r in 0..n {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::MIN, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let target = labels[r] - 1;
        loss += -(exps[target] / sum).ln();
        for c in 0..classes {
            let p = exps[c] / sum;
            let y = if c == target { 1.0 } else { 0.0 };
            grad.set(r, c, (p - y) / n as f64);
        }
    }
    Ok((loss / n as f64, grad))
}

/// `w <- w - lr * grad`.
pub fn sgd_update(w: &mut Matrix, grad: &Matrix, lr: f64) -> Result<(), ModelError> {
    if !w.same_shape(grad) {
        return Err(ModelError::Shape {
            ctx: "sgd gradient",
            expected_rows: w.rows(),
            expected_cols: w.cols(),
            rows: grad.rows(),
            cols: grad.cols(),
        });
    }
    w.sub_scaled(grad, lr)?;
    Ok(())
}

/// One rank's model state: the FFN stack plus a replicated dense head.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub blocks: Vec<FFNBlock>,
    /// `[classes x hs]`, identical on every rank.
    pub head: Matrix,
}

impl Model {
    pub fn init(cfg: ModelConfig, rank: Rank, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let blocks = (0..cfg.depth)
            .map(|i| FFNBlock::new(i, &cfg, rank, seed))
            .collect();
        let head = full_weight(
            cfg.classes,
            cfg.hs,
            crate::harness::derive_seed(seed, &[2, 0, 0]),
        );
        Ok(Self { cfg, blocks, head })
    }

    /// Head forward (replicated dense layer, no communication).
    pub fn head_forward(&self, x: &Matrix, ctx: &mut TaskCtx) -> Result<Matrix, ModelError> {
        Ok(ctx.matmul(x, &self.head.transpose())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::{CollectiveEngine, CostParams};
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

    fn seeded_input(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::new(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn column_forward_concat_matches_dense() {
        let (d_in, d_out, n) = (8, 12, 5);
        let x = seeded_input(n, d_in, 3);
        let dense = {
            let layer = TPLinear::new(SplitMode::Column, "l", d_in, d_out, 1, 1, 77);
            let mut ctx = single_ctx();
            tp_linear_forward(&layer, &x, &mut ctx).unwrap()
        };
        let shards = run_ranks(2, |mut ctx| {
            let layer = TPLinear::new(SplitMode::Column, "l", d_in, d_out, 2, ctx.rank(), 77);
            tp_linear_forward(&layer, &x, &mut ctx).unwrap()
        });
        let cat = Matrix::concat_cols(&[&shards[0], &shards[1]]).unwrap();
        assert!(cat.max_abs_diff(&dense) < 1e-12);
    }

    fn single_ctx() -> TaskCtx {
        let engine = CollectiveEngine::new(1, CostParams::default());
        TaskCtx::new(engine.group(1))
    }

    #[test]
    fn shard_shapes_follow_the_split() {
        // X [bs*sql x hs] with column weight shard [hs/e x hs] gives
        // output [bs*sql x hs/e].
        let (hs, e, n) = (16, 4, 6);
        let layer = TPLinear::new(SplitMode::Column, "l", hs, hs, e, 2, 5);
        assert_eq!(layer.w_local.rows(), hs / e);
        assert_eq!(layer.w_local.cols(), hs);
        let x = seeded_input(n, hs, 9);
        let mut ctx = single_ctx();
        let y = tp_linear_forward(&layer, &x, &mut ctx).unwrap();
        assert_eq!((y.rows(), y.cols()), (n, hs / e));
    }

    #[test]
    fn row_mode_partials_sum_to_dense() {
        let (d_in, d_out, n) = (8, 6, 4);
        let full_x = seeded_input(n, d_in, 21);
        let dense = {
            let layer = TPLinear::new(SplitMode::Row, "l", d_in, d_out, 1, 1, 88);
            let mut ctx = single_ctx();
            tp_linear_forward(&layer, &full_x, &mut ctx).unwrap()
        };
        let outs = run_ranks(2, |mut ctx| {
            let r = ctx.rank();
            let layer = TPLinear::new(SplitMode::Row, "l", d_in, d_out, 2, r, 88);
            let shard = full_x.slice_cols((r - 1) * d_in / 2, r * d_in / 2);
            let part = tp_linear_forward(&layer, &shard, &mut ctx).unwrap();
            ctx.all_reduce_sum(part).unwrap()
        });
        for o in outs {
            assert!(o.max_abs_diff(&dense) < 1e-12);
        }
    }

    #[test]
    fn ffn_forward_uses_exactly_one_all_reduce() {
        let cfg = ModelConfig {
            depth: 1,
            hs: 8,
            expansion: 2,
            bs: 2,
            sql: 2,
            e: 2,
            lr: 0.1,
            classes: 2,
        };
        let counts = run_ranks(2, |mut ctx| {
            let block = FFNBlock::new(0, &cfg, ctx.rank(), 11);
            let x = seeded_input(cfg.batch_rows(), cfg.hs, 13);
            let before = ctx.group.audit.all_reduce;
            ffn_forward(&block, &x, &mut ctx).unwrap();
            ctx.group.audit.all_reduce - before
        });
        assert_eq!(counts, vec![1, 1]);
    }

    #[test]
    fn depth24_iteration_counts_48_all_reduces() {
        let cfg = ModelConfig {
            depth: 24,
            hs: 4,
            expansion: 2,
            bs: 1,
            sql: 2,
            e: 2,
            lr: 0.1,
            classes: 2,
        };
        let counts = run_ranks(2, |mut ctx| {
            let blocks: Vec<FFNBlock> = (0..cfg.depth)
                .map(|i| FFNBlock::new(i, &cfg, ctx.rank(), 17))
                .collect();
            let x0 = seeded_input(cfg.batch_rows(), cfg.hs, 19);
            let mut x = x0;
            let mut saved = Vec::new();
            for b in &blocks {
                let (z, s) = ffn_forward(b, &x, &mut ctx).unwrap();
                saved.push(s);
                x = z;
            }
            let mut g = Matrix::zeros(cfg.batch_rows(), cfg.hs);
            g.set(0, 0, 1.0);
            for (b, s) in blocks.iter().zip(&saved).rev() {
                let (gx, _, _) = ffn_backward(b, s, &g, &mut ctx).unwrap();
                g = gx;
            }
            ctx.group.audit.all_reduce
        });
        assert_eq!(counts, vec![48, 48]);
    }

    #[test]
    fn ffn_zero_upstream_gradient_gives_zero_grads() {
        let cfg = ModelConfig {
            depth: 1,
            hs: 8,
            expansion: 2,
            bs: 2,
            sql: 1,
            e: 1,
            lr: 0.1,
            classes: 2,
        };
        let mut ctx = single_ctx();
        let block = FFNBlock::new(0, &cfg, 1, 3);
        let x = seeded_input(2, 8, 5);
        let (_, saved) = ffn_forward(&block, &x, &mut ctx).unwrap();
        let g = Matrix::zeros(2, 8);
        let (gx, gw1, gw2) = ffn_backward(&block, &saved, &g, &mut ctx).unwrap();
        assert_eq!(gx.max_abs(), 0.0);
        assert_eq!(gw1.max_abs(), 0.0);
        assert_eq!(gw2.max_abs(), 0.0);
    }

    #[test]
    fn uniform_logits_loss_is_ln_classes() {
        let logits = Matrix::zeros(3, 4);
        let (loss, _) = loss_and_grad(&logits, &[1, 2, 3]).unwrap();
        assert!((loss - (4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn two_class_gradient_hand_case() {
        // N=1, classes=2, logits [0,0], label 1 -> G = [-0.5, 0.5]
        let logits = Matrix::zeros(1, 2);
        let (_, g) = loss_and_grad(&logits, &[1]).unwrap();
        assert!((g.get(0, 0) + 0.5).abs() < 1e-12);
        assert!((g.get(0, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range_errors() {
        let logits = Matrix::zeros(1, 2);
        assert_eq!(
            loss_and_grad(&logits, &[3]).unwrap_err(),
            ModelError::LabelOutOfRange { label: 3, classes: 2 }
        );
        assert!(loss_and_grad(&logits, &[0]).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut logits = seeded_input(3, 4, 33);
        let labels = [2, 4, 1];
        let (_, g) = loss_and_grad(&logits, &labels).unwrap();
        let h = 1e-6;
        for r in 0..3 {
            for c in 0..4 {
                let orig = logits.get(r, c);
                logits.set(r, c, orig + h);
                let (lp, _) = loss_and_grad(&logits, &labels).unwrap();
                logits.set(r, c, orig - h);
                let (lm, _) = loss_and_grad(&logits, &labels).unwrap();
                logits.set(r, c, orig);
                let num = (lp - lm) / (2.0 * h);
                assert!(
                    (num - g.get(r, c)).abs() <= 1e-6 * num.abs().max(1.0),
                    "({r},{c}): numeric {num} vs analytic {}",
                    g.get(r, c)
                );
            }
        }
    }

    #[test]
    fn sgd_hand_cases() {
        let mut w = Matrix::from_rows(&[vec![1.0]]);
        let g = Matrix::from_rows(&[vec![2.0]]);
        sgd_update(&mut w, &g, 0.5).unwrap();
        assert_eq!(w.get(0, 0), 0.0);

        let mut w2 = Matrix::from_rows(&[vec![3.0]]);
        sgd_update(&mut w2, &g, 0.0).unwrap();
        assert_eq!(w2.get(0, 0), 3.0);

        let zero = Matrix::zeros(1, 1);
        let mut w3 = Matrix::from_rows(&[vec![4.0]]);
        sgd_update(&mut w3, &zero, 0.7).unwrap();
        assert_eq!(w3.get(0, 0), 4.0);
    }

    #[test]
    fn gelu_derivative_matches_finite_differences() {
        for &x in &[-3.0, -1.0, -0.1, 0.0, 0.5, 2.0, 4.0] {
            let h = 1e-6;
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!(
                (num - gelu_derivative(x)).abs() < 1e-8,
                "x={x}: {num} vs {}",
                gelu_derivative(x)
            );
        }
    }

    #[test]
    fn shards_reconstruct_full_weight_across_degrees() {
        let (d_in, d_out) = (8, 12);
        for mode in [SplitMode::Column, SplitMode::Row] {
            let dense = TPLinear::new(mode, "l", d_in, d_out, 1, 1, 55).w_local;
            for e in [2usize, 4] {
                let shards: Vec<Matrix> = (1..=e)
                    .map(|r| TPLinear::new(mode, "l", d_in, d_out, e, r, 55).w_local)
                    .collect();
                let refs: Vec<&Matrix> = shards.iter().collect();
                let rebuilt = match mode {
                    SplitMode::Column => Matrix::concat_rows(&refs).unwrap(),
                    SplitMode::Row => Matrix::concat_cols(&refs).unwrap(),
                };
                assert_eq!(rebuilt, dense);
            }
        }
    }
}
