//! Deterministic desk-scale simulator and library for 1D tensor-parallel
//! training under heterogeneous compute.
//!
//! The crate provides:
//!
//! - [`matrix`]: dense matrix arithmetic plus column pruning / imputation
//!   kernels and FLOP accounting;
//! - [`comm`]: an in-process multi-task communicator with a virtual clock and
//!   an alpha-beta communication cost model;
//! - [`model`]: column/row-split tensor-parallel linear layers, FFN blocks, a
//!   toy classification head and SGD;
//! - [`resize`]: dynamic matrix resizing — straggler self-detection, pruning
//!   ratios, dual pruning with imputation and lineage, priority selection;
//! - [`migrate`]: lossless broadcast-reduce workload migration with virtual
//!   renumbering and reduce-merging;
//! - [`exec`]: the per-iteration training executor that composes the above;
//! - [`semi`]: the hybrid allocator — cost-function pretesting, the
//!   resize/migrate split and the multi-straggler group boundary scan;
//! - [`harness`]: configuration, synthetic data, heterogeneity schedules,
//!   experiment orchestration and metrics emission.

pub mod comm;
pub mod exec;
pub mod harness;
pub mod matrix;
pub mod migrate;
pub mod model;
pub mod resize;
pub mod semi;

pub use comm::{
    estimate_comm_time, CollectiveEngine, CommAudit, CommError, CommGroup, CommPattern,
    ConcatAxis, CostParams, Rank, TaskCtx, VirtualClock,
};
pub use matrix::{
    column_delta, impute_columns, matmul, prune_columns, ImputationPolicy, IndexSet, Matrix,
    TensorError, WorkCounter,
};
