//! In-process multi-task communicator: blocking collectives over mailboxes,
//! a deterministic virtual clock, and an alpha-beta communication cost model.
//!
//! Tasks are logical execution contexts, one per TP rank (1-based), usually
//! mapped onto OS threads. The only cross-task state is the engine's round
//! mailbox; every collective is a full barrier for the group and folds
//! contributions in ascending rank order, so results and clocks are
//! bit-identical across runs regardless of thread scheduling.

use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{Matrix, WorkCounter};

/// 1-based task id.
pub type Rank = usize;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CommError {
    #[error("collective shape disagreement: rank {rank} passed {rows}x{cols}, rank {other_rank} passed {other_rows}x{other_cols}")]
    CollectiveShape {
        rank: Rank,
        rows: usize,
        cols: usize,
        other_rank: Rank,
        other_rows: usize,
        other_cols: usize,
    },
    #[error("collective op mismatch: rank {rank} entered {mine} while the round is {current}")]
    OpMismatch {
        rank: Rank,
        mine: String,
        current: String,
    },
    #[error("invalid root rank {root} for group of {e}")]
    InvalidRoot { root: Rank, e: usize },
    #[error("collective deadlock: ranks {absent:?} never entered (round {round})")]
    Deadlock { absent: Vec<Rank>, round: u64 },
    #[error("rank {rank} aborted: {reason}")]
    Aborted { rank: Rank, reason: String },
    #[error("payload type mismatch in collective fold")]
    PayloadType,
}

/// Cost model parameters; arbitrary but documented units, only ratios matter.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CostParams {
    /// Link latency per transfer round, in time units.
    pub alpha: f64,
    /// Inverse bandwidth, time units per byte.
    pub beta_net: f64,
    /// FLOPs per time unit per task.
    pub compute_rate: f64,
    /// Elements per time unit for resize copies and other light work.
    pub copy_rate: f64,
    /// Fixed time per matrix allocation on the resize path.
    pub alloc_overhead: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta_net: 1e-3,
            compute_rate: 1e6,
            copy_rate: 1e7,
            alloc_overhead: 0.01,
        }
    }
}

/// Communication pattern for the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommPattern {
    Broadcast,
    Reduce,
    Scatter,
    Gather,
    AllReduce,
    AllGather,
}

fn ceil_log2(e: usize) -> u32 {
    debug_assert!(e >= 1);
    usize::BITS - (e - 1).leading_zeros()
}

/// Alpha-beta time estimate for moving `bytes` under `pattern` in a group of
/// `e` tasks.
///
/// Tree patterns (broadcast/reduce) complete in `ceil(log2 e)` rounds of
/// `alpha + bytes*beta`; all-reduce is modeled as reduce-to-root plus
/// broadcast; all-gather uses recursive doubling (`bytes` is the per-rank
/// input). Scatter/gather charge the single root for `e-1` serial transfer
/// round-trips, `2*alpha + bytes*beta` each.
pub fn estimate_comm_time(bytes: u64, pattern: CommPattern, e: usize, p: &CostParams) -> f64 {
    if e <= 1 {
        return 0.0;
    }
    let b = bytes as f64 * p.beta_net;
    let rounds = ceil_log2(e) as f64;
    match pattern {
        CommPattern::Broadcast | CommPattern::Reduce => rounds * (p.alpha + b),
        CommPattern::AllReduce => 2.0 * rounds * (p.alpha + b),
        CommPattern::AllGather => rounds * p.alpha + (e - 1) as f64 * b,
        CommPattern::Scatter | CommPattern::Gather => (e - 1) as f64 * (2.0 * p.alpha + b),
    }
}

/// Per-task simulated clock.
///
/// `now` is the synchronized timeline (collectives pull every member to the
/// group maximum plus the modeled transfer time). The per-iteration busy and
/// matmul accumulators feed the straggler statistics: waiting at a barrier is
/// not busy time, compute and modeled transfer time are.
#[derive(Debug, Clone)]
pub struct VirtualClock {
    now: f64,
    busy_iter: f64,
    matmul_iter: f64,
    compute_rate: f64,
    copy_rate: f64,
    chi: f64,
    free: bool,
    wall_scale: Option<f64>,
}

impl VirtualClock {
    pub fn new(params: &CostParams) -> Self {
        Self {
            now: 0.0,
            busy_iter: 0.0,
            matmul_iter: 0.0,
            compute_rate: params.compute_rate,
            copy_rate: params.copy_rate,
            chi: 1.0,
            free: false,
            wall_scale: None,
        }
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    /// Straggling skewness multiplier applied to matmul time; `chi >= 1`.
    pub fn set_chi(&mut self, chi: f64) {
        assert!(chi >= 1.0);
        self.chi = chi;
    }

    pub fn chi(&self) -> f64 {
        self.chi
    }

    /// Enable real sleeping scaled from virtual units (non-gating demo mode).
    pub fn set_wall_scale(&mut self, secs_per_unit: Option<f64>) {
        self.wall_scale = secs_per_unit;
    }

    /// Suspend all charging (used while evaluating held-out accuracy).
    pub fn set_free(&mut self, free: bool) {
        self.free = free;
    }

    pub fn begin_iteration(&mut self) {
        self.busy_iter = 0.0;
        self.matmul_iter = 0.0;
    }

    /// `(T_own, M_own)` for the iteration so far.
    pub fn iteration_times(&self) -> (f64, f64) {
        (self.busy_iter, self.matmul_iter)
    }

    pub fn charge_matmul(&mut self, flops: u64) {
        if self.free {
            return;
        }
        let dt = flops as f64 / self.compute_rate * self.chi;
        self.now += dt;
        self.busy_iter += dt;
        self.matmul_iter += dt;
        if let Some(scale) = self.wall_scale {
            std::thread::sleep(Duration::from_secs_f64(dt * scale));
        }
    }

    /// Light elementwise work (activation, optimizer step, resize copies);
    /// not chi-scaled.
    pub fn charge_copy(&mut self, elems: u64) {
        if self.free {
            return;
        }
        let dt = elems as f64 / self.copy_rate;
        self.now += dt;
        self.busy_iter += dt;
    }

    pub fn charge_alloc(&mut self, overhead: f64) {
        if self.free {
            return;
        }
        self.now += overhead;
        self.busy_iter += overhead;
    }

    fn sync_comm(&mut self, sync_to: f64, comm: f64) {
        debug_assert!(sync_to + comm >= self.now);
        self.now = sync_to + comm;
        self.busy_iter += comm;
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Payload {
    Mat(Matrix),
    Scalar(f64),
    Scalars(Vec<f64>),
    Flag(bool),
    Empty,
}

/// Concatenation axis for all-gather.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConcatAxis {
    Rows,
    Cols,
}

#[derive(Debug, Clone, PartialEq)]
enum OpSig {
    AllReduceSum { free: bool },
    AllGatherConcat { axis: ConcatAxis, free: bool },
    Broadcast { root: Rank, pattern: CommPattern },
    ReduceToRoot { root: Rank, pattern: CommPattern },
    AllGatherScalar,
    Vote,
}

impl OpSig {
    fn name(&self) -> String {
        format!("{self:?}")
    }
}

#[derive(Debug, PartialEq)]
enum Phase {
    Collecting,
    Distributing,
}

struct Round {
    phase: Phase,
    seq: u64,
    op: Option<OpSig>,
    inputs: Vec<Option<Payload>>,
    clocks: Vec<f64>,
    arrived: usize,
    outputs: Vec<Option<Payload>>,
    sync_to: f64,
    comm_time: f64,
    bytes: u64,
    taken: usize,
    failed: Option<CommError>,
}

/// Shared collective mailbox for one group of `e` tasks.
pub struct CollectiveEngine {
    e: usize,
    params: CostParams,
    timeout: Duration,
    state: Mutex<Round>,
    cv: Condvar,
}

impl CollectiveEngine {
    pub fn new(e: usize, params: CostParams) -> Arc<Self> {
        Self::with_timeout(e, params, Duration::from_secs(20))
    }

    pub fn with_timeout(e: usize, params: CostParams, timeout: Duration) -> Arc<Self> {
        assert!(e >= 1);
        Arc::new(Self {
            e,
            params,
            timeout,
            state: Mutex::new(Round {
                phase: Phase::Collecting,
                seq: 0,
                op: None,
                inputs: vec![None; e],
                clocks: vec![0.0; e],
                arrived: 0,
                outputs: vec![None; e],
                sync_to: 0.0,
                comm_time: 0.0,
                bytes: 0,
                taken: 0,
                failed: None,
            }),
            cv: Condvar::new(),
        })
    }

    pub fn e(&self) -> usize {
        self.e
    }

    pub fn params(&self) -> &CostParams {
        &self.params
    }

    /// Handle for one rank; each task owns exactly one.
    pub fn group(self: &Arc<Self>, rank: Rank) -> CommGroup {
        assert!(rank >= 1 && rank <= self.e, "rank {rank} out of 1..={}", self.e);
        CommGroup {
            rank,
            e: self.e,
            engine: Arc::clone(self),
            audit: CommAudit::default(),
        }
    }

    /// Poison the current and all future rounds; wakes every waiter.
    pub fn abort(&self, rank: Rank, reason: &str) {
        let mut st = self.state.lock().unwrap();
        if st.failed.is_none() {
            st.failed = Some(CommError::Aborted {
                rank,
                reason: reason.to_string(),
            });
        }
        self.cv.notify_all();
    }

    fn poison(&self, st: &mut Round, err: CommError) {
        if st.failed.is_none() {
            st.failed = Some(err);
        }
        self.cv.notify_all();
    }

    fn execute(
        &self,
        rank: Rank,
        sig: OpSig,
        payload: Payload,
        clock_now: f64,
    ) -> Result<(Payload, f64, f64, u64), CommError> {
        if self.e == 1 {
            return single_task_result(&sig, payload).map(|p| (p, clock_now, 0.0, 0));
        }
        let mut st = self.state.lock().unwrap();
        let deadline = Instant::now() + self.timeout;

        // Wait for the next collecting phase.
        loop {
            if let Some(err) = &st.failed {
                return Err(err.clone());
            }
            if st.phase == Phase::Collecting && st.inputs[rank - 1].is_none() {
                break;
            }
            let (g, res) = self
                .cv
                .wait_timeout(st, remaining(deadline))
                .unwrap();
            st = g;
            if res.timed_out() {
                let err = CommError::Deadlock {
                    absent: vec![],
                    round: st.seq,
                };
                self.poison(&mut st, err.clone());
                return Err(err);
            }
        }

        // Deposit.
        match &st.op {
            None => st.op = Some(sig.clone()),
            Some(cur) if *cur != sig => {
                let err = CommError::OpMismatch {
                    rank,
                    mine: sig.name(),
                    current: cur.name(),
                };
                self.poison(&mut st, err.clone());
                return Err(err);
            }
            _ => {}
        }
        st.inputs[rank - 1] = Some(payload);
        st.clocks[rank - 1] = clock_now;
        st.arrived += 1;

        if st.arrived == self.e {
            // Last arriver folds.
            let op = st.op.clone().unwrap();
            let inputs: Vec<Payload> =
                st.inputs.iter_mut().map(|s| s.take().unwrap()).collect();
            match fold(&op, &inputs, self.e, &self.params) {
                Ok((outs, comm, bytes)) => {
                    st.outputs = outs.into_iter().map(Some).collect();
                    st.sync_to = st.clocks.iter().cloned().fold(f64::MIN, f64::max);
                    st.comm_time = comm;
                    st.bytes = bytes;
                    st.phase = Phase::Distributing;
                    st.taken = 0;
                    self.cv.notify_all();
                }
                Err(err) => {
                    self.poison(&mut st, err.clone());
                    return Err(err);
                }
            }
        } else {
            // Wait for the fold.
            loop {
                if let Some(err) = &st.failed {
                    return Err(err.clone());
                }
                if st.phase == Phase::Distributing && st.outputs[rank - 1].is_some() {
                    break;
                }
                let (g, res) = self
                    .cv
                    .wait_timeout(st, remaining(deadline))
                    .unwrap();
                st = g;
                if res.timed_out() {
                    let absent: Vec<Rank> = st
                        .inputs
                        .iter()
                        .enumerate()
                        .filter(|(_, v)| v.is_none())
                        .map(|(i, _)| i + 1)
                        .collect();
                    let err = CommError::Deadlock {
                        absent,
                        round: st.seq,
                    };
                    self.poison(&mut st, err.clone());
                    return Err(err);
                }
            }
        }

        let out = st.outputs[rank - 1].take().unwrap();
        let (sync_to, comm, bytes) = (st.sync_to, st.comm_time, st.bytes);
        st.taken += 1;
        if st.taken == self.e {
            st.phase = Phase::Collecting;
            st.seq += 1;
            st.op = None;
            st.arrived = 0;
            st.clocks.iter_mut().for_each(|c| *c = 0.0);
            self.cv.notify_all();
        }
        Ok((out, sync_to, comm, bytes))
    }
}

fn remaining(deadline: Instant) -> Duration {
    deadline.saturating_duration_since(Instant::now()).max(Duration::from_millis(1))
}

fn single_task_result(sig: &OpSig, payload: Payload) -> Result<Payload, CommError> {
    Ok(match sig {
        OpSig::AllGatherScalar => match payload {
            Payload::Scalar(x) => Payload::Scalars(vec![x]),
            _ => return Err(CommError::PayloadType),
        },
        OpSig::Vote => payload,
        _ => payload,
    })
}

fn fold(
    op: &OpSig,
    inputs: &[Payload],
    e: usize,
    params: &CostParams,
) -> Result<(Vec<Payload>, f64, u64), CommError> {
    let mats = |inputs: &[Payload]| -> Result<Vec<Matrix>, CommError> {
        inputs
            .iter()
            .map(|p| match p {
                Payload::Mat(m) => Ok(m.clone()),
                _ => Err(CommError::PayloadType),
            })
            .collect()
    };
    let check_same_shapes = |ms: &[Matrix]| -> Result<(), CommError> {
        for (i, m) in ms.iter().enumerate().skip(1) {
            if !m.same_shape(&ms[0]) {
                return Err(CommError::CollectiveShape {
                    rank: 1,
                    rows: ms[0].rows(),
                    cols: ms[0].cols(),
                    other_rank: i + 1,
                    other_rows: m.rows(),
                    other_cols: m.cols(),
                });
            }
        }
        Ok(())
    };

    match op {
        OpSig::AllReduceSum { free } => {
            let ms = mats(inputs)?;
            check_same_shapes(&ms)?;
            let mut sum = ms[0].clone();
            for m in &ms[1..] {
                sum.add_assign(m).expect("checked shapes");
            }
            let bytes = sum.bytes();
            let comm = if *free {
                0.0
            } else {
                estimate_comm_time(bytes, CommPattern::AllReduce, e, params)
            };
            Ok((vec![Payload::Mat(sum); e], comm, bytes))
        }
        OpSig::AllGatherConcat { axis, free } => {
            let ms = mats(inputs)?;
            for (i, m) in ms.iter().enumerate().skip(1) {
                let ok = match axis {
                    ConcatAxis::Cols => m.rows() == ms[0].rows(),
                    ConcatAxis::Rows => m.cols() == ms[0].cols(),
                };
                if !ok {
                    return Err(CommError::CollectiveShape {
                        rank: 1,
                        rows: ms[0].rows(),
                        cols: ms[0].cols(),
                        other_rank: i + 1,
                        other_rows: m.rows(),
                        other_cols: m.cols(),
                    });
                }
            }
            let refs: Vec<&Matrix> = ms.iter().collect();
            let cat = match axis {
                ConcatAxis::Cols => Matrix::concat_cols(&refs),
                ConcatAxis::Rows => Matrix::concat_rows(&refs),
            }
            .expect("checked shapes");
            let bytes = ms[0].bytes();
            let comm = if *free {
                0.0
            } else {
                estimate_comm_time(bytes, CommPattern::AllGather, e, params)
            };
            Ok((vec![Payload::Mat(cat); e], comm, bytes))
        }
        OpSig::Broadcast { root, pattern } => {
            let m = match &inputs[*root - 1] {
                Payload::Mat(m) => m.clone(),
                _ => return Err(CommError::PayloadType),
            };
            let bytes = m.bytes();
            let comm = estimate_comm_time(bytes, *pattern, e, params);
            Ok((vec![Payload::Mat(m); e], comm, bytes))
        }
        OpSig::ReduceToRoot { root, pattern } => {
            let ms = mats(inputs)?;
            check_same_shapes(&ms)?;
            let mut sum = ms[0].clone();
            for m in &ms[1..] {
                sum.add_assign(m).expect("checked shapes");
            }
            let bytes = sum.bytes();
            let comm = estimate_comm_time(bytes, *pattern, e, params);
            let outs = (1..=e)
                .map(|r| {
                    if r == *root {
                        Payload::Mat(sum.clone())
                    } else {
                        Payload::Empty
                    }
                })
                .collect();
            Ok((outs, comm, bytes))
        }
        OpSig::AllGatherScalar => {
            let vals: Result<Vec<f64>, CommError> = inputs
                .iter()
                .map(|p| match p {
                    Payload::Scalar(x) => Ok(*x),
                    _ => Err(CommError::PayloadType),
                })
                .collect();
            let vals = vals?;
            let comm = estimate_comm_time(8, CommPattern::AllGather, e, params);
            Ok((vec![Payload::Scalars(vals); e], comm, 8))
        }
        OpSig::Vote => {
            let any = inputs.iter().try_fold(false, |acc, p| match p {
                Payload::Flag(b) => Ok(acc || *b),
                _ => Err(CommError::PayloadType),
            })?;
            // Scheduling fabric only: zero modeled time, not audited.
            Ok((vec![Payload::Flag(any); e], 0.0, 0))
        }
    }
}

/// Per-rank communication audit (task-local).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CommAudit {
    pub all_reduce: u64,
    pub all_gather: u64,
    pub broadcast: u64,
    pub reduce: u64,
    pub scatter: u64,
    pub gather: u64,
    pub bytes: u64,
    pub comm_time: f64,
    pub stat_refreshes: u64,
}

impl CommAudit {
    fn count(&mut self, pattern: CommPattern) {
        match pattern {
            CommPattern::AllReduce => self.all_reduce += 1,
            CommPattern::AllGather => self.all_gather += 1,
            CommPattern::Broadcast => self.broadcast += 1,
            CommPattern::Reduce => self.reduce += 1,
            CommPattern::Scatter => self.scatter += 1,
            CommPattern::Gather => self.gather += 1,
        }
    }
}

/// One rank's membership in the collective group.
pub struct CommGroup {
    rank: Rank,
    e: usize,
    engine: Arc<CollectiveEngine>,
    pub audit: CommAudit,
}

impl CommGroup {
    pub fn rank(&self) -> Rank {
        self.rank
    }

    pub fn e(&self) -> usize {
        self.e
    }

    pub fn params(&self) -> &CostParams {
        self.engine.params()
    }

    pub fn engine(&self) -> &Arc<CollectiveEngine> {
        &self.engine
    }

    fn run(
        &mut self,
        sig: OpSig,
        payload: Payload,
        clock: &mut VirtualClock,
        pattern: Option<CommPattern>,
        free: bool,
    ) -> Result<Payload, CommError> {
        let (out, sync_to, comm, bytes) =
            self.engine.execute(self.rank, sig, payload, clock.now())?;
        if self.e > 1 {
            clock.sync_comm(sync_to, comm);
            if let (Some(p), false) = (pattern, free) {
                self.audit.count(p);
                self.audit.bytes += bytes;
                self.audit.comm_time += comm;
            }
        }
        Ok(out)
    }

    /// Elementwise sum across the group; every rank receives the result.
    pub fn all_reduce_sum(
        &mut self,
        m: Matrix,
        clock: &mut VirtualClock,
    ) -> Result<Matrix, CommError> {
        let free = clock.free;
        let out = self.run(
            OpSig::AllReduceSum { free },
            Payload::Mat(m),
            clock,
            Some(CommPattern::AllReduce),
            free,
        )?;
        match out {
            Payload::Mat(m) => Ok(m),
            _ => Err(CommError::PayloadType),
        }
    }

    /// Rank-order concatenation along `axis`; every rank receives the result.
    pub fn all_gather_concat(
        &mut self,
        m: Matrix,
        axis: ConcatAxis,
        clock: &mut VirtualClock,
    ) -> Result<Matrix, CommError> {
        let free = clock.free;
        let out = self.run(
            OpSig::AllGatherConcat { axis, free },
            Payload::Mat(m),
            clock,
            Some(CommPattern::AllGather),
            free,
        )?;
        match out {
            Payload::Mat(m) => Ok(m),
            _ => Err(CommError::PayloadType),
        }
    }

    /// Tree broadcast from `root`; non-roots pass `None` and receive the data.
    /// `pattern` selects the charged primitive (broadcast vs scatter baseline).
    pub fn broadcast_as(
        &mut self,
        m: Option<Matrix>,
        root: Rank,
        pattern: CommPattern,
        clock: &mut VirtualClock,
    ) -> Result<Matrix, CommError> {
        if root < 1 || root > self.e {
            return Err(CommError::InvalidRoot { root, e: self.e });
        }
        let payload = match (self.rank == root, m) {
            (true, Some(m)) => Payload::Mat(m),
            (true, None) => return Err(CommError::PayloadType),
            (false, _) => Payload::Empty,
        };
        let out = self.run(
            OpSig::Broadcast { root, pattern },
            payload,
            clock,
            Some(pattern),
            false,
        )?;
        match out {
            Payload::Mat(m) => Ok(m),
            _ => Err(CommError::PayloadType),
        }
    }

    /// Tree broadcast from `root` (the default primitive family).
    pub fn broadcast_tree(
        &mut self,
        m: Option<Matrix>,
        root: Rank,
        clock: &mut VirtualClock,
    ) -> Result<Matrix, CommError> {
        self.broadcast_as(m, root, CommPattern::Broadcast, clock)
    }

    /// Summation along the tree; only `root` receives `Some(sum)`.
    pub fn reduce_to_root_as(
        &mut self,
        m: Matrix,
        root: Rank,
        pattern: CommPattern,
        clock: &mut VirtualClock,
    ) -> Result<Option<Matrix>, CommError> {
        if root < 1 || root > self.e {
            return Err(CommError::InvalidRoot { root, e: self.e });
        }
        let out = self.run(
            OpSig::ReduceToRoot { root, pattern },
            Payload::Mat(m),
            clock,
            Some(pattern),
            false,
        )?;
        match out {
            Payload::Mat(m) => Ok(Some(m)),
            Payload::Empty => Ok(None),
            _ => Err(CommError::PayloadType),
        }
    }

    pub fn reduce_to_root(
        &mut self,
        m: Matrix,
        root: Rank,
        clock: &mut VirtualClock,
    ) -> Result<Option<Matrix>, CommError> {
        self.reduce_to_root_as(m, root, CommPattern::Reduce, clock)
    }

    /// Gather one scalar per rank; every rank receives the rank-ordered list.
    pub fn all_gather_scalar(
        &mut self,
        x: f64,
        clock: &mut VirtualClock,
    ) -> Result<Vec<f64>, CommError> {
        let out = self.run(
            OpSig::AllGatherScalar,
            Payload::Scalar(x),
            clock,
            Some(CommPattern::AllGather),
            false,
        )?;
        match out {
            Payload::Scalars(v) => Ok(v),
            _ => Err(CommError::PayloadType),
        }
    }

    /// Group OR of one flag per rank. Scheduling rendezvous only: charges no
    /// time and is not audited as communication.
    pub fn vote(&mut self, flag: bool, clock: &mut VirtualClock) -> Result<bool, CommError> {
        let out = self.run(OpSig::Vote, Payload::Flag(flag), clock, None, true)?;
        match out {
            Payload::Flag(b) => Ok(b),
            _ => Err(CommError::PayloadType),
        }
    }
}

/// Per-rank execution audit for the mode invariants.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExecAudit {
    pub prunes: u64,
    pub imputations: u64,
    pub migrated_matmuls: u64,
    pub resize_allocs: u64,
}

/// Everything one logical task carries: its group handle, clock and counters.
pub struct TaskCtx {
    pub group: CommGroup,
    pub clock: VirtualClock,
    pub counter: WorkCounter,
    pub exec_audit: ExecAudit,
    alloc_overhead: f64,
}

impl TaskCtx {
    pub fn new(group: CommGroup) -> Self {
        let params = *group.params();
        Self {
            group,
            clock: VirtualClock::new(&params),
            counter: WorkCounter::new(),
            exec_audit: ExecAudit::default(),
            alloc_overhead: params.alloc_overhead,
        }
    }

    pub fn rank(&self) -> Rank {
        self.group.rank()
    }

    pub fn e(&self) -> usize {
        self.group.e()
    }

    /// Counted, clock-charged matrix product.
    pub fn matmul(
        &mut self,
        a: &Matrix,
        b: &Matrix,
    ) -> Result<Matrix, crate::matrix::TensorError> {
        let before = self.counter.flops;
        let out = crate::matrix::matmul(a, b, &mut self.counter)?;
        self.clock.charge_matmul(self.counter.flops - before);
        Ok(out)
    }

    /// Light elementwise work (activations, optimizer steps).
    pub fn charge_light(&mut self, elems: u64) {
        self.clock.charge_copy(elems);
    }

    /// Resize-path charge: one allocation plus extraction work proportional
    /// to the pruned volume.
    pub fn charge_resize(&mut self, pruned_elems: u64) {
        self.clock.charge_alloc(self.alloc_overhead);
        self.clock.charge_copy(pruned_elems);
        self.exec_audit.resize_allocs += 1;
    }

    pub fn all_reduce_sum(&mut self, m: Matrix) -> Result<Matrix, CommError> {
        let out = self.group.all_reduce_sum(m, &mut self.clock)?;
        self.counter.bytes_moved += out.bytes();
        Ok(out)
    }

    pub fn all_gather_concat(
        &mut self,
        m: Matrix,
        axis: ConcatAxis,
    ) -> Result<Matrix, CommError> {
        let out = self.group.all_gather_concat(m, axis, &mut self.clock)?;
        self.counter.bytes_moved += out.bytes();
        Ok(out)
    }

    pub fn broadcast_as(
        &mut self,
        m: Option<Matrix>,
        root: Rank,
        pattern: CommPattern,
    ) -> Result<Matrix, CommError> {
        let out = self.group.broadcast_as(m, root, pattern, &mut self.clock)?;
        self.counter.bytes_moved += out.bytes();
        Ok(out)
    }

    pub fn reduce_to_root_as(
        &mut self,
        m: Matrix,
        root: Rank,
        pattern: CommPattern,
    ) -> Result<Option<Matrix>, CommError> {
        self.counter.bytes_moved += m.bytes();
        self.group.reduce_to_root_as(m, root, pattern, &mut self.clock)
    }

    pub fn all_gather_scalar(&mut self, x: f64) -> Result<Vec<f64>, CommError> {
        self.group.all_gather_scalar(x, &mut self.clock)
    }

    pub fn vote(&mut self, flag: bool) -> Result<bool, CommError> {
        self.group.vote(flag, &mut self.clock)
    }

    pub fn begin_eval(&mut self) {
        self.clock.set_free(true);
    }

    pub fn end_eval(&mut self) {
        self.clock.set_free(false);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::thread;

    fn spawn_group<F, T>(e: usize, params: CostParams, f: F) -> Vec<T>
    where
        F: Fn(TaskCtx) -> T + Sync,
        T: Send,
    {
        let engine = CollectiveEngine::new(e, params);
        thread::scope(|s| {
            let handles: Vec<_> = (1..=e)
                .map(|r| {
                    let engine = Arc::clone(&engine);
                    let f = &f;
                    s.spawn(move || f(TaskCtx::new(engine.group(r))))
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        })
    }

    #[test]
    fn all_reduce_sums_across_ranks() {
        let outs = spawn_group(2, CostParams::default(), |mut ctx| {
            let m = Matrix::from_rows(&[vec![
                ctx.rank() as f64 * 2.0 - 1.0,
                ctx.rank() as f64 * 2.0,
            ]]);
            ctx.all_reduce_sum(m).unwrap()
        });
        // inputs [1,2] and [3,4] -> both get [4,6]
        for o in outs {
            assert_eq!(o, Matrix::from_rows(&[vec![4.0, 6.0]]));
        }
    }

    #[test]
    fn all_reduce_three_ranks() {
        let outs = spawn_group(3, CostParams::default(), |mut ctx| {
            ctx.all_reduce_sum(Matrix::from_rows(&[vec![ctx.rank() as f64]]))
                .unwrap()
        });
        for o in outs {
            assert_eq!(o, Matrix::from_rows(&[vec![6.0]]));
        }
    }

    #[test]
    fn single_task_collectives_are_identity() {
        let outs = spawn_group(1, CostParams::default(), |mut ctx| {
            let m = Matrix::from_rows(&[vec![7.0]]);
            let ar = ctx.all_reduce_sum(m.clone()).unwrap();
            let ag = ctx.all_gather_concat(m.clone(), ConcatAxis::Cols).unwrap();
            let bc = ctx.broadcast_as(Some(m.clone()), 1, CommPattern::Broadcast).unwrap();
            (ar, ag, bc, ctx.clock.now())
        });
        let (ar, ag, bc, now) = &outs[0];
        let m = Matrix::from_rows(&[vec![7.0]]);
        assert_eq!(*ar, m);
        assert_eq!(*ag, m);
        assert_eq!(*bc, m);
        assert_eq!(*now, 0.0);
    }

    #[test]
    fn all_gather_concat_cols_in_rank_order() {
        let outs = spawn_group(2, CostParams::default(), |mut ctx| {
            let m = if ctx.rank() == 1 {
                Matrix::from_rows(&[vec![1.0], vec![2.0]])
            } else {
                Matrix::from_rows(&[vec![3.0], vec![4.0]])
            };
            ctx.all_gather_concat(m, ConcatAxis::Cols).unwrap()
        });
        for o in outs {
            assert_eq!(o, Matrix::from_rows(&[vec![1.0, 3.0], vec![2.0, 4.0]]));
        }
    }

    #[test]
    fn all_gather_four_single_columns() {
        let outs = spawn_group(4, CostParams::default(), |mut ctx| {
            ctx.all_gather_concat(
                Matrix::from_rows(&[vec![ctx.rank() as f64]]),
                ConcatAxis::Cols,
            )
            .unwrap()
        });
        for o in outs {
            assert_eq!(o, Matrix::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]));
        }
    }

    #[test]
    fn broadcast_delivers_root_payload() {
        let outs = spawn_group(3, CostParams::default(), |mut ctx| {
            let payload = (ctx.rank() == 1).then(|| Matrix::from_rows(&[vec![42.0]]));
            ctx.broadcast_as(payload, 1, CommPattern::Broadcast).unwrap()
        });
        for o in outs {
            assert_eq!(o, Matrix::from_rows(&[vec![42.0]]));
        }
    }

    #[test]
    fn broadcast_invalid_root_errors() {
        let outs = spawn_group(2, CostParams::default(), |mut ctx| {
            ctx.broadcast_as(Some(Matrix::zeros(1, 1)), 5, CommPattern::Broadcast)
                .unwrap_err()
        });
        for e in outs {
            assert_eq!(e, CommError::InvalidRoot { root: 5, e: 2 });
        }
    }

    #[test]
    fn reduce_to_root_sums_at_root_only() {
        let outs = spawn_group(3, CostParams::default(), |mut ctx| {
            ctx.reduce_to_root_as(
                Matrix::from_rows(&[vec![ctx.rank() as f64]]),
                1,
                CommPattern::Reduce,
            )
            .unwrap()
        });
        assert_eq!(outs[0], Some(Matrix::from_rows(&[vec![6.0]])));
        assert_eq!(outs[1], None);
        assert_eq!(outs[2], None);
    }

    #[test]
    fn shape_disagreement_is_reported() {
        let outs = spawn_group(2, CostParams::default(), |mut ctx| {
            let m = if ctx.rank() == 1 {
                Matrix::zeros(1, 2)
            } else {
                Matrix::zeros(1, 3)
            };
            ctx.all_reduce_sum(m).unwrap_err()
        });
        for e in outs {
            assert!(matches!(e, CommError::CollectiveShape { .. }), "{e:?}");
        }
    }

    #[test]
    fn missing_participant_times_out_with_diagnostic() {
        let engine =
            CollectiveEngine::with_timeout(2, CostParams::default(), Duration::from_millis(100));
        let err = thread::scope(|s| {
            let engine = Arc::clone(&engine);
            let h = s.spawn(move || {
                let mut ctx = TaskCtx::new(engine.group(1));
                ctx.all_reduce_sum(Matrix::zeros(1, 1)).unwrap_err()
            });
            h.join().unwrap()
        });
        match err {
            CommError::Deadlock { absent, .. } => assert_eq!(absent, vec![2]),
            other => panic!("expected deadlock, got {other:?}"),
        }
    }

    #[test]
    fn clocks_synchronize_to_max_plus_comm() {
        let outs = spawn_group(2, CostParams::default(), |mut ctx| {
            // Rank 2 is "slower" before the collective.
            if ctx.rank() == 2 {
                ctx.clock.charge_copy(10_000_000); // 1.0 time units
            }
            ctx.all_reduce_sum(Matrix::zeros(1, 1)).unwrap();
            ctx.clock.now()
        });
        let expected = 1.0 + estimate_comm_time(8, CommPattern::AllReduce, 2, &CostParams::default());
        assert_eq!(outs[0], expected);
        assert_eq!(outs[1], expected);
    }

    #[test]
    fn vote_is_free_and_ors_flags() {
        let outs = spawn_group(3, CostParams::default(), |mut ctx| {
            let fired = ctx.vote(ctx.rank() == 2).unwrap();
            (fired, ctx.clock.now(), ctx.group.audit.clone())
        });
        for (fired, now, audit) in outs {
            assert!(fired);
            assert_eq!(now, 0.0);
            assert_eq!(audit, CommAudit::default());
        }
    }

    #[test]
    fn determinism_across_runs() {
        let run = || {
            spawn_group(4, CostParams::default(), |mut ctx| {
                let mut m = Matrix::from_rows(&[vec![ctx.rank() as f64 * 0.1, 1.0]]);
                for _ in 0..5 {
                    m = ctx.all_reduce_sum(m).unwrap();
                }
                (m, ctx.clock.now())
            })
        };
        let a = run();
        let b = run();
        for ((ma, ta), (mb, tb)) in a.iter().zip(&b) {
            assert_eq!(ma.data(), mb.data());
            assert_eq!(ta, tb);
        }
    }

    #[test]
    fn cost_model_zero_bytes_latency_only() {
        let p = CostParams::default();
        let t = estimate_comm_time(0, CommPattern::Broadcast, 4, &p);
        assert_eq!(t, 2.0 * p.alpha);
        assert_eq!(estimate_comm_time(0, CommPattern::Broadcast, 1, &p), 0.0);
    }

    #[test]
    fn cost_model_e8_broadcast_is_three_rounds() {
        let p = CostParams::default();
        let bytes = 1000;
        let t = estimate_comm_time(bytes, CommPattern::Broadcast, 8, &p);
        assert_eq!(t, 3.0 * (p.alpha + bytes as f64 * p.beta_net));
    }

    #[test]
    fn tree_broadcast_beats_serial_scatter_for_e_ge_3() {
        let p = CostParams::default();
        for e in 3..=10 {
            for bytes in [1u64, 100, 10_000] {
                let b = estimate_comm_time(bytes, CommPattern::Broadcast, e, &p);
                let s = estimate_comm_time(bytes, CommPattern::Scatter, e, &p);
                assert!(b < s, "e={e} bytes={bytes}: broadcast {b} vs scatter {s}");
            }
        }
    }

    #[test]
    fn broadcast_le_scatter_e4() {
        let p = CostParams::default();
        let b = estimate_comm_time(4096, CommPattern::Broadcast, 4, &p);
        let s = estimate_comm_time(4096, CommPattern::Scatter, 4, &p);
        assert!(b <= s);
    }
}
