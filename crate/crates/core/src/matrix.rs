//! Dense row-major `f64` matrices plus the column pruning / imputation kernels
//! and FLOP accounting that the rest of the simulator builds on.
//!
//! Column indices exposed through [`IndexSet`] are 1-based; plain element
//! access on [`Matrix`] is 0-based.

use thiserror::Error;

/// Errors from matrix construction and the tensor kernels.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("invalid dimensions {rows}x{cols}: rows and cols must be >= 1")]
    InvalidDims { rows: usize, cols: usize },
    #[error("data length {len} does not match {rows}x{cols}")]
    DataLength { len: usize, rows: usize, cols: usize },
    #[error("shape mismatch: left is {lr}x{lc}, right is {rr}x{rc} ({ctx})")]
    ShapeMismatch {
        lr: usize,
        lc: usize,
        rr: usize,
        rc: usize,
        ctx: &'static str,
    },
    #[error("degenerate prune: {pruned} of {cols} columns pruned, at least one must survive")]
    DegeneratePrune { pruned: usize, cols: usize },
    #[error("column index {index} out of range 1..={cols}")]
    IndexOutOfRange { index: usize, cols: usize },
    #[error("index set must be strictly ascending and 1-based (offending value {value})")]
    InvalidIndexSet { value: usize },
    #[error("Same imputation requires the previous full matrix")]
    MissingHistory,
}

/// Dense 2D real matrix, row-major. Invariants: `rows >= 1`, `cols >= 1`,
/// `data.len() == rows * cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if rows == 0 || cols == 0 {
            return Err(TensorError::InvalidDims { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(TensorError::DataLength {
                len: data.len(),
                rows,
                cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "zero-dimension matrix");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Build from nested rows; rows must be non-empty and rectangular.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty() && !rows[0].is_empty());
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Payload size in bytes (f64 elements).
    pub fn bytes(&self) -> u64 {
        (self.rows * self.cols * 8) as u64
    }

    pub fn elems(&self) -> u64 {
        (self.rows * self.cols) as u64
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<(), TensorError> {
        if !self.same_shape(other) {
            return Err(shape_err(self, other, "add"));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    /// `self -= scale * other` (the SGD step shape).
    pub fn sub_scaled(&mut self, other: &Matrix, scale: f64) -> Result<(), TensorError> {
        if !self.same_shape(other) {
            return Err(shape_err(self, other, "sub_scaled"));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a -= scale * *b;
        }
        Ok(())
    }

    pub fn map<F: Fn(f64) -> f64>(&self, f: F) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix, TensorError> {
        if !self.same_shape(other) {
            return Err(shape_err(self, other, "hadamard"));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a * b)
                .collect(),
        })
    }

    /// Copy of rows `range` (0-based, non-empty).
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        assert!(start < end && end <= self.rows);
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Copy of columns `start..end` (0-based, non-empty).
    pub fn slice_cols(&self, start: usize, end: usize) -> Matrix {
        assert!(start < end && end <= self.cols);
        let mut out = Matrix::zeros(self.rows, end - start);
        for r in 0..self.rows {
            let src = &self.data[r * self.cols + start..r * self.cols + end];
            out.data[r * (end - start)..(r + 1) * (end - start)].copy_from_slice(src);
        }
        out
    }

    /// Write `block` into columns `start..start+block.cols` (0-based).
    pub fn set_cols(&mut self, start: usize, block: &Matrix) {
        assert_eq!(self.rows, block.rows);
        assert!(start + block.cols <= self.cols);
        for r in 0..self.rows {
            let dst = r * self.cols + start;
            self.data[dst..dst + block.cols].copy_from_slice(block.row(r));
        }
    }

    /// Add `block` into columns `start..start+block.cols` (0-based).
    pub fn add_cols(&mut self, start: usize, block: &Matrix) {
        assert_eq!(self.rows, block.rows);
        assert!(start + block.cols <= self.cols);
        for r in 0..self.rows {
            let dst = r * self.cols + start;
            for c in 0..block.cols {
                self.data[dst + c] += block.get(r, c);
            }
        }
    }

    /// Write `block` into rows `start..start+block.rows` (0-based).
    pub fn set_rows(&mut self, start: usize, block: &Matrix) {
        assert_eq!(self.cols, block.cols);
        assert!(start + block.rows <= self.rows);
        self.data[start * self.cols..(start + block.rows) * self.cols]
            .copy_from_slice(&block.data);
    }

    /// Concatenate column-wise in the given order.
    pub fn concat_cols(parts: &[&Matrix]) -> Result<Matrix, TensorError> {
        assert!(!parts.is_empty());
        let rows = parts[0].rows;
        for p in parts {
            if p.rows != rows {
                return Err(shape_err(parts[0], p, "concat_cols"));
            }
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut at = 0;
        for p in parts {
            out.set_cols(at, p);
            at += p.cols;
        }
        Ok(out)
    }

    /// Concatenate row-wise in the given order.
    pub fn concat_rows(parts: &[&Matrix]) -> Result<Matrix, TensorError> {
        assert!(!parts.is_empty());
        let cols = parts[0].cols;
        for p in parts {
            if p.cols != cols {
                return Err(shape_err(parts[0], p, "concat_rows"));
            }
        }
        let rows: usize = parts.iter().map(|p| p.rows).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut at = 0;
        for p in parts {
            out.set_rows(at, p);
            at += p.rows;
        }
        Ok(out)
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|x| x.abs()).fold(0.0, f64::max)
    }
}

fn shape_err(l: &Matrix, r: &Matrix, ctx: &'static str) -> TensorError {
    TensorError::ShapeMismatch {
        lr: l.rows,
        lc: l.cols,
        rr: r.rows,
        rc: r.cols,
        ctx,
    }
}

/// Ordered set of 1-based column indices (strictly ascending, no duplicates).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IndexSet {
    indices: Vec<usize>,
}

impl IndexSet {
    /// Build from arbitrary order; sorts, rejects zero and duplicates.
    pub fn new(mut indices: Vec<usize>) -> Result<Self, TensorError> {
        indices.sort_unstable();
        for w in indices.windows(2) {
            if w[0] == w[1] {
                return Err(TensorError::InvalidIndexSet { value: w[0] });
            }
        }
        if indices.first() == Some(&0) {
            return Err(TensorError::InvalidIndexSet { value: 0 });
        }
        Ok(Self { indices })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// 1-based indices, ascending.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }

    pub fn validate_for(&self, cols: usize) -> Result<(), TensorError> {
        if let Some(&last) = self.indices.last() {
            if last > cols {
                return Err(TensorError::IndexOutOfRange { index: last, cols });
            }
        }
        Ok(())
    }
}

/// Counter of scalar multiply-add pairs and bytes moved, task-local.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WorkCounter {
    pub flops: u64,
    pub bytes_moved: u64,
}

impl WorkCounter {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Imputation policy for positions removed by pruning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ImputationPolicy {
    /// Value from the same position in the previous iteration.
    Same,
    /// Per-row mean of the surviving entries.
    Average,
    /// Uniform zero.
    #[default]
    Zero,
}

/// Standard product `A[m x k] * B[k x n]`; adds `2*m*k*n` to `acc.flops`.
pub fn matmul(a: &Matrix, b: &Matrix, acc: &mut WorkCounter) -> Result<Matrix, TensorError> {
    if a.cols != b.rows {
        return Err(shape_err(a, b, "matmul"));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, n);
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out.data[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b.data[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    acc.flops += 2 * (m as u64) * (k as u64) * (n as u64);
    Ok(out)
}

/// Remove the 1-based columns in `p`; survivors keep their original order.
pub fn prune_columns(m: &Matrix, p: &IndexSet) -> Result<Matrix, TensorError> {
    p.validate_for(m.cols)?;
    if p.is_empty() {
        return Ok(m.clone());
    }
    if p.len() >= m.cols {
        return Err(TensorError::DegeneratePrune {
            pruned: p.len(),
            cols: m.cols,
        });
    }
    let keep: Vec<usize> = (1..=m.cols).filter(|c| !p.contains(*c)).collect();
    let mut out = Matrix::zeros(m.rows, keep.len());
    for r in 0..m.rows {
        for (j, &c) in keep.iter().enumerate() {
            out.data[r * keep.len() + j] = m.get(r, c - 1);
        }
    }
    Ok(out)
}

/// Restore a pruned matrix to `c` columns, filling positions in `p` by policy.
///
/// `m` holds the survivors in original order; `prev` is required for
/// [`ImputationPolicy::Same`].
pub fn impute_columns(
    m: &Matrix,
    p: &IndexSet,
    c: usize,
    policy: ImputationPolicy,
    prev: Option<&Matrix>,
) -> Result<Matrix, TensorError> {
    p.validate_for(c)?;
    if c - p.len() != m.cols {
        return Err(TensorError::ShapeMismatch {
            lr: m.rows,
            lc: m.cols,
            rr: m.rows,
            rc: c - p.len(),
            ctx: "impute survivor count",
        });
    }
    if p.is_empty() {
        return Ok(m.clone());
    }
    if policy == ImputationPolicy::Same {
        match prev {
            None => return Err(TensorError::MissingHistory),
            Some(h) if h.rows != m.rows || h.cols != c => {
                return Err(TensorError::ShapeMismatch {
                    lr: h.rows,
                    lc: h.cols,
                    rr: m.rows,
                    rc: c,
                    ctx: "impute history shape",
                })
            }
            _ => {}
        }
    }
    let mut out = Matrix::zeros(m.rows, c);
    for r in 0..m.rows {
        let row_mean = match policy {
            ImputationPolicy::Average => {
                m.row(r).iter().sum::<f64>() / m.cols as f64
            }
            _ => 0.0,
        };
        let mut j = 0;
        for col in 1..=c {
            let v = if p.contains(col) {
                match policy {
                    ImputationPolicy::Zero => 0.0,
                    ImputationPolicy::Average => row_mean,
                    ImputationPolicy::Same => prev.unwrap().get(r, col - 1),
                }
            } else {
                let v = m.get(r, j);
                j += 1;
                v
            };
            out.set(r, col - 1, v);
        }
    }
    Ok(out)
}

/// Per-column mean absolute difference: element `i` is
/// `sum_j |new[j,i] - old[j,i]| / rows`.
pub fn column_delta(w_new: &Matrix, w_old: &Matrix) -> Result<Vec<f64>, TensorError> {
    if !w_new.same_shape(w_old) {
        return Err(shape_err(w_new, w_old, "column_delta"));
    }
    let r = w_new.rows as f64;
    let mut delta = vec![0.0; w_new.cols];
    for i in 0..w_new.rows {
        for (j, d) in delta.iter_mut().enumerate() {
            *d += (w_new.get(i, j) - w_old.get(i, j)).abs();
        }
    }
    for d in &mut delta {
        *d /= r;
    }
    Ok(delta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows)
    }

    #[test]
    fn matmul_identity() {
        let a = m(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let mut acc = WorkCounter::new();
        let out = matmul(&a, &Matrix::identity(2), &mut acc).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn matmul_hand_case() {
        // [[1,2]] x [[3],[4]] = [[11]]
        let a = m(&[vec![1.0, 2.0]]);
        let b = m(&[vec![3.0], vec![4.0]]);
        let mut acc = WorkCounter::new();
        let out = matmul(&a, &b, &mut acc).unwrap();
        assert_eq!(out, m(&[vec![11.0]]));
    }

    #[test]
    fn matmul_flop_accounting() {
        // A: 2x3, B: 3x2 -> flops += 2*2*3*2 = 24
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(3, 2);
        let mut acc = WorkCounter::new();
        matmul(&a, &b, &mut acc).unwrap();
        assert_eq!(acc.flops, 24);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 2);
        let mut acc = WorkCounter::new();
        let err = matmul(&a, &b, &mut acc).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("2x2"), "{msg}");
    }

    #[test]
    fn prune_keeps_survivors_in_order() {
        // Fig-2 style: 2x4, prune columns 2 and 4 -> columns 1 and 3 kept.
        let a = m(&[vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0]]);
        let p = IndexSet::new(vec![2, 4]).unwrap();
        let out = prune_columns(&a, &p).unwrap();
        assert_eq!(out, m(&[vec![1.0, 3.0], vec![5.0, 7.0]]));
    }

    #[test]
    fn prune_empty_set_is_identity() {
        let a = m(&[vec![1.0, 2.0]]);
        assert_eq!(prune_columns(&a, &IndexSet::empty()).unwrap(), a);
    }

    #[test]
    fn prune_all_columns_is_degenerate() {
        let a = Matrix::zeros(2, 4);
        let p = IndexSet::new(vec![1, 2, 3, 4]).unwrap();
        assert_eq!(
            prune_columns(&a, &p).unwrap_err(),
            TensorError::DegeneratePrune { pruned: 4, cols: 4 }
        );
    }

    #[test]
    fn prune_out_of_range_index() {
        let a = Matrix::zeros(2, 3);
        let p = IndexSet::new(vec![5]).unwrap();
        assert_eq!(
            prune_columns(&a, &p).unwrap_err(),
            TensorError::IndexOutOfRange { index: 5, cols: 3 }
        );
    }

    #[test]
    fn impute_zero_restores_positions() {
        // survivors [c1, c3] of c=4 with P={2,4} -> [c1, 0, c3, 0]
        let surv = m(&[vec![1.0, 3.0], vec![5.0, 7.0]]);
        let p = IndexSet::new(vec![2, 4]).unwrap();
        let out = impute_columns(&surv, &p, 4, ImputationPolicy::Zero, None).unwrap();
        assert_eq!(
            out,
            m(&[vec![1.0, 0.0, 3.0, 0.0], vec![5.0, 0.0, 7.0, 0.0]])
        );
    }

    #[test]
    fn impute_average_uses_row_mean() {
        // survivors [[2,4]] of c=3 with P={2} -> [[2, 3, 4]]
        let surv = m(&[vec![2.0, 4.0]]);
        let p = IndexSet::new(vec![2]).unwrap();
        let out = impute_columns(&surv, &p, 3, ImputationPolicy::Average, None).unwrap();
        assert_eq!(out, m(&[vec![2.0, 3.0, 4.0]]));
    }

    #[test]
    fn impute_same_without_history_errors() {
        let surv = m(&[vec![2.0]]);
        let p = IndexSet::new(vec![2]).unwrap();
        let err = impute_columns(&surv, &p, 2, ImputationPolicy::Same, None).unwrap_err();
        assert_eq!(err, TensorError::MissingHistory);
    }

    #[test]
    fn impute_empty_set_is_identity() {
        let surv = m(&[vec![2.0, 4.0]]);
        let out = impute_columns(&surv, &IndexSet::empty(), 2, ImputationPolicy::Zero, None)
            .unwrap();
        assert_eq!(out, surv);
    }

    #[test]
    fn prune_then_same_impute_round_trips_exactly() {
        let a = m(&[
            vec![0.5, -1.5, 2.25, 9.0, -3.125],
            vec![4.0, 0.0, -8.5, 1.0, 7.75],
        ]);
        let p = IndexSet::new(vec![1, 4]).unwrap();
        let pruned = prune_columns(&a, &p).unwrap();
        let back = impute_columns(&pruned, &p, 5, ImputationPolicy::Same, Some(&a)).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn prune_then_zero_impute_zeroes_exactly_p() {
        let a = m(&[vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0]]);
        let p = IndexSet::new(vec![3]).unwrap();
        let pruned = prune_columns(&a, &p).unwrap();
        let back = impute_columns(&pruned, &p, 4, ImputationPolicy::Zero, None).unwrap();
        for r in 0..a.rows() {
            for c in 0..a.cols() {
                if p.contains(c + 1) {
                    assert_eq!(back.get(r, c), 0.0);
                } else {
                    assert_eq!(back.get(r, c).to_bits(), a.get(r, c).to_bits());
                }
            }
        }
    }

    #[test]
    fn column_delta_zero_for_identical() {
        let a = m(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(column_delta(&a, &a).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn column_delta_hand_case() {
        let old = m(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let new = m(&[vec![1.0, 3.0], vec![3.0, 6.0]]);
        assert_eq!(column_delta(&new, &old).unwrap(), vec![0.0, 1.5]);
    }

    #[test]
    fn column_delta_single_row() {
        let old = m(&[vec![1.0, -2.0]]);
        let new = m(&[vec![4.0, -2.5]]);
        assert_eq!(column_delta(&new, &old).unwrap(), vec![3.0, 0.5]);
    }

    #[test]
    fn column_delta_shape_mismatch() {
        let a = Matrix::zeros(2, 2);
        let b = Matrix::zeros(2, 3);
        assert!(column_delta(&a, &b).is_err());
    }

    #[test]
    fn index_set_rejects_duplicates_and_zero() {
        assert!(IndexSet::new(vec![1, 1]).is_err());
        assert!(IndexSet::new(vec![0, 2]).is_err());
        assert_eq!(IndexSet::new(vec![3, 1]).unwrap().indices(), &[1, 3]);
    }

    #[test]
    fn pruned_matmul_flop_ratio_tracks_gamma() {
        // flops(pruned) / flops(unpruned) = (1 - gamma) +- 1/k
        let k = 32;
        let (mrows, n) = (6, 5);
        let a = Matrix::zeros(mrows, k);
        let bt = Matrix::zeros(n, k); // weight stored [n x k], multiplied as a * bt^T
        for gamma in [0.25, 0.5, 0.75] {
            let npr = (k as f64 * gamma).round() as usize;
            let p = IndexSet::new((1..=npr).collect()).unwrap();
            let pa = prune_columns(&a, &p).unwrap();
            let pb = prune_columns(&bt, &p).unwrap();
            let mut base = WorkCounter::new();
            matmul(&a, &bt.transpose(), &mut base).unwrap();
            let mut red = WorkCounter::new();
            matmul(&pa, &pb.transpose(), &mut red).unwrap();
            let ratio = red.flops as f64 / base.flops as f64;
            assert!(
                (ratio - (1.0 - gamma)).abs() <= 1.0 / k as f64,
                "gamma={gamma} ratio={ratio}"
            );
        }
    }
}
