//! Dense and sparse linear algebra for desk-scale GP inference.
//!
//! Everything is `f64` and deterministic: reductions run in a fixed order
//! (lane-folded dot products, pairwise sums), and the row-parallel paths
//! write disjoint output slices only.

mod decomp;
mod iterative;
mod sparse;

pub use decomp::{
    cholesky, cholesky_jittered, inverse_from_cholesky, solve_lower, solve_lower_transpose,
    solve_psd, sym_eigen, SymEigen,
};
pub use iterative::{conjugate_gradient, lanczos, CgSolution, LanczosFactorization};
pub use sparse::{sparse_matvec, sparse_matvec_transpose, SparseRowMatrix, SymTridiagonal};

use crate::error::{Error, Result};
use crate::par;

/// Dot product with four independent accumulator lanes folded pairwise at the
/// end. Fixed evaluation order (deterministic) and vectorizer-friendly.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let mut acc = [0.0f64; 4];
    let lanes = n / 4 * 4;
    let mut i = 0;
    while i < lanes {
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
        i += 4;
    }
    let mut tail = 0.0;
    for j in lanes..n {
        tail += a[j] * b[j];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail
}

/// Pairwise (cascade) summation: O(log n) error growth, fixed order.
pub fn sum(x: &[f64]) -> f64 {
    if x.len() <= 32 {
        let mut s = 0.0;
        for &v in x {
            s += v;
        }
        return s;
    }
    let mid = x.len() / 2;
    sum(&x[..mid]) + sum(&x[mid..])
}

/// Euclidean norm.
pub fn norm2(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// Row-major dense matrix.
///
/// Invariant: `data.len() == rows * cols`.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                op: "DenseMatrix::new",
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(Error::RaggedRows { row: i, got: row.len(), expected: c });
            }
            data.extend_from_slice(row);
        }
        Self::new(r, c, data)
    }

    /// Column vector from a slice.
    pub fn column(v: &[f64]) -> Self {
        Self { rows: v.len(), cols: 1, data: v.to_vec() }
    }

    /// 1x1 matrix.
    pub fn scalar(v: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self * other`, row-parallel over output rows.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        self.matmul_impl(other, true)
    }

    /// Sequential twin of [`DenseMatrix::matmul`] for the bench suite.
    pub fn matmul_seq(&self, other: &Self) -> Result<Self> {
        self.matmul_impl(other, false)
    }

    fn matmul_impl(&self, other: &Self, parallel: bool) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: other.rows,
                right_cols: other.cols,
            });
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = Self::zeros(n, m);
        let body = |i: usize, row: &mut [f64]| {
            let a_row = &self.data[i * k..(i + 1) * k];
            for (kk, &aik) in a_row.iter().enumerate() {
                let b_row = &other.data[kk * m..(kk + 1) * m];
                for (o, &b) in row.iter_mut().zip(b_row) {
                    *o += aik * b;
                }
            }
        };
        if parallel {
            par::for_each_row(&mut out.data, m, body);
        } else {
            par::for_each_row_seq(&mut out.data, m, body);
        }
        Ok(out)
    }

    /// `self * v` for a dense vector.
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::DimensionMismatch {
                op: "mul_vec",
                expected: self.cols,
                got: v.len(),
            });
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: other.rows,
                right_cols: other.cols,
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "sub",
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: other.rows,
                right_cols: other.cols,
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    pub fn scale(&self, s: f64) -> Self {
        let data = self.data.iter().map(|v| v * s).collect();
        Self { rows: self.rows, cols: self.cols, data }
    }

    /// Add `v` to every diagonal entry (square matrices only).
    pub fn add_diagonal(&mut self, v: f64) {
        debug_assert!(self.is_square());
        let n = self.rows;
        for i in 0..n {
            self.data[i * n + i] += v;
        }
    }

    pub fn diag(&self) -> Vec<f64> {
        let n = self.rows.min(self.cols);
        (0..n).map(|i| self.data[i * self.cols + i]).collect()
    }

    pub fn mean_diag(&self) -> f64 {
        let d = self.diag();
        if d.is_empty() {
            0.0
        } else {
            sum(&d) / d.len() as f64
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn frob_norm(&self) -> f64 {
        norm2(&self.data)
    }

    /// Largest absolute asymmetry, as `(i, j, |a_ij - a_ji|)`.
    pub fn max_asymmetry(&self) -> (usize, usize, f64) {
        let mut worst = (0, 0, 0.0f64);
        for i in 0..self.rows {
            for j in (i + 1)..self.cols.min(self.rows) {
                let asym = (self.get(i, j) - self.get(j, i)).abs();
                if asym > worst.2 {
                    worst = (i, j, asym);
                }
            }
        }
        worst
    }
}

/// Reject non-square or asymmetric (beyond `1e-10` relative) matrices.
pub(crate) fn check_symmetric(a: &DenseMatrix, _op: &'static str) -> Result<()> {
    if !a.is_square() {
        return Err(Error::NonSquare { rows: a.rows(), cols: a.cols() });
    }
    let (i, j, asym) = a.max_asymmetry();
    let scale = a.max_abs();
    if asym > 1e-10 * scale.max(1.0) {
        return Err(Error::NonSymmetric { row: i, col: j, asym });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_and_sum_match_naive() {
        let a: Vec<f64> = (0..103).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..103).map(|i| (i as f64 * 0.11).cos()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
        let naive_sum: f64 = a.iter().sum();
        assert!((sum(&a) - naive_sum).abs() < 1e-12);
    }

    #[test]
    fn matmul_small_oracle() {
        // [[1,2],[3,4]] * [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = DenseMatrix::from_rows(vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = DenseMatrix::from_rows(vec![vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_parallel_matches_sequential_bitwise() {
        let n = 37;
        let a = DenseMatrix::new(
            n,
            n,
            (0..n * n).map(|i| ((i * 2654435761) % 1000) as f64 / 997.0 - 0.5).collect(),
        )
        .unwrap();
        let b = a.transpose();
        let par = a.matmul(&b).unwrap();
        let seq = a.matmul_seq(&b).unwrap();
        assert_eq!(par.data(), seq.data());
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let a = DenseMatrix::zeros(2, 3);
        let b = DenseMatrix::zeros(2, 3);
        assert!(matches!(a.matmul(&b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn transpose_round_trip() {
        let a = DenseMatrix::from_rows(vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(a.transpose().transpose(), a);
        assert_eq!(a.transpose().get(2, 1), 6.0);
    }
}
