//! Compressed sparse row matrices and symmetric tridiagonal matrices.

use super::DenseMatrix;
use crate::error::{Error, Result};

/// CSR matrix.
///
/// Invariants: `indptr` is monotone with `indptr[0] == 0` and
/// `indptr[rows] == values.len()`; within each row the column indices are
/// strictly increasing (sorted, no duplicates).
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRowMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseRowMatrix {
    /// Build from per-row `(column, value)` entries. Entries in a row are
    /// sorted by column and duplicates are summed (stencils clamped at a grid
    /// boundary fold their weight onto the boundary node).
    pub fn from_row_entries(rows: usize, cols: usize, entries: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        if entries.len() != rows {
            return Err(Error::DimensionMismatch {
                op: "SparseRowMatrix::from_row_entries",
                expected: rows,
                got: entries.len(),
            });
        }
        let mut indptr = Vec::with_capacity(rows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for (r, mut row) in entries.into_iter().enumerate() {
            row.sort_by_key(|&(c, _)| c);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
            for (c, v) in row {
                if c >= cols {
                    return Err(Error::DimensionMismatch {
                        op: "SparseRowMatrix::from_row_entries",
                        expected: cols,
                        got: c,
                    });
                }
                match merged.last_mut() {
                    Some((lc, lv)) if *lc == c => *lv += v,
                    _ => merged.push((c, v)),
                }
            }
            let _ = r;
            for (c, v) in merged {
                indices.push(c);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Ok(Self { rows, cols, indptr, indices, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `(columns, values)` of one row.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let lo = self.indptr[i];
        let hi = self.indptr[i + 1];
        (&self.indices[lo..hi], &self.values[lo..hi])
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                out.set(i, c, v);
            }
        }
        out
    }
}

/// `w * v` for CSR `w`.
pub fn sparse_matvec(w: &SparseRowMatrix, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != w.cols {
        return Err(Error::DimensionMismatch { op: "sparse_matvec", expected: w.cols, got: v.len() });
    }
    let mut out = vec![0.0; w.rows];
    for i in 0..w.rows {
        let (cols, vals) = w.row(i);
        let mut s = 0.0;
        for (&c, &x) in cols.iter().zip(vals) {
            s += x * v[c];
        }
        out[i] = s;
    }
    Ok(out)
}

/// `w^T * v` for CSR `w`, accumulated in row order (deterministic).
pub fn sparse_matvec_transpose(w: &SparseRowMatrix, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != w.rows {
        return Err(Error::DimensionMismatch {
            op: "sparse_matvec_transpose",
            expected: w.rows,
            got: v.len(),
        });
    }
    let mut out = vec![0.0; w.cols];
    for i in 0..w.rows {
        let (cols, vals) = w.row(i);
        for (&c, &x) in cols.iter().zip(vals) {
            out[c] += x * v[i];
        }
    }
    Ok(out)
}

/// Symmetric tridiagonal matrix: `diag` of length k, `offdiag` of length k-1.
#[derive(Clone, Debug, PartialEq)]
pub struct SymTridiagonal {
    pub diag: Vec<f64>,
    pub offdiag: Vec<f64>,
}

impl SymTridiagonal {
    pub fn order(&self) -> usize {
        self.diag.len()
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let k = self.diag.len();
        let mut out = DenseMatrix::zeros(k, k);
        for i in 0..k {
            out.set(i, i, self.diag[i]);
        }
        for i in 0..self.offdiag.len() {
            out.set(i, i + 1, self.offdiag[i]);
            out.set(i + 1, i, self.offdiag[i]);
        }
        out
    }

    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        let k = self.diag.len();
        if v.len() != k {
            return Err(Error::DimensionMismatch {
                op: "SymTridiagonal::mul_vec",
                expected: k,
                got: v.len(),
            });
        }
        let mut out = vec![0.0; k];
        for i in 0..k {
            let mut s = self.diag[i] * v[i];
            if i > 0 {
                s += self.offdiag[i - 1] * v[i - 1];
            }
            if i + 1 < k {
                s += self.offdiag[i] * v[i + 1];
            }
            out[i] = s;
        }
        Ok(out)
    }
}
