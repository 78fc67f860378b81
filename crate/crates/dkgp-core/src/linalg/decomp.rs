//! Dense factorizations: Cholesky (with the kernel-matrix jitter policy) and
//! a cyclic Jacobi symmetric eigensolver.

use super::{check_symmetric, dot, DenseMatrix};
use crate::error::{Error, Result};

/// Lower Cholesky factor `L` with `L * L^T = A`.
///
/// `A` must be square, symmetric to `1e-10` relative, and positive definite.
/// No jitter is applied here; see [`cholesky_jittered`] for the policy used on
/// kernel-derived matrices.
pub fn cholesky(a: &DenseMatrix) -> Result<DenseMatrix> {
    check_symmetric(a, "cholesky")?;
    let n = a.rows();
    let mut l = DenseMatrix::zeros(n, n);
    for i in 0..n {
        // Rows 0..i of `l` are final; row i is built left to right.
        let (done, rest) = l.data_mut().split_at_mut(i * n);
        let row_i = &mut rest[..n];
        for j in 0..i {
            let row_j = &done[j * n..j * n + j];
            let s = a.get(i, j) - dot(&row_i[..j], row_j);
            row_i[j] = s / done[j * n + j];
        }
        let pivot = a.get(i, i) - dot(&row_i[..i], &row_i[..i]);
        if pivot <= 0.0 || !pivot.is_finite() {
            return Err(Error::NotPositiveDefinite { index: i, pivot });
        }
        row_i[i] = pivot.sqrt();
    }
    Ok(l)
}

/// Cholesky with the jitter ladder used for kernel-derived matrices: try the
/// matrix as given, then retry with `1e-6 * mean(diag)` added to the diagonal,
/// then `1e-4 * mean(diag)`. Returns the factor and the jitter that succeeded
/// (0.0 when none was needed).
pub fn cholesky_jittered(a: &DenseMatrix) -> Result<(DenseMatrix, f64)> {
    match cholesky(a) {
        Ok(l) => return Ok((l, 0.0)),
        Err(Error::NotPositiveDefinite { .. }) => {}
        Err(e) => return Err(e),
    }
    let mean_diag = a.mean_diag().abs();
    let mut last = Error::NotPositiveDefinite { index: 0, pivot: 0.0 };
    for scale in [1e-6, 1e-4] {
        let jitter = scale * mean_diag;
        let mut aj = a.clone();
        aj.add_diagonal(jitter);
        match cholesky(&aj) {
            Ok(l) => return Ok((l, jitter)),
            Err(e @ Error::NotPositiveDefinite { .. }) => last = e,
            Err(e) => return Err(e),
        }
    }
    Err(last)
}

/// Solve `L x = b` for lower-triangular `L` (forward substitution).
pub fn solve_lower(l: &DenseMatrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = l.rows();
    if b.len() != n {
        return Err(Error::DimensionMismatch { op: "solve_lower", expected: n, got: b.len() });
    }
    let mut x = vec![0.0; n];
    for i in 0..n {
        let row = l.row(i);
        x[i] = (b[i] - dot(&row[..i], &x[..i])) / row[i];
    }
    Ok(x)
}

/// Solve `L^T x = b` for lower-triangular `L` (back substitution).
pub fn solve_lower_transpose(l: &DenseMatrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = l.rows();
    if b.len() != n {
        return Err(Error::DimensionMismatch {
            op: "solve_lower_transpose",
            expected: n,
            got: b.len(),
        });
    }
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        // Column i of L below the diagonal is row i of L^T right of it.
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= l.get(k, i) * x[k];
        }
        x[i] = s / l.get(i, i);
    }
    Ok(x)
}

/// Solve `A X = B` for symmetric positive definite `A` via Cholesky.
/// `B` is a matrix of right-hand-side columns.
pub fn solve_psd(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.rows() != b.rows() {
        return Err(Error::ShapeMismatch {
            op: "solve_psd",
            left_rows: a.rows(),
            left_cols: a.cols(),
            right_rows: b.rows(),
            right_cols: b.cols(),
        });
    }
    let l = cholesky(a)?;
    let n = a.rows();
    let mut out = DenseMatrix::zeros(n, b.cols());
    let mut col = vec![0.0; n];
    for j in 0..b.cols() {
        for i in 0..n {
            col[i] = b.get(i, j);
        }
        let y = solve_lower(&l, &col)?;
        let x = solve_lower_transpose(&l, &y)?;
        for i in 0..n {
            out.set(i, j, x[i]);
        }
    }
    Ok(out)
}

/// `A^{-1}` from the lower Cholesky factor of `A`, column by column, with
/// the result symmetrized so downstream formulas stay exactly symmetric.
pub fn inverse_from_cholesky(l: &DenseMatrix) -> Result<DenseMatrix> {
    let n = l.rows();
    let mut inv = DenseMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let half = solve_lower(l, &e)?;
        let col = solve_lower_transpose(l, &half)?;
        for i in 0..n {
            inv.set(i, j, col[i]);
        }
        e[j] = 0.0;
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (inv.get(i, j) + inv.get(j, i));
            inv.set(i, j, m);
            inv.set(j, i, m);
        }
    }
    Ok(inv)
}

/// Eigendecomposition of a symmetric matrix, eigenvalues descending.
#[derive(Clone, Debug)]
pub struct SymEigen {
    /// Eigenvalues, largest first.
    pub values: Vec<f64>,
    /// Eigenvectors as columns, ordered to match `values`.
    pub vectors: DenseMatrix,
}

/// Cyclic Jacobi eigensolver for symmetric matrices.
///
/// Rotations run in a fixed (row-cyclic) order, so results are deterministic.
/// Converges when the off-diagonal Frobenius mass falls below `1e-14` of the
/// total, erroring out after 64 sweeps.
pub fn sym_eigen(a: &DenseMatrix) -> Result<SymEigen> {
    check_symmetric(a, "sym_eigen")?;
    let n = a.rows();
    if n == 0 {
        return Ok(SymEigen { values: vec![], vectors: DenseMatrix::zeros(0, 0) });
    }
    let mut m = a.clone();
    let mut v = DenseMatrix::identity(n);
    let total = m.frob_norm().max(f64::MIN_POSITIVE);
    let max_sweeps = 64;
    for sweep in 0..=max_sweeps {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m.get(i, j) * m.get(i, j);
            }
        }
        let off = (2.0 * off).sqrt();
        if off <= 1e-14 * total {
            break;
        }
        if sweep == max_sweeps {
            return Err(Error::NoConvergence {
                method: "sym_eigen",
                iterations: max_sweeps,
                residual: off / total,
            });
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                // Classic Jacobi rotation: tan via the stable root of
                // t^2 + 2 t theta - 1 = 0, theta = (aqq - app) / (2 apq).
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // Apply G^T M G and V G for the (p, q) rotation.
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| m.get(i, i)).collect();
    order.sort_by(|&i, &j| diag[j].partial_cmp(&diag[i]).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let mut vectors = DenseMatrix::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        for k in 0..n {
            vectors.set(k, new_col, v.get(k, old_col));
        }
    }
    Ok(SymEigen { values, vectors })
}
