//! Matrix-free iterative methods: conjugate gradients and Lanczos
//! tridiagonalization with full reorthogonalization.

use super::{dot, norm2, DenseMatrix, SymTridiagonal};
use crate::error::{Error, Result};

/// Converged CG solve.
#[derive(Clone, Debug)]
pub struct CgSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Final residual norm relative to `|b|`.
    pub residual: f64,
}

/// Conjugate gradients on a symmetric positive definite operator given only
/// as a matvec. Converges when `|r| <= tol * |b|`; errors with
/// [`Error::NoConvergence`] after `max_iter` iterations.
pub fn conjugate_gradient<F>(mvm: F, b: &[f64], tol: f64, max_iter: usize) -> Result<CgSolution>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let n = b.len();
    let b_norm = norm2(b);
    if b_norm == 0.0 {
        return Ok(CgSolution { x: vec![0.0; n], iterations: 0, residual: 0.0 });
    }
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    for iter in 1..=max_iter {
        let ap = mvm(&p);
        debug_assert_eq!(ap.len(), n);
        let pap = dot(&p, &ap);
        if pap <= 0.0 || !pap.is_finite() {
            return Err(Error::NoConvergence {
                method: "conjugate_gradient",
                iterations: iter,
                residual: rr.sqrt() / b_norm,
            });
        }
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_next = dot(&r, &r);
        if rr_next.sqrt() <= tol * b_norm {
            return Ok(CgSolution { x, iterations: iter, residual: rr_next.sqrt() / b_norm });
        }
        let beta = rr_next / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_next;
    }
    Err(Error::NoConvergence {
        method: "conjugate_gradient",
        iterations: max_iter,
        residual: rr.sqrt() / b_norm,
    })
}

/// Partial Lanczos factorization `A ~= Q T Q^T`.
#[derive(Clone, Debug)]
pub struct LanczosFactorization {
    /// Orthonormal basis, one column per Lanczos vector (`n x k`).
    pub basis: DenseMatrix,
    /// Symmetric tridiagonal projection of the operator (`k x k`).
    pub tridiag: SymTridiagonal,
    /// True when the Krylov space closed before reaching the requested rank;
    /// the factorization is then exact on that subspace but shorter.
    pub broke_down: bool,
}

/// Lanczos tridiagonalization of a symmetric operator with full
/// reorthogonalization (two Gram-Schmidt passes against every stored vector).
///
/// `seed` is the starting vector; it is normalized internally. If the
/// residual norm underflows before `rank` steps the shorter factorization is
/// returned with `broke_down` set.
pub fn lanczos<F>(mvm: F, seed: &[f64], rank: usize) -> Result<LanczosFactorization>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let n = seed.len();
    if rank == 0 || rank > n {
        return Err(Error::RankTooLarge { rank, n });
    }
    let seed_norm = norm2(seed);
    if seed_norm == 0.0 || !seed_norm.is_finite() {
        return Err(Error::ZeroVector { op: "lanczos" });
    }
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(rank);
    q.push(seed.iter().map(|v| v / seed_norm).collect());
    let mut alpha = Vec::with_capacity(rank);
    let mut beta = Vec::new();
    let mut broke_down = false;
    let scale = {
        let aq = mvm(&q[0]);
        let a0 = dot(&q[0], &aq);
        alpha.push(a0);
        let mut w: Vec<f64> = aq.iter().zip(&q[0]).map(|(a, qv)| a - a0 * qv).collect();
        reorthogonalize(&mut w, &q);
        let s = a0.abs().max(norm2(&w)).max(1e-30);
        let b = norm2(&w);
        if rank > 1 {
            if b <= 1e-12 * s {
                broke_down = true;
            } else {
                beta.push(b);
                q.push(w.iter().map(|v| v / b).collect());
            }
        }
        s
    };
    while !broke_down && q.len() < rank {
        let j = q.len() - 1;
        let aq = mvm(&q[j]);
        let a = dot(&q[j], &aq);
        alpha.push(a);
        let mut w: Vec<f64> = (0..n)
            .map(|i| aq[i] - a * q[j][i] - beta[j - 1] * q[j - 1][i])
            .collect();
        reorthogonalize(&mut w, &q);
        let b = norm2(&w);
        if b <= 1e-12 * scale.max(a.abs()) {
            broke_down = true;
        } else {
            beta.push(b);
            q.push(w.iter().map(|v| v / b).collect());
        }
    }
    // Last alpha when the loop appended a vector without visiting it.
    if alpha.len() < q.len() {
        let j = q.len() - 1;
        let aq = mvm(&q[j]);
        alpha.push(dot(&q[j], &aq));
    }
    let k = q.len();
    let mut basis = DenseMatrix::zeros(n, k);
    for (j, col) in q.iter().enumerate() {
        for i in 0..n {
            basis.set(i, j, col[i]);
        }
    }
    Ok(LanczosFactorization {
        basis,
        tridiag: SymTridiagonal { diag: alpha[..k].to_vec(), offdiag: beta[..k.saturating_sub(1)].to_vec() },
        broke_down,
    })
}

/// Two classical Gram-Schmidt passes against every stored basis vector.
fn reorthogonalize(w: &mut [f64], q: &[Vec<f64>]) {
    for _ in 0..2 {
        for col in q {
            let proj = dot(w, col);
            for (wi, ci) in w.iter_mut().zip(col) {
                *wi -= proj * ci;
            }
        }
    }
}
