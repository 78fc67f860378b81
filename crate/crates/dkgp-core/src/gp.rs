//! Exact GP regression: marginal likelihood, its gradient, and the
//! predictive posterior.
//!
//! With `K = k(X, X) + sigma_y^2 I` and targets centered by the constant
//! mean, the negative log marginal likelihood is
//!
//! ```text
//! NLL = 1/2 [ (y-c)^T K^-1 (y-c) + log|K| + n log 2pi ]
//! ```
//!
//! and the posterior at test points `X*` is
//!
//! ```text
//! mean = c + k(X*, X) K^-1 (y - c)
//! cov  = k(X*, X*) - k(X*, X) K^-1 k(X, X*)
//! ```
//!
//! Everything here goes through one Cholesky factorization of `K`; the
//! gradient path additionally uses the identity `dNLL/dK = 1/2 (K^-1 -
//! alpha alpha^T)` with `alpha = K^-1 (y-c)`, which is what lets the tape
//! treat the factorization as a single fused primitive instead of
//! differentiating it entry by entry.

use crate::autodiff::{Tape, TracedValue};
use crate::error::{Error, Result};
use crate::kernels::{
    add_noise_traced, deep_kernel_matrix, deep_kernel_traced, kernel_diag, trace_deep_kernel,
    DeepKernelParams, TracedDeepKernel,
};
use crate::linalg::{cholesky_jittered, dot, inverse_from_cholesky, solve_lower, solve_lower_transpose, DenseMatrix};

/// Posterior second moment, either the full test-covariance matrix or just
/// its diagonal (the latter is what large benchmark sweeps ask for).
#[derive(Clone, Debug)]
pub enum PosteriorCovariance {
    Full(DenseMatrix),
    DiagonalOnly(Vec<f64>),
}

/// Predictive distribution at a batch of test points.
#[derive(Clone, Debug)]
pub struct PosteriorPrediction {
    pub mean: Vec<f64>,
    pub covariance: PosteriorCovariance,
    /// Whether the observation noise was added to the variances.
    pub includes_noise: bool,
}

impl PosteriorPrediction {
    /// Per-point predictive variances (the covariance diagonal).
    pub fn variance(&self) -> Vec<f64> {
        match &self.covariance {
            PosteriorCovariance::Full(c) => c.diag(),
            PosteriorCovariance::DiagonalOnly(v) => v.clone(),
        }
    }

    /// Per-point predictive standard deviations.
    pub fn std(&self) -> Vec<f64> {
        self.variance().into_iter().map(f64::sqrt).collect()
    }
}

pub(crate) fn ln_2pi() -> f64 {
    std::f64::consts::TAU.ln()
}

fn check_targets(x: &DenseMatrix, y: &[f64], op: &'static str) -> Result<()> {
    if x.rows() == 0 {
        return Err(Error::DimensionMismatch { op, expected: 1, got: 0 });
    }
    if y.len() != x.rows() {
        return Err(Error::DimensionMismatch { op, expected: x.rows(), got: y.len() });
    }
    Ok(())
}

/// Build the noisy training Gram matrix `k(X, X) + sigma_y^2 I`.
fn noisy_gram(dk: &DeepKernelParams, x: &DenseMatrix) -> Result<DenseMatrix> {
    let mut k = deep_kernel_matrix(dk, x, x)?;
    k.add_diagonal(dk.base.noise_variance());
    Ok(k)
}

/// Negative log marginal likelihood of the targets under the deep-kernel
/// prior, constant term included.
pub fn gp_nll(dk: &DeepKernelParams, x: &DenseMatrix, y: &[f64]) -> Result<f64> {
    check_targets(x, y, "gp_nll")?;
    let k = noisy_gram(dk, x)?;
    let c = dk.base.mean_constant;
    let yc: Vec<f64> = y.iter().map(|v| v - c).collect();
    let (l, _) = cholesky_jittered(&k)?;
    let half = solve_lower(&l, &yc)?;
    let quad = dot(&half, &half);
    let logdet = 2.0 * l.diag().iter().map(|d| d.ln()).sum::<f64>();
    let n = x.rows() as f64;
    Ok(0.5 * (quad + logdet + n * ln_2pi()))
}

/// `K^-1 - alpha alpha^T` from an already-inverted kernel and
/// `alpha = K^-1 (y - c)`. This is the derivative of `quad + logdet` with
/// respect to `K`; the autodiff tape's fused likelihood primitive calls it
/// for its pullback, and [`dnll_dk`] halves it.
pub(crate) fn dq_dk_from_parts(kinv: &DenseMatrix, alpha: &[f64]) -> DenseMatrix {
    let n = alpha.len();
    let mut out = kinv.clone();
    for i in 0..n {
        for j in 0..n {
            let v = out.get(i, j) - alpha[i] * alpha[j];
            out.set(i, j, v);
        }
    }
    out
}

/// Derivative of the NLL with respect to every entry of the noisy Gram
/// matrix: `1/2 (K^-1 - alpha alpha^T)`, symmetric.
pub fn dnll_dk(k_noisy: &DenseMatrix, y_centered: &[f64]) -> Result<DenseMatrix> {
    if y_centered.len() != k_noisy.rows() {
        return Err(Error::DimensionMismatch {
            op: "dnll_dk",
            expected: k_noisy.rows(),
            got: y_centered.len(),
        });
    }
    let (l, _) = cholesky_jittered(k_noisy)?;
    let half = solve_lower(&l, y_centered)?;
    let alpha = solve_lower_transpose(&l, &half)?;
    let kinv = inverse_from_cholesky(&l)?;
    Ok(dq_dk_from_parts(&kinv, &alpha).scale(0.5))
}

/// Record the full NLL on a tape: traced kernel, noise, centering, the fused
/// quadform-plus-logdet primitive, and the constant term.
pub fn gp_nll_traced(
    tape: &mut Tape,
    dk: &TracedDeepKernel,
    x: &DenseMatrix,
    y: &[f64],
) -> Result<TracedValue> {
    check_targets(x, y, "gp_nll_traced")?;
    let n = x.rows();
    let xv = tape.constant(x.clone());
    let k = deep_kernel_traced(tape, dk, xv)?;
    let k_noisy = add_noise_traced(tape, k, dk.hypers.log_noise_variance)?;
    let y_col = tape.constant(DenseMatrix::column(y));
    let centered = tape.sub(y_col, dk.hypers.mean_constant)?;
    let fused = tape.cholesky_logdet_quadform(k_noisy, centered)?;
    let const_term = tape.constant(DenseMatrix::scalar(n as f64 * ln_2pi()));
    let summed = tape.add(fused, const_term)?;
    let half = tape.constant(DenseMatrix::scalar(0.5));
    tape.mul(summed, half)
}

/// NLL value and its gradient with respect to every trainable parameter, in
/// [`DeepKernelParams::flatten_into`] order. Parameters that do not reach the
/// output (a variance pinned at its floor) get zero entries.
pub fn gp_nll_grad(dk: &DeepKernelParams, x: &DenseMatrix, y: &[f64]) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let traced = trace_deep_kernel(&mut tape, dk);
    let nll = gp_nll_traced(&mut tape, &traced, x, y)?;
    let grads = tape.backward(nll)?;
    let mut flat = Vec::with_capacity(dk.param_count());
    for leaf in traced.leaves() {
        match grads.wrt(leaf) {
            Some(g) => flat.extend_from_slice(g.data()),
            None => flat.extend(std::iter::repeat(0.0).take(tape.value(leaf).data().len())),
        }
    }
    debug_assert_eq!(flat.len(), dk.param_count());
    Ok((tape.value(nll).get(0, 0), flat))
}

/// Round-off guard for posterior variances: tiny negative values are zeroed,
/// anything below `-1e-8` is treated as a real positive-definiteness failure.
fn clamp_variance(value: f64, index: usize) -> Result<f64> {
    if value < -1e-8 {
        return Err(Error::NotPositiveDefinite { index, pivot: value });
    }
    Ok(value.max(0.0))
}

/// Shared solve work for prediction: returns the centered-target weights
/// `alpha = K^-1 (y-c)` and `V` (`n* x n`) whose rows are `L^-1 k(X, x*_i)`.
fn predict_parts(
    dk: &DeepKernelParams,
    x: &DenseMatrix,
    y: &[f64],
    xstar: &DenseMatrix,
    op: &'static str,
) -> Result<(Vec<f64>, DenseMatrix, DenseMatrix)> {
    check_targets(x, y, op)?;
    if xstar.cols() != x.cols() {
        return Err(Error::DimensionMismatch { op, expected: x.cols(), got: xstar.cols() });
    }
    let k = noisy_gram(dk, x)?;
    let (l, _) = cholesky_jittered(&k)?;
    let c = dk.base.mean_constant;
    let yc: Vec<f64> = y.iter().map(|v| v - c).collect();
    let half = solve_lower(&l, &yc)?;
    let alpha = solve_lower_transpose(&l, &half)?;
    let ks = deep_kernel_matrix(dk, xstar, x)?;
    let (m, n) = ks.shape();
    let mut v = DenseMatrix::zeros(m, n);
    for i in 0..m {
        let row = solve_lower(&l, ks.row(i))?;
        v.data_mut()[i * n..(i + 1) * n].copy_from_slice(&row);
    }
    let mean: Vec<f64> = (0..m).map(|i| c + dot(ks.row(i), &alpha)).collect();
    Ok((mean, v, ks))
}

/// Predictive posterior with the full test-covariance matrix.
pub fn gp_predict(
    dk: &DeepKernelParams,
    x: &DenseMatrix,
    y: &[f64],
    xstar: &DenseMatrix,
    include_noise: bool,
) -> Result<PosteriorPrediction> {
    let (mean, v, _) = predict_parts(dk, x, y, xstar, "gp_predict")?;
    let kss = deep_kernel_matrix(dk, xstar, xstar)?;
    let m = xstar.rows();
    let n = v.cols();
    let mut cov = DenseMatrix::zeros(m, m);
    for i in 0..m {
        let vi = &v.data()[i * n..(i + 1) * n];
        for j in i..m {
            let vj = &v.data()[j * n..(j + 1) * n];
            let val = kss.get(i, j) - dot(vi, vj);
            cov.set(i, j, val);
            cov.set(j, i, val);
        }
    }
    let noise = dk.base.noise_variance();
    for i in 0..m {
        let mut d = clamp_variance(cov.get(i, i), i)?;
        if include_noise {
            d += noise;
        }
        cov.set(i, i, d);
    }
    Ok(PosteriorPrediction {
        mean,
        covariance: PosteriorCovariance::Full(cov),
        includes_noise: include_noise,
    })
}

/// Predictive posterior keeping only per-point variances; what the benchmark
/// sweeps use, since they never need test-point cross-covariances.
pub fn gp_predict_diag(
    dk: &DeepKernelParams,
    x: &DenseMatrix,
    y: &[f64],
    xstar: &DenseMatrix,
    include_noise: bool,
) -> Result<PosteriorPrediction> {
    let (mean, v, _) = predict_parts(dk, x, y, xstar, "gp_predict_diag")?;
    let prior = kernel_diag(dk, xstar);
    let n = v.cols();
    let noise = dk.base.noise_variance();
    let mut var = Vec::with_capacity(xstar.rows());
    for i in 0..xstar.rows() {
        let vi = &v.data()[i * n..(i + 1) * n];
        let mut d = clamp_variance(prior[i] - dot(vi, vi), i)?;
        if include_noise {
            d += noise;
        }
        var.push(d);
    }
    Ok(PosteriorPrediction {
        mean,
        covariance: PosteriorCovariance::DiagonalOnly(var),
        includes_noise: include_noise,
    })
}
