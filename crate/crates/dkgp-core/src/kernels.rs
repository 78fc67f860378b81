//! ARD-RBF base kernel and its deep-kernel composition.
//!
//! The base kernel over q-dimensional inputs is
//!
//! ```text
//! k(x, x') = sigma^2 exp( -1/2 sum_d (x_d - x'_d)^2 / l_d^2 )
//! ```
//!
//! with one lengthscale per dimension (automatic relevance determination)
//! and a constant mean `c` handled by the GP layer. The deep kernel runs
//! both arguments through a shared feature map first:
//! `k_deep(x, x') = k(phi(x), phi(x'))`.
//!
//! All strictly positive hyperparameters are stored as logs so the optimizer
//! works unconstrained; the variances get a hard floor of [`VARIANCE_FLOOR`]
//! at every use site, which keeps solves positive definite even if the
//! optimizer drives a log-parameter toward negative infinity.

use crate::autodiff::{Tape, TracedValue};
use crate::error::{Error, Result};
use crate::features::{
    feature_forward, feature_forward_traced, trace_feature, FeatureParams, TracedFeature,
};
use crate::linalg::{dot, DenseMatrix};
use crate::par;

/// Lower bound applied to the noise and signal variances wherever their
/// exponentiated values are consumed.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Base-kernel hyperparameters plus the constant mean, all unconstrained:
/// positivity comes from exponentiation at the use site.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelHyperparams {
    /// One log-lengthscale per base-kernel input dimension.
    pub log_lengthscales: Vec<f64>,
    pub log_signal_variance: f64,
    pub log_noise_variance: f64,
    pub mean_constant: f64,
}

impl KernelHyperparams {
    /// Defaults: unit lengthscales and signal variance, noise variance 0.01,
    /// mean at the supplied target average. With rank-normalized inputs the
    /// unit scales start in the right regime.
    pub fn init(dims: usize, y_mean: f64) -> Self {
        Self {
            log_lengthscales: vec![0.0; dims],
            log_signal_variance: 0.0,
            log_noise_variance: 0.01f64.ln(),
            mean_constant: y_mean,
        }
    }

    pub fn dims(&self) -> usize {
        self.log_lengthscales.len()
    }

    pub fn lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|l| l.exp()).collect()
    }

    pub fn signal_variance(&self) -> f64 {
        self.log_signal_variance.exp().max(VARIANCE_FLOOR)
    }

    pub fn noise_variance(&self) -> f64 {
        self.log_noise_variance.exp().max(VARIANCE_FLOOR)
    }

    /// `dims + 3` scalars: lengthscales, signal, noise, mean.
    pub fn param_count(&self) -> usize {
        self.dims() + 3
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.log_lengthscales);
        out.push(self.log_signal_variance);
        out.push(self.log_noise_variance);
        out.push(self.mean_constant);
    }

    pub fn write_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.param_count();
        if flat.len() != expected {
            return Err(Error::DimensionMismatch { op: "write_flat", expected, got: flat.len() });
        }
        let q = self.dims();
        self.log_lengthscales.copy_from_slice(&flat[..q]);
        self.log_signal_variance = flat[q];
        self.log_noise_variance = flat[q + 1];
        self.mean_constant = flat[q + 2];
        Ok(())
    }

    /// JSON object with 17-significant-digit floats (see
    /// [`crate::features::feature_params_to_json`] for the rationale).
    pub fn to_json(&self) -> serde_json::Value {
        use crate::features::{float_value, json_floats};
        serde_json::json!({
            "log_lengthscales": json_floats(&self.log_lengthscales),
            "log_signal_variance": float_value(self.log_signal_variance),
            "log_noise_variance": float_value(self.log_noise_variance),
            "mean_constant": float_value(self.mean_constant),
        })
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        use crate::features::floats_from_json;
        let field = |name: &str| -> Result<f64> {
            v.get(name).and_then(|x| x.as_f64()).ok_or_else(|| {
                Error::InvalidConfig(format!("hyperparameters need a numeric {name:?}"))
            })
        };
        let lls = v
            .get("log_lengthscales")
            .ok_or_else(|| Error::InvalidConfig("hyperparameters need log_lengthscales".into()))?;
        Ok(Self {
            log_lengthscales: floats_from_json(lls)?,
            log_signal_variance: field("log_signal_variance")?,
            log_noise_variance: field("log_noise_variance")?,
            mean_constant: field("mean_constant")?,
        })
    }
}

/// Full trainable state of a deep-kernel GP: the feature map (possibly
/// `Identity`) and the base-kernel hyperparameters over its output space.
#[derive(Clone, Debug, PartialEq)]
pub struct DeepKernelParams {
    pub feature: FeatureParams,
    pub base: KernelHyperparams,
}

impl DeepKernelParams {
    pub fn param_count(&self) -> usize {
        self.feature.param_count() + self.base.param_count()
    }

    /// Feature parameters first, then the hyperparameters; this is the order
    /// the training loop's flat parameter vector uses.
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        self.feature.flatten_into(out);
        self.base.flatten_into(out);
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.flatten_into(&mut out);
        out
    }

    pub fn write_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.param_count();
        if flat.len() != expected {
            return Err(Error::DimensionMismatch { op: "write_flat", expected, got: flat.len() });
        }
        let split = self.feature.param_count();
        self.feature.write_flat(&flat[..split])?;
        self.base.write_flat(&flat[split..])
    }
}

/// Scale each column `k` of `x` by `factors[k]`.
fn scale_columns(x: &DenseMatrix, factors: &[f64]) -> DenseMatrix {
    let (n, q) = x.shape();
    let mut out = DenseMatrix::zeros(n, q);
    for i in 0..n {
        for k in 0..q {
            out.set(i, k, x.get(i, k) * factors[k]);
        }
    }
    out
}

/// ARD-RBF Gram matrix between the rows of `x1` and `x2` (noise excluded).
///
/// Distances use the expanded form `|a|^2 + |b|^2 - 2 a.b` on inputs
/// pre-scaled by the inverse lengthscales, clamped at zero against negative
/// round-off. When `x1` and `x2` hold the same data the clamp never fires on
/// the diagonal: the three dot products are the same number, so the expansion
/// cancels exactly and `k(x, x) == sigma^2` bitwise.
pub fn rbf_matrix(hp: &KernelHyperparams, x1: &DenseMatrix, x2: &DenseMatrix) -> Result<DenseMatrix> {
    let q = hp.dims();
    if x1.cols() != q {
        return Err(Error::DimensionMismatch { op: "rbf_matrix", expected: q, got: x1.cols() });
    }
    if x2.cols() != q {
        return Err(Error::DimensionMismatch { op: "rbf_matrix", expected: q, got: x2.cols() });
    }
    let inv_ls: Vec<f64> = hp.log_lengthscales.iter().map(|l| (-l).exp()).collect();
    let a = scale_columns(x1, &inv_ls);
    let b = scale_columns(x2, &inv_ls);
    let norm_sq = |m: &DenseMatrix| -> Vec<f64> {
        (0..m.rows()).map(|i| dot(m.row(i), m.row(i))).collect()
    };
    let na = norm_sq(&a);
    let nb = norm_sq(&b);
    let sig = hp.signal_variance();
    let (n1, n2) = (x1.rows(), x2.rows());
    let mut out = DenseMatrix::zeros(n1, n2);
    let (ad, bd) = (a.data(), b.data());
    par::for_each_row(out.data_mut(), n2.max(1), |i, row| {
        let ai = &ad[i * q..(i + 1) * q];
        for (j, slot) in row.iter_mut().enumerate() {
            let d2 = (na[i] + nb[j] - 2.0 * dot(ai, &bd[j * q..(j + 1) * q])).max(0.0);
            *slot = sig * (-0.5 * d2).exp();
        }
    });
    Ok(out)
}

/// Deep kernel: RBF over the feature map's outputs. With the `Identity`
/// feature this is exactly [`rbf_matrix`] on the raw inputs.
pub fn deep_kernel_matrix(
    dk: &DeepKernelParams,
    x1: &DenseMatrix,
    x2: &DenseMatrix,
) -> Result<DenseMatrix> {
    let z1 = feature_forward(&dk.feature, x1)?;
    let z2 = if std::ptr::eq(x1, x2) { z1.clone() } else { feature_forward(&dk.feature, x2)? };
    rbf_matrix(&dk.base, &z1, &z2)
}

/// Diagonal of the deep kernel: the RBF diagonal is constant at the signal
/// variance, independent of the inputs.
pub fn kernel_diag(dk: &DeepKernelParams, x: &DenseMatrix) -> Vec<f64> {
    vec![dk.base.signal_variance(); x.rows()]
}

// ---------------------------------------------------------------------------
// Traced construction
// ---------------------------------------------------------------------------

/// Tape leaves for the hyperparameters: the lengthscale vector is a `1 x q`
/// leaf, the three scalars are `1 x 1`.
#[derive(Clone, Copy, Debug)]
pub struct TracedHyperparams {
    pub log_lengthscales: TracedValue,
    pub log_signal_variance: TracedValue,
    pub log_noise_variance: TracedValue,
    pub mean_constant: TracedValue,
}

pub fn trace_hyperparams(tape: &mut Tape, hp: &KernelHyperparams) -> TracedHyperparams {
    let q = hp.dims();
    TracedHyperparams {
        log_lengthscales: tape.leaf(
            DenseMatrix::new(1, q, hp.log_lengthscales.clone()).expect("row vector"),
        ),
        log_signal_variance: tape.leaf(DenseMatrix::scalar(hp.log_signal_variance)),
        log_noise_variance: tape.leaf(DenseMatrix::scalar(hp.log_noise_variance)),
        mean_constant: tape.leaf(DenseMatrix::scalar(hp.mean_constant)),
    }
}

/// Tape handles for everything trainable in a deep-kernel model.
#[derive(Clone, Debug)]
pub struct TracedDeepKernel {
    pub feature: TracedFeature,
    pub hypers: TracedHyperparams,
}

impl TracedDeepKernel {
    /// Leaves in [`DeepKernelParams::flatten_into`] order.
    pub fn leaves(&self) -> Vec<TracedValue> {
        let mut out = self.feature.leaves();
        out.extend([
            self.hypers.log_lengthscales,
            self.hypers.log_signal_variance,
            self.hypers.log_noise_variance,
            self.hypers.mean_constant,
        ]);
        out
    }
}

pub fn trace_deep_kernel(tape: &mut Tape, dk: &DeepKernelParams) -> TracedDeepKernel {
    TracedDeepKernel {
        feature: trace_feature(tape, &dk.feature),
        hypers: trace_hyperparams(tape, &dk.base),
    }
}

/// Record the noise-free deep-kernel Gram matrix `K(X, X)` on the tape:
/// features, per-dimension inverse-lengthscale scaling, pairwise squared
/// distances, and `sigma^2 exp(-d^2/2)`.
///
/// If the stored signal variance is below [`VARIANCE_FLOOR`] the floor is
/// substituted as a constant (zero gradient), mirroring the floor the plain
/// evaluation applies.
pub fn deep_kernel_traced(
    tape: &mut Tape,
    dk: &TracedDeepKernel,
    x: TracedValue,
) -> Result<TracedValue> {
    let z = feature_forward_traced(tape, &dk.feature, x)?;
    let q = tape.value(z).cols();
    if tape.value(dk.hypers.log_lengthscales).cols() != q {
        return Err(Error::DimensionMismatch {
            op: "deep_kernel_traced",
            expected: q,
            got: tape.value(dk.hypers.log_lengthscales).cols(),
        });
    }
    let minus_one = tape.constant(DenseMatrix::scalar(-1.0));
    let neg_ls = tape.mul(dk.hypers.log_lengthscales, minus_one)?;
    let inv_ls = tape.exp(neg_ls);
    let scaled = tape.mul(z, inv_ls)?;
    let sq = tape.pairwise_sqdist(scaled);
    let minus_half = tape.constant(DenseMatrix::scalar(-0.5));
    let scaled_sq = tape.mul(sq, minus_half)?;
    let gauss = tape.exp(scaled_sq);
    let sig_value = tape.value(dk.hypers.log_signal_variance).get(0, 0).exp();
    let sig = if sig_value < VARIANCE_FLOOR {
        tape.constant(DenseMatrix::scalar(VARIANCE_FLOOR))
    } else {
        tape.exp(dk.hypers.log_signal_variance)
    };
    tape.mul(gauss, sig)
}

/// Add `sigma_y^2 I` to a traced `n x n` kernel matrix, substituting the
/// constant floor (zero gradient) when the stored noise is below it.
pub fn add_noise_traced(
    tape: &mut Tape,
    k: TracedValue,
    log_noise_variance: TracedValue,
) -> Result<TracedValue> {
    let n = tape.value(k).rows();
    let eye = tape.constant(DenseMatrix::identity(n));
    let noise_value = tape.value(log_noise_variance).get(0, 0).exp();
    let noise = if noise_value < VARIANCE_FLOOR {
        tape.constant(DenseMatrix::scalar(VARIANCE_FLOOR))
    } else {
        tape.exp(log_noise_variance)
    };
    let noise_eye = tape.mul(eye, noise)?;
    tape.add(k, noise_eye)
}
