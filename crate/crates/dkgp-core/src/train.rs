//! Joint optimization of all deep-kernel parameters: full-batch negative log
//! marginal likelihood descent with Adam, exponential learning-rate decay,
//! and early stopping on the training objective.
//!
//! Patience monitors the training NLL itself; the objective is the full
//! marginal likelihood and no validation split exists at this layer, so the
//! training loss is the only quantity available to watch.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::features::{feature_forward, FeatureParams};
use crate::gp::{gp_nll_grad, ln_2pi};
use crate::kernels::{DeepKernelParams, KernelHyperparams, VARIANCE_FLOOR};
use crate::linalg::{
    conjugate_gradient, dot, lanczos, norm2, sparse_matvec, sparse_matvec_transpose, sum,
    sym_eigen, DenseMatrix,
};
use crate::scalable::{
    build_grid, interp_weights, kiss_nll_grad, skip_merge, unit_rbf, unit_rbf_log_ls_grad,
    ProductGrid, RankDecomp, SkiFactor, CG_MAX_ITER, CG_TOL, MAX_GRID_DIMS,
};

/// Above this many training rows, `auto` mode switches from dense inference
/// to the interpolation-based paths.
pub const AUTO_SCALABLE_THRESHOLD: usize = 20_000;

/// Fixed gradient clip (global norm), applied before every Adam step.
const GRAD_CLIP: f64 = 10.0;

/// Epoch period for rebuilding the kiss interpolation grid around the
/// drifting latent features, and the padding applied on each rebuild.
const KISS_GRID_REBUILD_EPOCHS: usize = 50;
const KISS_GRID_PADDING: f64 = 0.1;

/// Internal sketch sizes for skip-mode training: rank of the Hadamard merge,
/// Lanczos depth of the log-det quadrature, and Hutchinson probe count for
/// the trace gradients.
const SKIP_TRAIN_RANK: usize = 100;
const SKIP_SLQ_DEPTH: usize = 30;
const SKIP_TRACE_PROBES: usize = 8;

/// Which marginal-likelihood path `fit` descends.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalableMode {
    /// Dense Cholesky NLL.
    Exact,
    /// Grid-interpolated NLL over the (at most 4-D) latent space.
    Kiss,
    /// Product-kernel path over raw inputs; identity features only.
    Skip,
    /// Exact below [`AUTO_SCALABLE_THRESHOLD`] rows, scalable above.
    Auto,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay: f64,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub scalable_mode: ScalableMode,
    pub grid_m_per_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.075,
            decay: 0.997,
            epochs: 2500,
            patience: 1000,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            scalable_mode: ScalableMode::Auto,
            grid_m_per_dim: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive and finite, got {}",
                self.lr0
            )));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "decay must lie in (0, 1], got {}",
                self.decay
            )));
        }
        if self.patience > self.epochs {
            return Err(Error::InvalidConfig(format!(
                "patience {} exceeds the epoch budget {}",
                self.patience, self.epochs
            )));
        }
        if self.grid_m_per_dim < 4 {
            return Err(Error::InvalidConfig(format!(
                "grid_m_per_dim must be at least 4, got {}",
                self.grid_m_per_dim
            )));
        }
        Ok(())
    }
}

/// `lr0 * decay^t`.
pub fn lr_at_epoch(cfg: &TrainConfig, t: usize) -> f64 {
    cfg.lr0 * cfg.decay.powi(t as i32)
}

/// Adam moment buffers plus the hyperparameters they were configured with.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub fn new(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0, beta1, beta2, eps }
    }

    pub fn for_config(cfg: &TrainConfig, len: usize) -> Self {
        Self::new(len, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update in place:
/// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`,
/// `theta <- theta - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)`.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != params.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            left_rows: params.len(),
            left_cols: 1,
            right_rows: grads.len(),
            right_cols: 1,
        });
    }
    state.t += 1;
    let c1 = 1.0 - state.beta1.powi(state.t as i32);
    let c2 = 1.0 - state.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        params[i] -= lr * mhat / (vhat.sqrt() + state.eps);
    }
    Ok(())
}

fn clip_global_norm(grads: &mut [f64], max_norm: f64) {
    let n = norm2(grads);
    if n > max_norm {
        let s = max_norm / n;
        for g in grads.iter_mut() {
            *g *= s;
        }
    }
}

/// Outcome of a fit: the snapshot at the best epoch, the full loss trace,
/// and how the run ended.
#[derive(Clone, Debug)]
pub struct FitResult {
    pub best_params: DeepKernelParams,
    pub loss_history: Vec<f64>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl FitResult {
    pub fn epochs_run(&self) -> usize {
        self.loss_history.len()
    }

    pub fn best_loss(&self) -> Option<f64> {
        self.loss_history.get(self.best_epoch).copied().filter(|_| !self.loss_history.is_empty())
    }
}

/// Resolve the configured mode against the model and data. `auto` picks the
/// dense path up to [`AUTO_SCALABLE_THRESHOLD`] rows; past that it uses the
/// grid-interpolation path whenever the latent space fits a grid (at most
/// [`MAX_GRID_DIMS`] dimensions, which covers every deep model here since
/// the nets project to 2), and the product-kernel path for identity features
/// in higher dimension. `skip` is only defined for identity features: the
/// per-dimension factor structure lives in raw input space, in front of any
/// net, so a deep model has nothing for it to factor.
pub fn resolve_mode(
    cfg: &TrainConfig,
    feature: &FeatureParams,
    input_dims: usize,
    n: usize,
) -> Result<ScalableMode> {
    match cfg.scalable_mode {
        ScalableMode::Exact => Ok(ScalableMode::Exact),
        ScalableMode::Kiss => Ok(ScalableMode::Kiss),
        ScalableMode::Skip => {
            if matches!(feature, FeatureParams::Identity) {
                Ok(ScalableMode::Skip)
            } else {
                Err(Error::InvalidConfig(
                    "skip mode trains product kernels over raw inputs and supports only the \
                     identity feature map; use exact or kiss mode for deep models"
                        .into(),
                ))
            }
        }
        ScalableMode::Auto => {
            if n <= AUTO_SCALABLE_THRESHOLD {
                return Ok(ScalableMode::Exact);
            }
            let latent = feature.latent_dim(input_dims);
            if latent <= MAX_GRID_DIMS {
                Ok(ScalableMode::Kiss)
            } else if matches!(feature, FeatureParams::Identity) {
                Ok(ScalableMode::Skip)
            } else {
                Err(Error::InvalidConfig(format!(
                    "no scalable path for a {latent}-dimensional latent space; grids are capped \
                     at {MAX_GRID_DIMS} dimensions and the product-kernel path needs identity \
                     features"
                )))
            }
        }
    }
}

/// The descent loop shared by every mode, usable directly with a custom
/// objective: evaluate, record, snapshot on strict improvement, stop once
/// `epoch - best_epoch >= patience`, otherwise clip and step. One loss
/// evaluation per history entry, so a loss that goes flat after epoch e
/// yields exactly `e + patience + 1` evaluations. The objective receives the
/// current parameters and the epoch index and returns the loss together with
/// its gradient in [`DeepKernelParams::flatten`] order.
pub fn descend<F>(mut dk: DeepKernelParams, cfg: &TrainConfig, mut objective: F) -> Result<FitResult>
where
    F: FnMut(&DeepKernelParams, usize) -> Result<(f64, Vec<f64>)>,
{
    cfg.validate()?;
    let mut adam = AdamState::for_config(cfg, dk.param_count());
    let mut history = Vec::new();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params = dk.clone();
    let mut stopped_early = false;
    for t in 0..cfg.epochs {
        let (loss, mut grads) = objective(&dk, t)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: t });
        }
        history.push(loss);
        if loss < best_loss {
            best_loss = loss;
            best_epoch = t;
            best_params = dk.clone();
        }
        if t - best_epoch >= cfg.patience {
            stopped_early = true;
            break;
        }
        clip_global_norm(&mut grads, GRAD_CLIP);
        let mut flat = dk.flatten();
        adam_step(&mut adam, &mut flat, &grads, lr_at_epoch(cfg, t))?;
        dk.write_flat(&flat)?;
    }
    Ok(FitResult { best_params, loss_history: history, best_epoch, stopped_early })
}

/// Full-batch training of every parameter (net weights, log-lengthscales,
/// log-variances, mean constant) against the negative log marginal
/// likelihood. Deterministic for a fixed config and data. Inputs are
/// expected already normalized by the caller.
pub fn fit(dk_init: &DeepKernelParams, cfg: &TrainConfig, data: &Dataset) -> Result<FitResult> {
    cfg.validate()?;
    let mode = resolve_mode(cfg, &dk_init.feature, data.dims(), data.n())?;
    match mode {
        ScalableMode::Exact => {
            descend(dk_init.clone(), cfg, |dk, _| gp_nll_grad(dk, &data.x, &data.y))
        }
        ScalableMode::Kiss => {
            let mut grid: Option<ProductGrid> = None;
            descend(dk_init.clone(), cfg, move |dk, t| {
                if grid.is_none() || t % KISS_GRID_REBUILD_EPOCHS == 0 {
                    let z = feature_forward(&dk.feature, &data.x)?;
                    grid = Some(build_grid(&z, cfg.grid_m_per_dim, KISS_GRID_PADDING)?);
                }
                let g = grid.as_ref().expect("grid built on first epoch");
                kiss_nll_grad(dk, g, &data.x, &data.y)
            })
        }
        ScalableMode::Skip => {
            let ctx = SkipContext::new(cfg.seed, data.n());
            descend(dk_init.clone(), cfg, move |dk, _| skip_nll_grad(dk, cfg, data, &ctx))
        }
        ScalableMode::Auto => unreachable!("resolve_mode returns a concrete mode"),
    }
}

// ---------------------------------------------------------------------------
// skip-mode objective
// ---------------------------------------------------------------------------

/// Fixed Rademacher probes for the skip objective, drawn once per fit from
/// the config seed: one probe drives the stochastic Lanczos quadrature of the
/// log-det, the rest the Hutchinson trace terms in its gradient. Keeping them
/// fixed across epochs makes each epoch's loss a deterministic function of
/// the parameters.
struct SkipContext {
    slq_probe: Vec<f64>,
    trace_probes: Vec<Vec<f64>>,
}

impl SkipContext {
    fn new(seed: u64, n: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5b1c_e0f2_a94d_3817);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect()
        };
        let slq_probe = draw(&mut rng);
        let trace_probes = (0..SKIP_TRACE_PROBES).map(|_| draw(&mut rng)).collect();
        Self { slq_probe, trace_probes }
    }
}

/// Per-dimension SKI pieces rebuilt each epoch from the current
/// hyperparameters: the factor itself plus the log-lengthscale derivative of
/// its node kernel.
struct SkipPieces {
    factors: Vec<SkiFactor>,
    dk_mats: Vec<DenseMatrix>,
}

fn build_skip_pieces(x: &DenseMatrix, hp: &KernelHyperparams, m: usize) -> Result<SkipPieces> {
    let mut factors = Vec::with_capacity(x.cols());
    let mut dk_mats = Vec::with_capacity(x.cols());
    for j in 0..x.cols() {
        let col: Vec<f64> = (0..x.rows()).map(|i| x.get(i, j)).collect();
        let colm = DenseMatrix::column(&col);
        let grid = build_grid(&colm, m, KISS_GRID_PADDING)?;
        let w = interp_weights(&colm, &grid)?;
        let log_l = hp.log_lengthscales[j];
        let k_uu = unit_rbf(&grid.dims[0], log_l)?;
        dk_mats.push(unit_rbf_log_ls_grad(&grid.dims[0], log_l, &k_uu));
        factors.push(SkiFactor { w, k_uu });
    }
    Ok(SkipPieces { factors, dk_mats })
}

/// `W_d (dK_d/dlog l_d) W_d^T v` for one factor.
fn dfactor_apply(f: &SkiFactor, dk_mat: &DenseMatrix, v: &[f64]) -> Result<Vec<f64>> {
    let u = sparse_matvec_transpose(&f.w, v)?;
    let du = dk_mat.mul_vec(&u)?;
    sparse_matvec(&f.w, &du)
}

/// `(P . inner) v` for a low-rank `P` via the masking identity
/// `sum_a w_a c_a . inner(c_a . v)`.
fn hadamard_with<F>(p: &RankDecomp, inner: F, v: &[f64]) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let n = p.n();
    let mut out = vec![0.0; n];
    for a in 0..p.rank() {
        let ca = p.column(a);
        let wa = p.weights()[a];
        let masked: Vec<f64> = ca.iter().zip(v).map(|(c, x)| c * x).collect();
        let iv = inner(&masked)?;
        for ((o, c), m) in out.iter_mut().zip(&ca).zip(&iv) {
            *o += wa * c * m;
        }
    }
    Ok(out)
}

/// Skip-mode loss and gradient. The quadratic form is a CG solve against the
/// merged product-kernel operator; the log-det is a single-probe stochastic
/// Lanczos quadrature; its gradient traces are Hutchinson estimates over the
/// fixed probes. All randomness is frozen in [`SkipContext`], so the value is
/// reproducible; it is an estimator, and its gradient is the estimator of the
/// true gradient rather than the exact derivative of the estimate.
fn skip_nll_grad(
    dk: &DeepKernelParams,
    cfg: &TrainConfig,
    data: &Dataset,
    ctx: &SkipContext,
) -> Result<(f64, Vec<f64>)> {
    let hp = &dk.base;
    let n = data.n();
    let dims = data.dims();
    if hp.dims() != dims {
        return Err(Error::DimensionMismatch { op: "skip fit", expected: dims, got: hp.dims() });
    }
    let rank = SKIP_TRAIN_RANK.min(n);
    let pieces = build_skip_pieces(&data.x, hp, cfg.grid_m_per_dim)?;
    let merged = skip_merge(&pieces.factors, rank)?;
    let sig = hp.signal_variance();
    let noise = hp.noise_variance();
    let apply_a = |v: &[f64]| -> Vec<f64> {
        merged.apply(v).iter().zip(v).map(|(m, x)| sig * m + noise * x).collect()
    };

    let mean = hp.mean_constant;
    let yc: Vec<f64> = data.y.iter().map(|v| v - mean).collect();
    let alpha = conjugate_gradient(&apply_a, &yc, CG_TOL, CG_MAX_ITER)?.x;
    let quad = dot(&yc, &alpha);

    // Single-probe SLQ: logdet ~= |z|^2 sum_k tau_k^2 ln(theta_k) with
    // (theta, tau) the eigenvalues of the Lanczos tridiagonal and the first
    // components of its eigenvectors.
    let fac = lanczos(&apply_a, &ctx.slq_probe, SKIP_SLQ_DEPTH.min(n))?;
    let te = sym_eigen(&fac.tridiag.to_dense())?;
    let z2 = dot(&ctx.slq_probe, &ctx.slq_probe);
    let mut logdet = 0.0;
    for k in 0..te.values.len() {
        let tau = te.vectors.get(0, k);
        logdet += z2 * tau * tau * te.values[k].max(f64::MIN_POSITIVE).ln();
    }
    let value = 0.5 * (quad + logdet + n as f64 * ln_2pi());

    // Rank sketches of the product over all factors but one, per dimension,
    // so each lengthscale derivative can be applied matrix-free.
    let rests: Vec<Option<RankDecomp>> = if dims == 1 {
        vec![None]
    } else {
        (0..dims)
            .map(|d| {
                let rest: Vec<SkiFactor> = pieces
                    .factors
                    .iter()
                    .enumerate()
                    .filter(|(e, _)| *e != d)
                    .map(|(_, f)| f.clone())
                    .collect();
                skip_merge(&rest, rank).map(Some)
            })
            .collect::<Result<_>>()?
    };
    let d_apply = |d: usize, v: &[f64]| -> Result<Vec<f64>> {
        match &rests[d] {
            None => dfactor_apply(&pieces.factors[0], &pieces.dk_mats[0], v),
            Some(p) => {
                hadamard_with(p, |u| dfactor_apply(&pieces.factors[d], &pieces.dk_mats[d], u), v)
            }
        }
    };

    // Quadratic-form terms: -alpha^T (dA/dtheta) alpha.
    let ma = merged.apply(&alpha);
    let g_sig_quad = -sig * dot(&alpha, &ma);
    let g_noise_quad = -noise * dot(&alpha, &alpha);
    let mut g_ls = Vec::with_capacity(dims);
    for d in 0..dims {
        g_ls.push(-sig * dot(&alpha, &d_apply(d, &alpha)?));
    }

    // Hutchinson trace terms: tr(A^{-1} dA/dtheta) ~= mean_p (A^{-1}p)^T (dA/dtheta p).
    let mut g_sig_ld = 0.0;
    let mut g_noise_ld = 0.0;
    let mut g_ls_ld = vec![0.0; dims];
    for p in &ctx.trace_probes {
        let s = conjugate_gradient(&apply_a, p, CG_TOL, CG_MAX_ITER)?.x;
        g_sig_ld += sig * dot(&s, &merged.apply(p));
        g_noise_ld += noise * dot(&s, p);
        for d in 0..dims {
            g_ls_ld[d] += sig * dot(&s, &d_apply(d, p)?);
        }
    }
    let np = ctx.trace_probes.len() as f64;
    g_sig_ld /= np;
    g_noise_ld /= np;
    for g in &mut g_ls_ld {
        *g /= np;
    }

    let sig_floored = hp.log_signal_variance.exp() < VARIANCE_FLOOR;
    let noise_floored = hp.log_noise_variance.exp() < VARIANCE_FLOOR;
    let mut grads = Vec::with_capacity(dk.param_count());
    for d in 0..dims {
        grads.push(0.5 * (g_ls[d] + g_ls_ld[d]));
    }
    grads.push(if sig_floored { 0.0 } else { 0.5 * (g_sig_quad + g_sig_ld) });
    grads.push(if noise_floored { 0.0 } else { 0.5 * (g_noise_quad + g_noise_ld) });
    grads.push(-sum(&alpha));
    Ok((value, grads))
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// On-disk training state: the config, how many epochs ran, the flat
/// parameter snapshot (in [`DeepKernelParams::flatten`] order; the caller
/// owns the architecture needed to rehydrate it), and the loss trace.
/// serde_json renders floats shortest-round-trip, so the snapshot survives a
/// save/load cycle bitwise.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    pub params: Vec<f64>,
    pub loss_history: Vec<f64>,
}

/// Write a checkpoint atomically: serialize to a sibling temp file, then
/// rename over the target.
pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(ck)?;
    let file_name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!("{file_name}.tmp"));
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
