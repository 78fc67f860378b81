//! Structured kernel interpolation for large-n GP inference.
//!
//! The n x n latent kernel matrix is replaced by `sig * W K~ W^T + noise * I`
//! where `K~` is a Kronecker product of unit-signal 1-D RBF matrices over a
//! regular latent grid and each row of the sparse matrix `W` holds the
//! tensor-product cubic interpolation weights (at most `4^D` nonzeros) of one
//! latent point. Matrix-vector products then cost `O(n 4^D + m_total m_d)`
//! instead of `O(n^2)`, which is what the conjugate-gradient solves here
//! consume. The same per-dimension structure powers the product-kernel path:
//! per-input-dimension SKI factors are reduced to low-rank form with Lanczos
//! and merged pairwise through Hadamard products.

use std::collections::{BinaryHeap, HashSet};
use std::sync::atomic::{AtomicBool, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::features::{feature_forward, feature_forward_traced, trace_feature, FeatureParams};
use crate::gp::{ln_2pi, PosteriorCovariance, PosteriorPrediction};
use crate::kernels::{rbf_matrix, DeepKernelParams, KernelHyperparams, VARIANCE_FLOOR};
use crate::linalg::{
    cholesky_jittered, conjugate_gradient, dot, lanczos, sparse_matvec, sparse_matvec_transpose,
    sum, sym_eigen, DenseMatrix, SparseRowMatrix, SymEigen,
};

/// Relative residual tolerance for every CG solve in this module.
pub const CG_TOL: f64 = 1e-4;
/// Iteration cap for every CG solve in this module.
pub const CG_MAX_ITER: usize = 1000;

/// Hard cap on interpolation-grid dimensionality: node count and stencil
/// size grow as `m^D` and `4^D`.
pub const MAX_GRID_DIMS: usize = 4;

// ---------------------------------------------------------------------------
// Grids
// ---------------------------------------------------------------------------

/// Uniform 1-D node set `u_j = lo + j * spacing`, `j = 0 .. m-1`. Cubic
/// interpolation needs a 4-node stencil, so `m >= 4`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid1D {
    lo: f64,
    hi: f64,
    m: usize,
}

impl Grid1D {
    pub fn new(lo: f64, hi: f64, m: usize) -> Result<Self> {
        if m < 4 {
            return Err(Error::GridTooSmall { m });
        }
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "grid range [{lo}, {hi}] is not an increasing finite interval"
            )));
        }
        Ok(Self { lo, hi, m })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / (self.m - 1) as f64
    }

    pub fn node(&self, j: usize) -> f64 {
        self.lo + j as f64 * self.spacing()
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.m).map(|j| self.node(j)).collect()
    }
}

/// Cartesian product of per-dimension grids. Flat node indices are row-major
/// with dimension 0 slowest: index `(i_0, .., i_{D-1})` maps to
/// `sum_d i_d * stride_d` with `stride_d = prod_{e > d} m_e`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProductGrid {
    pub dims: Vec<Grid1D>,
}

impl ProductGrid {
    pub fn new(dims: Vec<Grid1D>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::EmptyGrid);
        }
        if dims.len() > MAX_GRID_DIMS {
            return Err(Error::TooManyDims { dims: dims.len() });
        }
        Ok(Self { dims })
    }

    pub fn latent_dims(&self) -> usize {
        self.dims.len()
    }

    pub fn total_nodes(&self) -> usize {
        self.dims.iter().map(|g| g.m()).product()
    }

    pub fn strides(&self) -> Vec<usize> {
        let d = self.dims.len();
        let mut s = vec![1usize; d];
        for e in (0..d.saturating_sub(1)).rev() {
            s[e] = s[e + 1] * self.dims[e + 1].m();
        }
        s
    }

    /// All node coordinates as a `total_nodes x D` matrix in flat-index order.
    pub fn node_matrix(&self) -> DenseMatrix {
        let d = self.dims.len();
        let total = self.total_nodes();
        let strides = self.strides();
        let mut out = DenseMatrix::zeros(total, d);
        for flat in 0..total {
            for e in 0..d {
                let idx = (flat / strides[e]) % self.dims[e].m();
                out.set(flat, e, self.dims[e].node(idx));
            }
        }
        out
    }
}

/// Axis-aligned grid over the bounding box of the latent points, each side
/// extended by `padding_fraction` of its range. A dimension with zero range
/// is widened to plus or minus 0.5 around the constant value so the grid
/// stays a proper interval.
pub fn build_grid(z: &DenseMatrix, m_per_dim: usize, padding_fraction: f64) -> Result<ProductGrid> {
    if z.rows() == 0 || z.cols() == 0 {
        return Err(Error::EmptyGrid);
    }
    if z.cols() > MAX_GRID_DIMS {
        return Err(Error::TooManyDims { dims: z.cols() });
    }
    if m_per_dim < 4 {
        return Err(Error::GridTooSmall { m: m_per_dim });
    }
    let dims = (0..z.cols())
        .map(|j| {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for i in 0..z.rows() {
                let v = z.get(i, j);
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if hi > lo {
                let pad = padding_fraction * (hi - lo);
                lo -= pad;
                hi += pad;
            } else {
                lo -= 0.5;
                hi += 0.5;
            }
            Grid1D::new(lo, hi, m_per_dim)
        })
        .collect::<Result<Vec<_>>>()?;
    ProductGrid::new(dims)
}

// ---------------------------------------------------------------------------
// Keys cubic-convolution interpolation
// ---------------------------------------------------------------------------

/// Keys cubic-convolution kernel with a = -1/2, in units of the grid spacing:
///
/// ```text
/// W(s) = (3/2)|s|^3 - (5/2)|s|^2 + 1            for |s| <= 1
///      = -(1/2)|s|^3 + (5/2)|s|^2 - 4|s| + 2    for 1 < |s| < 2
///      = 0                                       otherwise
/// ```
///
/// C^1, supported on two cells each side, partition of unity, and exact for
/// polynomials up to degree 2 on full interior stencils.
fn keys_weight(s: f64) -> f64 {
    let a = s.abs();
    if a <= 1.0 {
        ((1.5 * a - 2.5) * a) * a + 1.0
    } else if a < 2.0 {
        ((-0.5 * a + 2.5) * a - 4.0) * a + 2.0
    } else {
        0.0
    }
}

/// Derivative of [`keys_weight`] in s. Odd by symmetry of the kernel; the two
/// polynomial pieces join with matching slope -1/2 at |s| = 1 and slope 0 at
/// |s| = 2, so the derivative is continuous.
fn keys_weight_deriv(s: f64) -> f64 {
    let a = s.abs();
    let d = if a <= 1.0 {
        (4.5 * a - 5.0) * a
    } else if a < 2.0 {
        (-1.5 * a + 5.0) * a - 4.0
    } else {
        0.0
    };
    if s < 0.0 {
        -d
    } else {
        d
    }
}

/// One dimension's 4-node stencil for a single coordinate: node indices
/// (clamped into range, duplicates fold when the weights are assembled),
/// interpolation weights, and weight derivatives in the coordinate itself
/// (zero when the coordinate was clamped, matching the constant
/// extrapolation the clamp produces).
#[derive(Clone, Copy, Debug)]
struct DimStencil {
    idx: [usize; 4],
    w: [f64; 4],
    dw: [f64; 4],
}

fn dim_stencil(zv: f64, g: &Grid1D) -> (DimStencil, bool) {
    let spacing = g.spacing();
    let top = (g.m() - 1) as f64;
    let s_raw = (zv - g.lo()) / spacing;
    let clamped = !(0.0..=top).contains(&s_raw);
    let s = s_raw.clamp(0.0, top);
    // Cell index in [0, m-2]; `as usize` truncates, which is floor for s >= 0.
    let cell = (s as usize).min(g.m() - 2);
    let t = s - cell as f64;
    let mut st = DimStencil { idx: [0; 4], w: [0.0; 4], dw: [0.0; 4] };
    for (slot, k) in (-1i64..=2).enumerate() {
        let j = (cell as i64 + k).clamp(0, (g.m() - 1) as i64) as usize;
        st.idx[slot] = j;
        st.w[slot] = keys_weight(t - k as f64);
        st.dw[slot] = if clamped { 0.0 } else { keys_weight_deriv(t - k as f64) / spacing };
    }
    (st, clamped)
}

static GRID_CLAMP_WARNED: AtomicBool = AtomicBool::new(false);

fn warn_clamped(count: usize) {
    if count > 0 && !GRID_CLAMP_WARNED.swap(true, Ordering::Relaxed) {
        eprintln!(
            "dkgp: {count} latent coordinate(s) outside the interpolation grid were clamped \
             to the boundary (warning shown once per process)"
        );
    }
}

/// Per-point stencils plus the assembled sparse interpolation matrix.
/// Out-of-range coordinates are clamped (with a once-per-process warning) and
/// boundary node indices fold onto the edge nodes, so every row still sums
/// to 1.
fn build_stencils(
    z: &DenseMatrix,
    grid: &ProductGrid,
) -> Result<(SparseRowMatrix, Vec<Vec<DimStencil>>)> {
    let d = grid.dims.len();
    if d == 0 {
        return Err(Error::EmptyGrid);
    }
    if z.cols() != d {
        return Err(Error::DimensionMismatch { op: "interp_weights", expected: d, got: z.cols() });
    }
    let strides = grid.strides();
    let combos = 1usize << (2 * d); // 4^d tensor-product stencil points
    let mut clamped_coords = 0usize;
    let mut stencils = Vec::with_capacity(z.rows());
    let mut entries = Vec::with_capacity(z.rows());
    for r in 0..z.rows() {
        let mut row_st = Vec::with_capacity(d);
        for e in 0..d {
            let (st, clamped) = dim_stencil(z.get(r, e), &grid.dims[e]);
            clamped_coords += clamped as usize;
            row_st.push(st);
        }
        let mut row = Vec::with_capacity(combos);
        for c in 0..combos {
            let mut rem = c;
            let mut flat = 0usize;
            let mut wt = 1.0;
            for e in 0..d {
                let k = rem & 3;
                rem >>= 2;
                flat += row_st[e].idx[k] * strides[e];
                wt *= row_st[e].w[k];
            }
            row.push((flat, wt));
        }
        entries.push(row);
        stencils.push(row_st);
    }
    warn_clamped(clamped_coords);
    let w = SparseRowMatrix::from_row_entries(z.rows(), grid.total_nodes(), entries)?;
    Ok((w, stencils))
}

/// Sparse local cubic interpolation weights: row i carries the tensor-product
/// Keys weights of latent point i over its `4^D` nearest grid nodes.
pub fn interp_weights(z: &DenseMatrix, grid: &ProductGrid) -> Result<SparseRowMatrix> {
    Ok(build_stencils(z, grid)?.0)
}

// ---------------------------------------------------------------------------
// Kronecker algebra
// ---------------------------------------------------------------------------

fn kron_apply(factors: &[&DenseMatrix], v: &[f64]) -> Vec<f64> {
    let total = v.len();
    let ms: Vec<usize> = factors.iter().map(|f| f.rows()).collect();
    let mut cur = v.to_vec();
    for (d, k) in factors.iter().enumerate() {
        let m = ms[d];
        let inner: usize = ms[d + 1..].iter().product();
        let outer = total / (m * inner);
        let mut next = vec![0.0; total];
        for o in 0..outer {
            let base = o * m * inner;
            for i in 0..m {
                let row = k.row(i);
                let out_off = base + i * inner;
                for (j, &kij) in row.iter().enumerate() {
                    if kij == 0.0 {
                        continue;
                    }
                    let in_off = base + j * inner;
                    for t in 0..inner {
                        next[out_off + t] += kij * cur[in_off + t];
                    }
                }
            }
        }
        cur = next;
    }
    cur
}

/// `y = (K_0 (x) K_1 (x) ... ) v` without materializing the product: for each
/// dimension the vector is reshaped to (outer, m_d, inner) and contracted with
/// `K_d` along the middle axis, costing `total * m_d` per dimension instead of
/// `total^2` overall. Index layout matches [`ProductGrid`] (dimension 0
/// slowest).
pub fn kron_mvm(factors: &[DenseMatrix], v: &[f64]) -> Result<Vec<f64>> {
    if factors.is_empty() {
        return Err(Error::EmptyGrid);
    }
    for f in factors {
        if !f.is_square() {
            return Err(Error::NonSquare { rows: f.rows(), cols: f.cols() });
        }
    }
    let total: usize = factors.iter().map(|f| f.rows()).product();
    if v.len() != total {
        return Err(Error::DimensionMismatch { op: "kron_mvm", expected: total, got: v.len() });
    }
    let refs: Vec<&DenseMatrix> = factors.iter().collect();
    Ok(kron_apply(&refs, v))
}

fn kron_apply_replaced(
    factors: &[DenseMatrix],
    dim: usize,
    replacement: &DenseMatrix,
    v: &[f64],
) -> Vec<f64> {
    let refs: Vec<&DenseMatrix> =
        factors.iter().enumerate().map(|(e, f)| if e == dim { replacement } else { f }).collect();
    kron_apply(&refs, v)
}

/// Unit-signal 1-D RBF matrix over a grid's nodes, `exp(-(u_i - u_j)^2 / (2 l^2))`.
pub(crate) fn unit_rbf(g: &Grid1D, log_lengthscale: f64) -> Result<DenseMatrix> {
    let nodes = DenseMatrix::column(&g.nodes());
    let hp = KernelHyperparams {
        log_lengthscales: vec![log_lengthscale],
        log_signal_variance: 0.0,
        log_noise_variance: VARIANCE_FLOOR.ln(),
        mean_constant: 0.0,
    };
    rbf_matrix(&hp, &nodes, &nodes)
}

/// Entrywise derivative of [`unit_rbf`] in the log-lengthscale:
/// `d/d(log l) exp(-d^2 / (2 l^2)) = k * d^2 / l^2`.
pub(crate) fn unit_rbf_log_ls_grad(
    g: &Grid1D,
    log_lengthscale: f64,
    k: &DenseMatrix,
) -> DenseMatrix {
    let inv_l2 = (-2.0 * log_lengthscale).exp();
    let m = g.m();
    let mut out = DenseMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            let d = g.node(i) - g.node(j);
            out.set(i, j, k.get(i, j) * d * d * inv_l2);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Kronecker eigenvalue products
// ---------------------------------------------------------------------------

#[derive(PartialEq)]
struct Frontier {
    value: f64,
    idx: Vec<usize>,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.value.total_cmp(&other.value).then_with(|| other.idx.cmp(&self.idx))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Largest `count` products `lambda_0[i_0] * .. * lambda_{D-1}[i_{D-1}]`,
/// returned descending with their index tuples. Requires each per-dimension
/// list sorted descending and nonnegative; under that precondition the
/// product is nonincreasing along every lattice axis, so a best-first walk
/// from `(0, .., 0)` over index successors visits the top products in order.
fn top_kron_products(evals: &[Vec<f64>], count: usize) -> Vec<(f64, Vec<usize>)> {
    let d = evals.len();
    let dims: Vec<usize> = evals.iter().map(|e| e.len()).collect();
    let total: usize = dims.iter().product();
    let count = count.min(total);
    let product_at = |idx: &[usize]| -> f64 { idx.iter().zip(evals).map(|(&i, e)| e[i]).product() };
    let mut out: Vec<(f64, Vec<usize>)> = Vec::with_capacity(count);
    if count == total {
        for flat in 0..total {
            let mut rem = flat;
            let mut idx = vec![0usize; d];
            for e in (0..d).rev() {
                idx[e] = rem % dims[e];
                rem /= dims[e];
            }
            out.push((product_at(&idx), idx));
        }
    } else {
        let mut heap = BinaryHeap::new();
        let mut seen = HashSet::new();
        let start = vec![0usize; d];
        heap.push(Frontier { value: product_at(&start), idx: start.clone() });
        seen.insert(start);
        while out.len() < count {
            let top = heap.pop().expect("frontier covers the lattice while results remain");
            for e in 0..d {
                if top.idx[e] + 1 < dims[e] {
                    let mut nx = top.idx.clone();
                    nx[e] += 1;
                    if seen.insert(nx.clone()) {
                        heap.push(Frontier { value: product_at(&nx), idx: nx });
                    }
                }
            }
            out.push((top.value, top.idx));
        }
    }
    out.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    out
}

// ---------------------------------------------------------------------------
// KISS-GP
// ---------------------------------------------------------------------------

/// The assembled interpolation system: everything needed to apply
/// `sig * W K~ W^T + noise * I` and to evaluate its spectral log-det
/// surrogate. Construction is the only fallible part; `apply` is pure.
struct KissSystem {
    w: SparseRowMatrix,
    factors: Vec<DenseMatrix>,
    eigs: Vec<SymEigen>,
    sig: f64,
    noise: f64,
    n: usize,
    m_total: usize,
}

impl KissSystem {
    fn build(base: &KernelHyperparams, w: SparseRowMatrix, grid: &ProductGrid) -> Result<Self> {
        if base.dims() != grid.dims.len() {
            return Err(Error::DimensionMismatch {
                op: "kiss system",
                expected: grid.dims.len(),
                got: base.dims(),
            });
        }
        let factors = grid
            .dims
            .iter()
            .zip(&base.log_lengthscales)
            .map(|(g, &l)| unit_rbf(g, l))
            .collect::<Result<Vec<_>>>()?;
        let eigs = factors.iter().map(sym_eigen).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            n: w.rows(),
            m_total: w.cols(),
            w,
            factors,
            eigs,
            sig: base.signal_variance(),
            noise: base.noise_variance(),
        })
    }

    /// `(sig * W K~ W^T + noise I) v`.
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let u = sparse_matvec_transpose(&self.w, v).expect("operator dims fixed at construction");
        let refs: Vec<&DenseMatrix> = self.factors.iter().collect();
        let ku = kron_apply(&refs, &u);
        let wku = sparse_matvec(&self.w, &ku).expect("operator dims fixed at construction");
        wku.iter().zip(v).map(|(a, b)| self.sig * a + self.noise * b).collect()
    }

    fn solve(&self, rhs: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>> {
        Ok(conjugate_gradient(|v| self.apply(v), rhs, tol, max_iter)?.x)
    }

    /// Per-dimension eigenvalues, descending, clamped at zero (the factors
    /// are PSD up to eigensolver roundoff).
    fn unit_evals(&self) -> Vec<Vec<f64>> {
        self.eigs.iter().map(|e| e.values.iter().map(|v| v.max(0.0)).collect()).collect()
    }

    /// Spectral surrogate for `log det(sig W K~ W^T + noise I)`: the nonzero
    /// spectrum of the rank-`m_total` interpolated kernel is approximated by
    /// the Kronecker eigenvalue products scaled by n / m_total, so
    ///
    /// ```text
    /// logdet ~= sum_i log((n/m) sig lambda_i + noise) + max(n - m, 0) log(noise)
    /// ```
    ///
    /// over the `min(n, m_total)` largest products; the remainder term
    /// accounts for the noise-only eigenvalues left when the grid is smaller
    /// than the data.
    fn logdet_approx(&self) -> f64 {
        let evals = self.unit_evals();
        let count = self.n.min(self.m_total);
        let scale = self.n as f64 / self.m_total as f64;
        let mut ld = top_kron_products(&evals, count)
            .iter()
            .map(|(p, _)| (scale * self.sig * p + self.noise).ln())
            .sum::<f64>();
        if self.n > self.m_total {
            ld += (self.n - self.m_total) as f64 * self.noise.ln();
        }
        ld
    }
}

/// A deep-kernel GP bound to an interpolation grid: the kernel parameters,
/// the grid, the sparse weights of the training latents, and cached per-dim
/// kernel factors with their eigendecompositions.
pub struct KissGpModel {
    pub dk: DeepKernelParams,
    pub grid: ProductGrid,
    sys: KissSystem,
}

impl KissGpModel {
    /// Map the inputs through the feature net, fit a padded grid around the
    /// latents, and assemble the interpolation system.
    pub fn new(
        dk: DeepKernelParams,
        x: &DenseMatrix,
        m_per_dim: usize,
        padding_fraction: f64,
    ) -> Result<Self> {
        let z = feature_forward(&dk.feature, x)?;
        let grid = build_grid(&z, m_per_dim, padding_fraction)?;
        Self::with_grid(dk, &z, grid)
    }

    /// Assemble the system on an existing grid from already-computed latents
    /// (the training loop rebuilds grids on its own schedule).
    pub fn with_grid(dk: DeepKernelParams, z: &DenseMatrix, grid: ProductGrid) -> Result<Self> {
        let w = interp_weights(z, &grid)?;
        let sys = KissSystem::build(&dk.base, w, &grid)?;
        Ok(Self { dk, grid, sys })
    }

    pub fn n(&self) -> usize {
        self.sys.n
    }

    pub fn total_nodes(&self) -> usize {
        self.sys.m_total
    }

    pub fn interpolation(&self) -> &SparseRowMatrix {
        &self.sys.w
    }
}

/// `(sig W K~ W^T + noise I) v`: the interpolated training covariance applied
/// to a vector, observation noise included.
pub fn kiss_mvm(model: &KissGpModel, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != model.sys.n {
        return Err(Error::DimensionMismatch {
            op: "kiss_mvm",
            expected: model.sys.n,
            got: v.len(),
        });
    }
    Ok(model.sys.apply(v))
}

fn check_targets(n: usize, y: &[f64], op: &'static str) -> Result<()> {
    if y.len() != n {
        return Err(Error::DimensionMismatch { op, expected: n, got: y.len() });
    }
    Ok(())
}

fn nll_from_system(sys: &KissSystem, mean: f64, y: &[f64], tol: f64, max_iter: usize) -> Result<f64> {
    let yc: Vec<f64> = y.iter().map(|v| v - mean).collect();
    let alpha = sys.solve(&yc, tol, max_iter)?;
    let quad = dot(&yc, &alpha);
    Ok(0.5 * (quad + sys.logdet_approx() + sys.n as f64 * ln_2pi()))
}

/// Negative log marginal likelihood under the interpolated covariance: the
/// quadratic form comes from a CG solve against [`kiss_mvm`] and the log-det
/// from the scaled Kronecker eigenvalue surrogate (see
/// [`kiss_nll_exact_logdet`] for the dense oracle of that surrogate).
pub fn kiss_nll(model: &KissGpModel, y: &[f64]) -> Result<f64> {
    check_targets(model.sys.n, y, "kiss_nll")?;
    nll_from_system(&model.sys, model.dk.base.mean_constant, y, CG_TOL, CG_MAX_ITER)
}

/// Oracle twin of [`kiss_nll`]: same CG quadratic form, but the log-det is
/// computed exactly by densifying the operator (n matrix-vector products)
/// and running a Cholesky factorization. Kept for validation and small-n
/// fallback; guarded to n <= 2000 where the dense pass is affordable.
pub fn kiss_nll_exact_logdet(model: &KissGpModel, y: &[f64]) -> Result<f64> {
    let sys = &model.sys;
    check_targets(sys.n, y, "kiss_nll_exact_logdet")?;
    if sys.n > 2000 {
        return Err(Error::InvalidConfig(format!(
            "exact log-det fallback densifies the operator and is capped at n = 2000, got {}",
            sys.n
        )));
    }
    let mean = model.dk.base.mean_constant;
    let yc: Vec<f64> = y.iter().map(|v| v - mean).collect();
    let alpha = sys.solve(&yc, CG_TOL, CG_MAX_ITER)?;
    let quad = dot(&yc, &alpha);
    let mut a = DenseMatrix::zeros(sys.n, sys.n);
    let mut e = vec![0.0; sys.n];
    for i in 0..sys.n {
        e[i] = 1.0;
        let col = sys.apply(&e);
        e[i] = 0.0;
        for (j, &v) in col.iter().enumerate() {
            a.set(j, i, v);
        }
    }
    let (l, _jitter) = cholesky_jittered(&a)?;
    let logdet = 2.0 * (0..sys.n).map(|i| l.get(i, i).ln()).sum::<f64>();
    Ok(0.5 * (quad + logdet + sys.n as f64 * ln_2pi()))
}

/// Posterior prediction at latent test points. Means interpolate the grid
/// kernel once per batch; variances need one CG solve per test point:
///
/// ```text
/// mean_* = c + sig * W_* K~ (W^T alpha),   alpha = A^{-1} (y - c)
/// var_*  = sig - q^T A^{-1} q,             q = sig * W K~ W_*^T e_*
/// ```
///
/// with `A` the noisy training operator. Variances are noise-free (the prior
/// point variance is `sig`) and clamped at zero.
pub fn kiss_predict(
    model: &KissGpModel,
    y: &[f64],
    zstar: &DenseMatrix,
) -> Result<PosteriorPrediction> {
    let sys = &model.sys;
    check_targets(sys.n, y, "kiss_predict")?;
    if zstar.cols() != model.grid.dims.len() {
        return Err(Error::DimensionMismatch {
            op: "kiss_predict",
            expected: model.grid.dims.len(),
            got: zstar.cols(),
        });
    }
    let c = model.dk.base.mean_constant;
    let yc: Vec<f64> = y.iter().map(|v| v - c).collect();
    let alpha = sys.solve(&yc, CG_TOL, CG_MAX_ITER)?;
    let u = sparse_matvec_transpose(&sys.w, &alpha)?;
    let refs: Vec<&DenseMatrix> = sys.factors.iter().collect();
    let ku = kron_apply(&refs, &u);
    let wstar = interp_weights(zstar, &model.grid)?;
    let mean: Vec<f64> = sparse_matvec(&wstar, &ku)?.iter().map(|v| c + sys.sig * v).collect();
    let mut vars = Vec::with_capacity(zstar.rows());
    let mut estar = vec![0.0; sys.m_total];
    for i in 0..zstar.rows() {
        estar.iter_mut().for_each(|v| *v = 0.0);
        let (idx, wts) = wstar.row(i);
        for (&j, &wv) in idx.iter().zip(wts) {
            estar[j] += wv;
        }
        let ke = kron_apply(&refs, &estar);
        let q: Vec<f64> = sparse_matvec(&sys.w, &ke)?.iter().map(|v| sys.sig * v).collect();
        let sol = sys.solve(&q, CG_TOL, CG_MAX_ITER)?;
        vars.push((sys.sig - dot(&q, &sol)).max(0.0));
    }
    Ok(PosteriorPrediction {
        mean,
        covariance: PosteriorCovariance::DiagonalOnly(vars),
        includes_noise: false,
    })
}

// ---------------------------------------------------------------------------
// KISS-GP gradients
// ---------------------------------------------------------------------------

/// Loss value and gradient of [`kiss_nll`] in the flat parameter order of
/// [`DeepKernelParams::flatten_into`] (feature parameters, then
/// log-lengthscales, log signal variance, log noise variance, mean).
///
/// Takes the raw inputs instead of a model because every evaluation recomputes
/// the latents and their interpolation weights from the current parameters;
/// only the grid itself is held fixed between calls, matching how training
/// treats it (rebuilt on a coarser schedule).
///
/// The quadratic-form gradients are the exact directional derivatives
/// `-alpha^T (dA/dtheta) alpha` at the CG solution; the log-det gradients
/// differentiate the spectral surrogate through per-dimension Rayleigh
/// quotients `dlambda_j = v_j^T (dK_d/dtheta) v_j`; feature gradients flow
/// through the C^1 interpolation weights and then through the feature net via
/// the tape. Variances pinned at [`VARIANCE_FLOOR`] get zero gradient, like
/// the dense path.
pub fn kiss_nll_grad(
    dk: &DeepKernelParams,
    grid: &ProductGrid,
    x: &DenseMatrix,
    y: &[f64],
) -> Result<(f64, Vec<f64>)> {
    kiss_nll_grad_impl(dk, grid, x, y, CG_TOL, CG_MAX_ITER)
}

#[cfg(test)]
fn kiss_nll_value_impl(
    dk: &DeepKernelParams,
    grid: &ProductGrid,
    x: &DenseMatrix,
    y: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<f64> {
    let z = feature_forward(&dk.feature, x)?;
    let w = interp_weights(&z, grid)?;
    let sys = KissSystem::build(&dk.base, w, grid)?;
    check_targets(sys.n, y, "kiss_nll")?;
    nll_from_system(&sys, dk.base.mean_constant, y, tol, max_iter)
}

fn kiss_nll_grad_impl(
    dk: &DeepKernelParams,
    grid: &ProductGrid,
    x: &DenseMatrix,
    y: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<(f64, Vec<f64>)> {
    let d = grid.dims.len();
    let z = feature_forward(&dk.feature, x)?;
    let (w, stencils) = build_stencils(&z, grid)?;
    let sys = KissSystem::build(&dk.base, w, grid)?;
    check_targets(sys.n, y, "kiss_nll_grad")?;
    let n = sys.n;
    let sig = sys.sig;
    let noise = sys.noise;
    let mean = dk.base.mean_constant;

    let yc: Vec<f64> = y.iter().map(|v| v - mean).collect();
    let alpha = sys.solve(&yc, tol, max_iter)?;
    let quad = dot(&yc, &alpha);

    // Shared pieces: u = W^T alpha and K~ u drive every quadratic-form term.
    let u = sparse_matvec_transpose(&sys.w, &alpha)?;
    let refs: Vec<&DenseMatrix> = sys.factors.iter().collect();
    let ku = kron_apply(&refs, &u);

    // Spectral surrogate and its derivatives. Each product keeps its index
    // tuple so the lengthscale terms can isolate their own dimension's
    // eigenvalue without dividing by it (products may be zero).
    let evals = sys.unit_evals();
    let scale = n as f64 / sys.m_total as f64;
    let products = top_kron_products(&evals, n.min(sys.m_total));
    let dk_mats: Vec<DenseMatrix> = (0..d)
        .map(|e| unit_rbf_log_ls_grad(&grid.dims[e], dk.base.log_lengthscales[e], &sys.factors[e]))
        .collect();
    // Rayleigh quotients v_j^T (dK_e/dlog l_e) v_j per dimension and eigenpair.
    let dlam: Vec<Vec<f64>> = (0..d)
        .map(|e| {
            let m = grid.dims[e].m();
            let vecs = &sys.eigs[e].vectors;
            (0..m)
                .map(|j| {
                    let vj: Vec<f64> = (0..m).map(|r| vecs.get(r, j)).collect();
                    let dv = dk_mats[e].mul_vec(&vj).expect("square factor");
                    dot(&vj, &dv)
                })
                .collect()
        })
        .collect();

    let mut logdet = 0.0;
    let mut g_sig_ld = 0.0;
    let mut g_noise_ld = 0.0;
    let mut g_ls_ld = vec![0.0; d];
    for (p, idx) in &products {
        let mu = scale * sig * p;
        let denom = mu + noise;
        logdet += denom.ln();
        g_sig_ld += mu / denom;
        g_noise_ld += noise / denom;
        for e in 0..d {
            let mut rest = 1.0;
            for (o, other) in evals.iter().enumerate() {
                if o != e {
                    rest *= other[idx[o]];
                }
            }
            g_ls_ld[e] += scale * sig * rest * dlam[e][idx[e]] / denom;
        }
    }
    if n > sys.m_total {
        logdet += (n - sys.m_total) as f64 * noise.ln();
        g_noise_ld += (n - sys.m_total) as f64;
    }
    let value = 0.5 * (quad + logdet + n as f64 * ln_2pi());

    let mut grads = Vec::with_capacity(dk.param_count());

    // Feature gradients: dNLL/dz[r][t] = -sig * alpha_r * sum_j dW_rj/dz_t * (K~ u)_j,
    // then one tape backward pass carries dNLL/dz into the net parameters via
    // the surrogate loss sum(z * G_z).
    if !matches!(dk.feature, FeatureParams::Identity) {
        let strides = grid.strides();
        let combos = 1usize << (2 * d);
        let mut gz = DenseMatrix::zeros(n, d);
        for (r, row_st) in stencils.iter().enumerate() {
            let mut row_g = vec![0.0; d];
            for c in 0..combos {
                let mut rem = c;
                let mut flat = 0usize;
                let mut ws = [0.0f64; MAX_GRID_DIMS];
                let mut dws = [0.0f64; MAX_GRID_DIMS];
                for e in 0..d {
                    let k = rem & 3;
                    rem >>= 2;
                    flat += row_st[e].idx[k] * strides[e];
                    ws[e] = row_st[e].w[k];
                    dws[e] = row_st[e].dw[k];
                }
                let kj = ku[flat];
                if kj == 0.0 {
                    continue;
                }
                for t in 0..d {
                    let mut p = dws[t];
                    if p == 0.0 {
                        continue;
                    }
                    for e in 0..d {
                        if e != t {
                            p *= ws[e];
                        }
                    }
                    row_g[t] += p * kj;
                }
            }
            for t in 0..d {
                gz.set(r, t, -sig * alpha[r] * row_g[t]);
            }
        }
        let mut tape = Tape::new();
        let traced = trace_feature(&mut tape, &dk.feature);
        let xin = tape.constant(x.clone());
        let zt = feature_forward_traced(&mut tape, &traced, xin)?;
        let gzc = tape.constant(gz);
        let prod = tape.mul(zt, gzc)?;
        let loss = tape.sum(prod);
        let back = tape.backward(loss)?;
        for leaf in traced.leaves() {
            match back.wrt(leaf) {
                Some(g) => grads.extend_from_slice(g.data()),
                None => grads.extend(std::iter::repeat(0.0).take(tape.value(leaf).data().len())),
            }
        }
    }

    let sig_floored = dk.base.log_signal_variance.exp() < VARIANCE_FLOOR;
    let noise_floored = dk.base.log_noise_variance.exp() < VARIANCE_FLOOR;
    for e in 0..d {
        let dku = kron_apply_replaced(&sys.factors, e, &dk_mats[e], &u);
        let g_quad = -sig * dot(&u, &dku);
        grads.push(0.5 * (g_quad + g_ls_ld[e]));
    }
    grads.push(if sig_floored { 0.0 } else { 0.5 * (-sig * dot(&u, &ku) + g_sig_ld) });
    grads.push(if noise_floored { 0.0 } else { 0.5 * (-noise * dot(&alpha, &alpha) + g_noise_ld) });
    grads.push(-sum(&alpha));
    debug_assert_eq!(grads.len(), dk.param_count());
    Ok((value, grads))
}

// ---------------------------------------------------------------------------
// SKIP: Hadamard products of per-dimension SKI kernels
// ---------------------------------------------------------------------------

/// One input dimension's SKI representation: `H = W K_UU W^T` with sparse
/// interpolation weights over that dimension's 1-D grid and a unit-signal
/// dense node kernel. The product kernel over all dimensions is the
/// entrywise (Hadamard) product of these factors.
#[derive(Clone, Debug)]
pub struct SkiFactor {
    pub w: SparseRowMatrix,
    pub k_uu: DenseMatrix,
}

impl SkiFactor {
    pub fn rows(&self) -> usize {
        self.w.rows()
    }

    /// `W K_UU W^T v`, exact for this factor.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let u = sparse_matvec_transpose(&self.w, v)?;
        let ku = self.k_uu.mul_vec(&u)?;
        sparse_matvec(&self.w, &ku)
    }
}

fn check_factors(factors: &[SkiFactor]) -> Result<usize> {
    let first = factors
        .first()
        .ok_or_else(|| Error::InvalidConfig("product kernel needs at least one factor".into()))?;
    let n = first.rows();
    for f in factors {
        if f.rows() != n {
            return Err(Error::DimensionMismatch {
                op: "skip factors",
                expected: n,
                got: f.rows(),
            });
        }
        if !f.k_uu.is_square() || f.k_uu.rows() != f.w.cols() {
            return Err(Error::ShapeMismatch {
                op: "skip factor",
                left_rows: f.w.rows(),
                left_cols: f.w.cols(),
                right_rows: f.k_uu.rows(),
                right_cols: f.k_uu.cols(),
            });
        }
    }
    Ok(n)
}

/// Per-input-dimension SKI factors for a product kernel over raw inputs: one
/// 1-D padded grid, interpolation matrix, and unit-signal RBF node kernel per
/// column of `x`, using that dimension's lengthscale. Signal variance is the
/// caller's to apply once to the assembled product.
pub fn build_ski_factors(
    x: &DenseMatrix,
    hp: &KernelHyperparams,
    m_per_dim: usize,
    padding_fraction: f64,
) -> Result<Vec<SkiFactor>> {
    if hp.dims() != x.cols() {
        return Err(Error::DimensionMismatch {
            op: "build_ski_factors",
            expected: x.cols(),
            got: hp.dims(),
        });
    }
    (0..x.cols())
        .map(|j| {
            let col: Vec<f64> = (0..x.rows()).map(|i| x.get(i, j)).collect();
            let colm = DenseMatrix::column(&col);
            let grid = build_grid(&colm, m_per_dim, padding_fraction)?;
            let w = interp_weights(&colm, &grid)?;
            let k_uu = unit_rbf(&grid.dims[0], hp.log_lengthscales[j])?;
            Ok(SkiFactor { w, k_uu })
        })
        .collect()
}

/// Symmetric low-rank form `sum_a weights[a] * c_a c_a^T` with the columns
/// `c_a` stored as an n x k matrix. This is what Lanczos plus a dense
/// eigensolve of the tridiagonal projection produces, and the shape Hadamard
/// merging preserves.
#[derive(Clone, Debug)]
pub struct RankDecomp {
    cols: DenseMatrix,
    weights: Vec<f64>,
}

impl RankDecomp {
    pub fn rank(&self) -> usize {
        self.weights.len()
    }

    pub fn n(&self) -> usize {
        self.cols.rows()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn column(&self, a: usize) -> Vec<f64> {
        (0..self.n()).map(|r| self.cols.get(r, a)).collect()
    }

    /// `sum_a w_a c_a (c_a^T v)` in two n x k passes.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let k = self.rank();
        let n = self.n();
        let mut proj = vec![0.0; k];
        for i in 0..n {
            let vi = v[i];
            if vi == 0.0 {
                continue;
            }
            for (a, p) in proj.iter_mut().enumerate() {
                *p += self.cols.get(i, a) * vi;
            }
        }
        for (p, w) in proj.iter_mut().zip(&self.weights) {
            *p *= w;
        }
        (0..n).map(|i| dot(self.cols.row(i), &proj)).collect()
    }
}

/// Rank-`rank` spectral sketch of a symmetric operator given as a matvec:
/// Lanczos from a seed restricted to the operator's range (so rank-deficient
/// operators break down cleanly instead of polluting the basis with noise),
/// then an eigensolve of the tridiagonal projection. A happy breakdown just
/// yields a shorter, exact-on-its-subspace decomposition.
fn rank_decomp_from_op<F>(op: F, n: usize, rank: usize, seed_tag: u64) -> Result<RankDecomp>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed_tag);
    let probe: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let seed = op(&probe);
    let fac = lanczos(&op, &seed, rank)?;
    let eig = sym_eigen(&fac.tridiag.to_dense())?;
    let cols = fac.basis.matmul(&eig.vectors)?;
    Ok(RankDecomp { cols, weights: eig.values })
}

/// Left-to-right Hadamard merge of per-dimension SKI factors into one
/// rank-`rank` decomposition of `H_1 . H_2 . ... . H_d` (entrywise product).
/// Each factor is first sketched to rank `rank`; the product of the running
/// sketch `P = sum_a w_a c_a c_a^T` with the next factor `N` is applied
/// matrix-free through the masking identity
///
/// ```text
/// (P . N) v = sum_a w_a c_a . (N (c_a . v))
/// ```
///
/// and re-truncated to rank `rank` before the next merge.
pub fn skip_merge(factors: &[SkiFactor], rank: usize) -> Result<RankDecomp> {
    let n = check_factors(factors)?;
    if rank == 0 || rank > n {
        return Err(Error::RankTooLarge { rank, n });
    }
    let mut merged =
        rank_decomp_from_op(|v| factors[0].apply(v).expect("factor shapes checked"), n, rank, 101)?;
    for (i, f) in factors.iter().enumerate().skip(1) {
        let reduced = rank_decomp_from_op(
            |v| f.apply(v).expect("factor shapes checked"),
            n,
            rank,
            101 + i as u64,
        )?;
        let cols: Vec<Vec<f64>> = (0..merged.rank()).map(|a| merged.column(a)).collect();
        let wts = merged.weights.clone();
        let hadamard = |v: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; n];
            for (ca, &wa) in cols.iter().zip(&wts) {
                let masked: Vec<f64> = ca.iter().zip(v).map(|(c, x)| c * x).collect();
                let inner = reduced.apply(&masked);
                for ((o, c), m) in out.iter_mut().zip(ca).zip(&inner) {
                    *o += wa * c * m;
                }
            }
            out
        };
        merged = rank_decomp_from_op(hadamard, n, rank, 701 + i as u64)?;
    }
    Ok(merged)
}

/// Product-kernel MVM `(H_1 . H_2 . ... . H_d) v` via [`skip_merge`]. A single
/// factor skips the sketching entirely and applies exactly; repeated callers
/// should merge once and reuse the [`RankDecomp`].
pub fn skip_mvm(factors: &[SkiFactor], lanczos_rank: usize, v: &[f64]) -> Result<Vec<f64>> {
    let n = check_factors(factors)?;
    if v.len() != n {
        return Err(Error::DimensionMismatch { op: "skip_mvm", expected: n, got: v.len() });
    }
    if lanczos_rank == 0 || lanczos_rank > n {
        return Err(Error::RankTooLarge { rank: lanczos_rank, n });
    }
    if factors.len() == 1 {
        return factors[0].apply(v);
    }
    Ok(skip_merge(factors, lanczos_rank)?.apply(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{gp_nll, gp_predict};
    use crate::kernels::deep_kernel_matrix;

    fn chacha_vec(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(lo..hi)).collect()
    }

    fn chacha_mat(seed: u64, r: usize, c: usize, lo: f64, hi: f64) -> DenseMatrix {
        DenseMatrix::new(r, c, chacha_vec(seed, r * c, lo, hi)).unwrap()
    }

    fn identity_dk(log_ls: &[f64], log_sig: f64, log_noise: f64, mean: f64) -> DeepKernelParams {
        DeepKernelParams {
            feature: FeatureParams::Identity,
            base: KernelHyperparams {
                log_lengthscales: log_ls.to_vec(),
                log_signal_variance: log_sig,
                log_noise_variance: log_noise,
                mean_constant: mean,
            },
        }
    }

    fn rel_err(got: &[f64], want: &[f64]) -> f64 {
        let num: f64 = got.iter().zip(want).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let den: f64 = want.iter().map(|v| v * v).sum::<f64>().sqrt();
        num / den.max(1e-300)
    }

    /// Densify a linear operator by applying it to unit vectors.
    fn densify(n: usize, apply: impl Fn(&[f64]) -> Vec<f64>) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for i in 0..n {
            e[i] = 1.0;
            let col = apply(&e);
            e[i] = 0.0;
            for (j, &v) in col.iter().enumerate() {
                out.set(j, i, v);
            }
        }
        out
    }

    // -- grids --------------------------------------------------------------

    #[test]
    fn grid_padding_follows_the_range_formula() {
        let z = DenseMatrix::from_rows(vec![vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let g = build_grid(&z, 10, 0.1).unwrap();
        assert_eq!(g.dims.len(), 2);
        for dim in &g.dims {
            // pad = 0.1 * (1 - 0) = 0.1; both edge sums are exact in binary.
            assert_eq!(dim.lo(), -0.1);
            assert_eq!(dim.hi(), 1.1);
            assert_eq!(dim.m(), 10);
            assert!((dim.spacing() - 1.2 / 9.0).abs() < 1e-15);
        }
    }

    #[test]
    fn grid_widens_a_constant_column() {
        let z = DenseMatrix::from_rows(vec![vec![3.25], vec![3.25], vec![3.25]]).unwrap();
        let g = build_grid(&z, 8, 0.1).unwrap();
        assert_eq!(g.dims[0].lo(), 2.75);
        assert_eq!(g.dims[0].hi(), 3.75);
    }

    #[test]
    fn grid_rejects_bad_shapes() {
        let z = chacha_mat(1, 5, 2, 0.0, 1.0);
        assert!(matches!(build_grid(&z, 3, 0.1), Err(Error::GridTooSmall { m: 3 })));
        let wide = chacha_mat(2, 5, 5, 0.0, 1.0);
        assert!(matches!(build_grid(&wide, 8, 0.1), Err(Error::TooManyDims { dims: 5 })));
        let empty = DenseMatrix::zeros(0, 2);
        assert!(matches!(build_grid(&empty, 8, 0.1), Err(Error::EmptyGrid)));
        assert!(matches!(Grid1D::new(1.0, 1.0, 8), Err(Error::InvalidConfig(_))));
    }

    // -- interpolation weights ----------------------------------------------

    #[test]
    fn on_node_weights_are_an_exact_selection() {
        // Spacing 0.25 is a power of two, so node arithmetic is exact and the
        // interpolation parameter t is exactly zero on nodes.
        let grid = ProductGrid::new(vec![Grid1D::new(-2.0, 2.0, 17).unwrap()]).unwrap();
        let z = DenseMatrix::from_rows(vec![vec![0.75]]).unwrap();
        let w = interp_weights(&z, &grid).unwrap();
        let dense = w.to_dense();
        for j in 0..17 {
            assert_eq!(dense.get(0, j), if j == 11 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn midpoint_weights_match_the_kernel_closed_form() {
        // t = 1/2 puts the four stencil nodes at distances 3/2, 1/2, 1/2, 3/2,
        // where the kernel evaluates to -1/16 and 9/16 exactly (all the
        // intermediate products are dyadic rationals).
        let grid = ProductGrid::new(vec![Grid1D::new(-2.0, 2.0, 17).unwrap()]).unwrap();
        let z = DenseMatrix::from_rows(vec![vec![0.875]]).unwrap();
        let w = interp_weights(&z, &grid).unwrap();
        let (idx, vals) = w.row(0);
        assert_eq!(idx, &[10, 11, 12, 13][..]);
        assert_eq!(vals, &[-0.0625, 0.5625, 0.5625, -0.0625][..]);
    }

    #[test]
    fn two_d_on_node_selects_a_single_flat_index() {
        let grid = ProductGrid::new(vec![
            Grid1D::new(0.0, 4.0, 17).unwrap(),
            Grid1D::new(-1.0, 1.0, 9).unwrap(),
        ])
        .unwrap();
        let z = DenseMatrix::from_rows(vec![vec![1.0, 0.5]]).unwrap();
        // dim 0 node 4, dim 1 node 6, flat = 4 * 9 + 6 = 42 (dim 0 slowest).
        let w = interp_weights(&z, &grid).unwrap();
        let dense = w.to_dense();
        for j in 0..grid.total_nodes() {
            assert_eq!(dense.get(0, j), if j == 42 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn rows_sum_to_one_with_bounded_support() {
        let grid = ProductGrid::new(vec![
            Grid1D::new(-1.0, 1.0, 6).unwrap(),
            Grid1D::new(-1.0, 1.0, 6).unwrap(),
        ])
        .unwrap();
        // Deliberately spill past the grid so the clamp path is exercised.
        let z = chacha_mat(7, 60, 2, -1.4, 1.4);
        let w = interp_weights(&z, &grid).unwrap();
        for i in 0..60 {
            let (idx, vals) = w.row(i);
            assert!(idx.len() <= 16, "row {i} has {} entries", idx.len());
            assert!(idx.iter().all(|&j| j < 36));
            let s: f64 = vals.iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row {i} sums to {s}");
        }
    }

    #[test]
    fn interpolation_reproduces_quadratics_on_interior_cells() {
        let grid1 = Grid1D::new(0.0, 4.0, 17).unwrap();
        let grid = ProductGrid::new(vec![grid1.clone()]).unwrap();
        let f = |u: f64| u * u - 0.7 * u + 0.3;
        let nodes: Vec<f64> = grid1.nodes().iter().map(|&u| f(u)).collect();
        let z_vals = chacha_vec(9, 20, 0.6, 3.4);
        let z = DenseMatrix::column(&z_vals);
        let w = interp_weights(&z, &grid).unwrap();
        for (i, &zv) in z_vals.iter().enumerate() {
            let (idx, vals) = w.row(i);
            let interp: f64 = idx.iter().zip(vals).map(|(&j, &wv)| wv * nodes[j]).sum();
            assert!((interp - f(zv)).abs() < 1e-12, "z = {zv}: {interp} vs {}", f(zv));
        }
    }

    // -- Kronecker algebra ---------------------------------------------------

    #[test]
    fn kron_mvm_matches_the_materialized_product() {
        let a = chacha_mat(11, 3, 3, -1.0, 1.0);
        let b = chacha_mat(12, 4, 4, -1.0, 1.0);
        let c = chacha_mat(13, 2, 2, -1.0, 1.0);
        let factors = vec![a.clone(), b.clone(), c.clone()];
        let total = 3 * 4 * 2;
        let v = chacha_vec(14, total, -1.0, 1.0);
        let got = kron_mvm(&factors, &v).unwrap();
        // Dense Kronecker with dimension 0 slowest: flat = (i0 * 4 + i1) * 2 + i2.
        let mut dense = DenseMatrix::zeros(total, total);
        for i0 in 0..3 {
            for i1 in 0..4 {
                for i2 in 0..2 {
                    for j0 in 0..3 {
                        for j1 in 0..4 {
                            for j2 in 0..2 {
                                let r = (i0 * 4 + i1) * 2 + i2;
                                let s = (j0 * 4 + j1) * 2 + j2;
                                dense.set(r, s, a.get(i0, j0) * b.get(i1, j1) * c.get(i2, j2));
                            }
                        }
                    }
                }
            }
        }
        let want = dense.mul_vec(&v).unwrap();
        assert!(rel_err(&got, &want) < 1e-13);
    }

    #[test]
    fn top_products_walk_the_lattice_in_order() {
        let evals = vec![vec![5.0, 2.0], vec![3.0, 1.0]];
        let top2 = top_kron_products(&evals, 2);
        assert_eq!(top2, vec![(15.0, vec![0, 0]), (6.0, vec![1, 0])]);
        let all = top_kron_products(&evals, 10);
        let values: Vec<f64> = all.iter().map(|(p, _)| *p).collect();
        assert_eq!(values, vec![15.0, 6.0, 5.0, 2.0]);
    }

    // -- KISS mvm -------------------------------------------------------------

    fn on_grid_model() -> (KissGpModel, DenseMatrix) {
        let grid = ProductGrid::new(vec![
            Grid1D::new(-1.0, 1.0, 6).unwrap(),
            Grid1D::new(0.0, 2.0, 6).unwrap(),
        ])
        .unwrap();
        let z = grid.node_matrix();
        let dk = identity_dk(&[0.3, -0.2], 0.15, 0.02f64.ln(), 0.7);
        let model = KissGpModel::with_grid(dk, &z, grid).unwrap();
        (model, z)
    }

    #[test]
    fn kiss_mvm_on_grid_matches_the_dense_kernel() {
        let (model, z) = on_grid_model();
        let mut noisy = deep_kernel_matrix(&model.dk, &z, &z).unwrap();
        noisy.add_diagonal(model.dk.base.noise_variance());
        for seed in 0..3 {
            let v = chacha_vec(20 + seed, 36, -1.0, 1.0);
            let got = kiss_mvm(&model, &v).unwrap();
            let want = noisy.mul_vec(&v).unwrap();
            assert!(rel_err(&got, &want) < 1e-10, "seed {seed}: {}", rel_err(&got, &want));
        }
    }

    #[test]
    fn kiss_mvm_is_linear_and_annihilates_zero() {
        let z = chacha_mat(31, 40, 2, -1.0, 1.0);
        let dk = identity_dk(&[0.1, -0.3], 0.0, 0.05f64.ln(), 0.0);
        let model = KissGpModel::with_grid(dk, &z, build_grid(&z, 7, 0.1).unwrap()).unwrap();
        let zero = vec![0.0; 40];
        assert!(kiss_mvm(&model, &zero).unwrap().iter().all(|&v| v == 0.0));
        let u = chacha_vec(32, 40, -1.0, 1.0);
        let v = chacha_vec(33, 40, -1.0, 1.0);
        let (a, b) = (0.7, -1.3);
        let combo: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
        let got = kiss_mvm(&model, &combo).unwrap();
        let mu = kiss_mvm(&model, &u).unwrap();
        let mv = kiss_mvm(&model, &v).unwrap();
        let want: Vec<f64> = mu.iter().zip(&mv).map(|(x, y)| a * x + b * y).collect();
        assert!(rel_err(&got, &want) < 1e-10);
    }

    #[test]
    fn kiss_mvm_reduces_to_noise_when_signal_is_floored() {
        let z = chacha_mat(35, 30, 2, -1.0, 1.0);
        // Signal pinned at the variance floor, so the kernel term is ~1e-6
        // against a noise variance of 50.
        let dk = identity_dk(&[0.0, 0.0], (1e-12f64).ln(), 50.0f64.ln(), 0.0);
        let model = KissGpModel::with_grid(dk, &z, build_grid(&z, 6, 0.1).unwrap()).unwrap();
        let v = chacha_vec(36, 30, -1.0, 1.0);
        let got = kiss_mvm(&model, &v).unwrap();
        let want: Vec<f64> = v.iter().map(|x| 50.0 * x).collect();
        assert!(rel_err(&got, &want) < 1e-5);
    }

    #[test]
    fn kiss_mvm_checks_vector_length() {
        let (model, _) = on_grid_model();
        assert!(matches!(
            kiss_mvm(&model, &[1.0; 7]),
            Err(Error::DimensionMismatch { op: "kiss_mvm", expected: 36, got: 7 })
        ));
    }

    // -- KISS nll -------------------------------------------------------------

    #[test]
    fn kiss_nll_on_grid_tracks_the_exact_nll() {
        // With data exactly on the 36 grid nodes the interpolation is a
        // permutation, so the spectral surrogate reproduces the true
        // log-determinant and only the CG tolerance separates the two paths.
        let (model, z) = on_grid_model();
        let y = chacha_vec(40, 36, -1.5, 1.5);
        let exact = gp_nll(&model.dk, &z, &y).unwrap();
        let approx = kiss_nll(&model, &y).unwrap();
        assert!(
            (approx - exact).abs() <= 0.02 * exact.abs(),
            "approx {approx} vs exact {exact}"
        );
    }

    #[test]
    fn kiss_nll_noise_dominated_matches_the_closed_form() {
        // Grid smaller than the data (16 < 20) so the noise-only remainder
        // term carries 4 of the 20 log-eigenvalues; without it the total is
        // off by 27 nats.
        let x = DenseMatrix::column(&chacha_vec(41, 20, 0.0, 3.0));
        let dk = identity_dk(&[0.0], 0.0, 1e6f64.ln(), 0.0);
        let model = KissGpModel::new(dk, &x, 16, 0.1).unwrap();
        let y = chacha_vec(42, 20, -2.0, 2.0);
        let got = kiss_nll(&model, &y).unwrap();
        let yy: f64 = y.iter().map(|v| v * v).sum();
        let want = 0.5 * (yy / 1e6 + 20.0 * 1e6f64.ln() + 20.0 * ln_2pi());
        assert!((got - want).abs() <= 0.01 * want.abs(), "got {got}, want {want}");
    }

    #[test]
    fn kiss_nll_is_deterministic() {
        let (model, _) = on_grid_model();
        let y = chacha_vec(43, 36, -1.0, 1.0);
        let a = kiss_nll(&model, &y).unwrap();
        let b = kiss_nll(&model, &y).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn exact_logdet_oracle_agrees_on_grid() {
        let (model, _) = on_grid_model();
        let y = chacha_vec(44, 36, -1.0, 1.0);
        let approx = kiss_nll(&model, &y).unwrap();
        let oracle = kiss_nll_exact_logdet(&model, &y).unwrap();
        assert!(
            (approx - oracle).abs() <= 1e-8 * oracle.abs(),
            "approx {approx} vs oracle {oracle}"
        );
    }

    #[test]
    fn exact_logdet_tracks_the_dense_nll_off_grid() {
        // A dense 1-D grid makes the interpolated operator nearly the exact
        // kernel, so the exact-log-det path should match the dense NLL
        // closely; this validates the oracle itself against an independent
        // computation.
        let x = DenseMatrix::column(&chacha_vec(45, 25, -2.0, 2.0));
        let dk = identity_dk(&[-0.7], 0.0, 0.01f64.ln(), 0.1);
        let model = KissGpModel::new(dk.clone(), &x, 200, 0.1).unwrap();
        let y = chacha_vec(46, 25, -1.0, 1.0);
        let dense = gp_nll(&dk, &x, &y).unwrap();
        let oracle = kiss_nll_exact_logdet(&model, &y).unwrap();
        assert!(
            (oracle - dense).abs() <= 1e-3 * dense.abs(),
            "oracle {oracle} vs dense {dense}"
        );
    }

    #[test]
    fn exact_logdet_is_capped_at_desk_scale() {
        let x = DenseMatrix::column(&chacha_vec(47, 2001, 0.0, 1.0));
        let dk = identity_dk(&[0.0], 0.0, 0.1f64.ln(), 0.0);
        let model = KissGpModel::new(dk, &x, 4, 0.1).unwrap();
        let y = vec![0.0; 2001];
        assert!(matches!(kiss_nll_exact_logdet(&model, &y), Err(Error::InvalidConfig(_))));
    }

    // -- KISS prediction --------------------------------------------------------

    #[test]
    fn kiss_predict_interpolates_training_targets_on_grid() {
        let grid1 = Grid1D::new(0.0, 3.0, 10).unwrap();
        let grid = ProductGrid::new(vec![grid1]).unwrap();
        let z = grid.node_matrix();
        let dk = identity_dk(&[-0.2], 0.0, 1e-4f64.ln(), 0.3);
        // Targets drawn from the prior's range space keep the interpolation
        // residual at the noise scale: y = K w + c gives |mean - y| = noise * |alpha|
        // with alpha ~ w.
        let k = deep_kernel_matrix(&dk, &z, &z).unwrap();
        let wvec = chacha_vec(50, 10, -1.0, 1.0);
        let y: Vec<f64> = (0..10).map(|i| 0.3 + dot(k.row(i), &wvec)).collect();
        let model = KissGpModel::with_grid(dk, &z, grid).unwrap();
        let pred = kiss_predict(&model, &y, &z).unwrap();
        assert!(!pred.includes_noise);
        for (m, t) in pred.mean.iter().zip(&y) {
            assert!((m - t).abs() < 1e-3, "mean {m} vs target {t}");
        }
    }

    #[test]
    fn kiss_predict_reverts_to_the_prior_far_from_data() {
        let grid = ProductGrid::new(vec![Grid1D::new(-10.0, 10.0, 40).unwrap()]).unwrap();
        let z = DenseMatrix::column(&chacha_vec(51, 15, 0.0, 1.0));
        let sig_log = 0.8f64.ln();
        let dk = identity_dk(&[0.0], sig_log, 0.01f64.ln(), 0.2);
        let model = KissGpModel::with_grid(dk, &z, grid).unwrap();
        let y = chacha_vec(52, 15, -1.0, 1.0);
        let zstar = DenseMatrix::from_rows(vec![vec![8.0]]).unwrap();
        let pred = kiss_predict(&model, &y, &zstar).unwrap();
        let var = pred.variance()[0];
        assert!((var - 0.8).abs() <= 0.05 * 0.8, "variance {var} should be near the prior 0.8");
        assert!((pred.mean[0] - 0.2).abs() < 1e-3, "mean {} should revert to 0.2", pred.mean[0]);
    }

    #[test]
    fn kiss_predict_matches_exact_gp_on_a_dense_grid() {
        let n = 200;
        let z = DenseMatrix::column(&chacha_vec(53, n, -2.0, 2.0));
        let noise_vals = chacha_vec(54, n, -1.0, 1.0);
        let y: Vec<f64> = (0..n).map(|i| (2.0 * z.get(i, 0)).sin() + 0.05 * noise_vals[i]).collect();
        let dk = identity_dk(&[-0.7], 0.0, 0.01f64.ln(), 0.0);
        let model = KissGpModel::new(dk.clone(), &z, 400, 0.1).unwrap();
        let stars = 60;
        let zstar = DenseMatrix::column(
            &(0..stars).map(|i| -1.8 + 3.6 * i as f64 / (stars - 1) as f64).collect::<Vec<_>>(),
        );
        let kiss = kiss_predict(&model, &y, &zstar).unwrap();
        let exact = gp_predict(&dk, &z, &y, &zstar, false).unwrap();
        let rmse = (kiss
            .mean
            .iter()
            .zip(&exact.mean)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / stars as f64)
            .sqrt();
        assert!(rmse < 1e-2, "mean rmse {rmse}");
    }

    // -- SKI fidelity invariants --------------------------------------------

    #[test]
    fn ski_reproduces_the_exact_kernel_on_grid_nodes() {
        let (model, z) = on_grid_model();
        let noise = model.dk.base.noise_variance();
        let approx = densify(36, |e| {
            let mut col = kiss_mvm(&model, e).unwrap();
            for (c, v) in col.iter_mut().zip(e) {
                *c -= noise * v;
            }
            col
        });
        let exact = deep_kernel_matrix(&model.dk, &z, &z).unwrap();
        let err = approx.sub(&exact).unwrap().frob_norm() / exact.frob_norm();
        assert!(err < 1e-10, "relative Frobenius error {err}");
    }

    #[test]
    fn ski_error_decreases_as_the_grid_refines() {
        let n = 200;
        let z = DenseMatrix::column(&chacha_vec(60, n, -2.0, 2.0));
        let dk = identity_dk(&[-0.7], 0.0, 0.01f64.ln(), 0.0);
        let exact = deep_kernel_matrix(&dk, &z, &z).unwrap();
        let exact_norm = exact.frob_norm();
        let mut errors = Vec::new();
        for m in [25usize, 50, 100, 200, 400] {
            let grid = build_grid(&z, m, 0.1).unwrap();
            let w = interp_weights(&z, &grid).unwrap();
            let k_uu = unit_rbf(&grid.dims[0], -0.7).unwrap();
            let approx = densify(n, |v| {
                let u = sparse_matvec_transpose(&w, v).unwrap();
                let ku = k_uu.mul_vec(&u).unwrap();
                sparse_matvec(&w, &ku).unwrap()
            });
            errors.push(approx.sub(&exact).unwrap().frob_norm() / exact_norm);
        }
        for pair in errors.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12, "errors not decreasing: {errors:?}");
        }
        assert!(errors.last().unwrap() < &1e-2, "m=400 error {:?}", errors.last());
    }

    #[test]
    fn hadamard_product_of_ski_factors_stays_psd() {
        let n = 20;
        let x = chacha_mat(61, n, 3, -1.0, 1.0);
        let hp = KernelHyperparams {
            log_lengthscales: vec![-0.3, 0.1, 0.4],
            log_signal_variance: 0.0,
            log_noise_variance: 0.01f64.ln(),
            mean_constant: 0.0,
        };
        let factors = build_ski_factors(&x, &hp, 8, 0.15).unwrap();
        let mut product = DenseMatrix::zeros(n, n);
        for v in product.data_mut() {
            *v = 1.0;
        }
        for f in &factors {
            let dense = densify(n, |v| f.apply(v).unwrap());
            for (p, d) in product.data_mut().iter_mut().zip(dense.data()) {
                *p *= d;
            }
        }
        // Mirror the lower triangle so fp asymmetry cannot trip the
        // eigensolver's symmetry check.
        for i in 0..n {
            for j in (i + 1)..n {
                let m = 0.5 * (product.get(i, j) + product.get(j, i));
                product.set(i, j, m);
                product.set(j, i, m);
            }
        }
        let eig = sym_eigen(&product).unwrap();
        let min = eig.values.last().copied().unwrap();
        assert!(min >= -1e-8, "smallest eigenvalue {min}");
    }

    // -- SKIP -----------------------------------------------------------------

    #[test]
    fn skip_single_factor_is_the_exact_ski_mvm() {
        let x = DenseMatrix::column(&chacha_vec(70, 30, -1.0, 1.0));
        let hp = KernelHyperparams {
            log_lengthscales: vec![-0.2],
            log_signal_variance: 0.0,
            log_noise_variance: 0.01f64.ln(),
            mean_constant: 0.0,
        };
        let factors = build_ski_factors(&x, &hp, 12, 0.2).unwrap();
        let v = chacha_vec(71, 30, -1.0, 1.0);
        let got = skip_mvm(&factors, 20, &v).unwrap();
        let want = factors[0].apply(&v).unwrap();
        let max = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max < 1e-12);
    }

    fn two_factor_instance() -> (Vec<SkiFactor>, DenseMatrix) {
        let n = 50;
        let x = chacha_mat(72, n, 2, -1.0, 1.0);
        let hp = KernelHyperparams {
            log_lengthscales: vec![-0.3, 0.2],
            log_signal_variance: 0.0,
            log_noise_variance: 0.01f64.ln(),
            mean_constant: 0.0,
        };
        let factors = build_ski_factors(&x, &hp, 10, 0.2).unwrap();
        let h1 = densify(n, |v| factors[0].apply(v).unwrap());
        let h2 = densify(n, |v| factors[1].apply(v).unwrap());
        let mut dense = h1;
        for (p, q) in dense.data_mut().iter_mut().zip(h2.data()) {
            *p *= q;
        }
        (factors, dense)
    }

    #[test]
    fn skip_full_rank_matches_the_dense_hadamard_product() {
        let (factors, dense) = two_factor_instance();
        let v = chacha_vec(73, 50, -1.0, 1.0);
        let got = skip_mvm(&factors, 50, &v).unwrap();
        let want = dense.mul_vec(&v).unwrap();
        assert!(rel_err(&got, &want) < 1e-6, "rel err {}", rel_err(&got, &want));
    }

    #[test]
    fn skip_error_shrinks_as_rank_grows() {
        let (factors, dense) = two_factor_instance();
        let dense_norm = dense.frob_norm();
        let mut errors = Vec::new();
        for rank in [10usize, 20, 30, 40, 50] {
            let merged = skip_merge(&factors, rank).unwrap();
            let approx = densify(50, |v| merged.apply(v));
            let err = approx.sub(&dense).unwrap().frob_norm() / dense_norm;
            assert!(err.is_finite());
            errors.push(err);
        }
        for pair in errors.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-8, "errors not decreasing: {errors:?}");
        }
        assert!(errors.last().unwrap() < &1e-6, "full-rank error {:?}", errors.last());
    }

    #[test]
    fn skip_all_ones_factors_sum_the_vector() {
        // W row-stochastic and K_UU all ones makes each factor the all-ones
        // matrix, whose Hadamard powers stay all-ones: the product MVM is
        // (sum v) * 1. Rank 1 is exact; rank 3 exercises the happy-breakdown
        // path of the Lanczos sketch on a rank-1 operator.
        let n = 12;
        let entries: Vec<Vec<(usize, f64)>> =
            (0..n).map(|_| (0..4).map(|j| (j, 0.25)).collect()).collect();
        let w = SparseRowMatrix::from_row_entries(n, 5, entries).unwrap();
        let mut k_uu = DenseMatrix::zeros(5, 5);
        for v in k_uu.data_mut() {
            *v = 1.0;
        }
        let factor = SkiFactor { w, k_uu };
        let factors = vec![factor.clone(), factor];
        let v = chacha_vec(74, n, -1.0, 1.0);
        let total: f64 = v.iter().sum();
        for rank in [1usize, 3] {
            let got = skip_mvm(&factors, rank, &v).unwrap();
            for g in &got {
                assert!((g - total).abs() < 1e-10, "rank {rank}: {g} vs {total}");
            }
        }
    }

    #[test]
    fn skip_validates_rank_and_shapes() {
        let (factors, _) = two_factor_instance();
        let v = vec![0.0; 50];
        assert!(matches!(skip_mvm(&factors, 0, &v), Err(Error::RankTooLarge { rank: 0, n: 50 })));
        assert!(matches!(skip_mvm(&factors, 51, &v), Err(Error::RankTooLarge { rank: 51, n: 50 })));
        assert!(matches!(skip_mvm(&factors, 10, &v[..7]), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(skip_mvm(&[], 1, &v), Err(Error::InvalidConfig(_))));
    }

    // -- KISS gradients ---------------------------------------------------------

    /// Central finite differences of the tight-tolerance NLL over every
    /// parameter, compared class-by-class (per-entry comparisons drown in CG
    /// and eigensolver evaluation noise for near-zero entries; subvector
    /// norms keep the 1e-4 criterion meaningful).
    fn check_kiss_grad(
        dk: &DeepKernelParams,
        grid: &ProductGrid,
        x: &DenseMatrix,
        y: &[f64],
        classes: &[(usize, usize, &str)],
        tol: f64,
    ) {
        let (_, grad) = kiss_nll_grad_impl(dk, grid, x, y, 1e-12, 50_000).unwrap();
        let flat = dk.flatten();
        let h = 1e-4;
        let mut fd = Vec::with_capacity(flat.len());
        for i in 0..flat.len() {
            let mut probe = dk.clone();
            let mut bumped = flat.clone();
            bumped[i] = flat[i] + h;
            probe.write_flat(&bumped).unwrap();
            let fp = kiss_nll_value_impl(&probe, grid, x, y, 1e-12, 50_000).unwrap();
            bumped[i] = flat[i] - h;
            probe.write_flat(&bumped).unwrap();
            let fm = kiss_nll_value_impl(&probe, grid, x, y, 1e-12, 50_000).unwrap();
            fd.push((fp - fm) / (2.0 * h));
        }
        for &(lo, hi, name) in classes {
            let err: f64 =
                grad[lo..hi].iter().zip(&fd[lo..hi]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let scale: f64 = fd[lo..hi].iter().map(|v| v * v).sum::<f64>();
            let rel = err.sqrt() / (scale.sqrt() + 1e-8);
            assert!(rel < tol, "class {name}: rel {rel:.3e} (|fd| {:.3e})", scale.sqrt());
        }
    }

    #[test]
    fn kiss_gradient_matches_finite_differences_with_identity_features() {
        // 16 grid nodes under 20 points exercises the remainder branch of the
        // log-det surrogate and its noise gradient.
        let x = chacha_mat(80, 20, 2, -1.0, 1.0);
        let grid = build_grid(&x, 4, 0.3).unwrap();
        let dk = identity_dk(&[0.2, -0.3], 0.1, 0.05f64.ln(), 0.15);
        let y = chacha_vec(81, 20, -1.0, 1.0);
        let classes =
            [(0usize, 2usize, "lengthscales"), (2, 3, "signal"), (3, 4, "noise"), (4, 5, "mean")];
        check_kiss_grad(&dk, &grid, &x, &y, &classes, 1e-4);
    }

    #[test]
    fn kiss_gradient_matches_finite_differences_through_an_mlp() {
        // 25 grid nodes over 12 points exercises the truncated top-n branch;
        // the MLP classes check the interpolation-weight chain rule into the
        // feature net.
        let spec = crate::features::FeatureSpec::mlp(vec![1, 3, 2]);
        let feature = crate::features::init_feature(&spec, 90).unwrap();
        let dk = DeepKernelParams {
            feature,
            base: KernelHyperparams {
                log_lengthscales: vec![0.15, -0.1],
                log_signal_variance: 0.1,
                log_noise_variance: 0.05f64.ln(),
                mean_constant: 0.1,
            },
        };
        let x = chacha_mat(91, 12, 1, -1.0, 1.0);
        let z = feature_forward(&dk.feature, &x).unwrap();
        let grid = build_grid(&z, 5, 0.35).unwrap();
        let y = chacha_vec(92, 12, -1.0, 1.0);
        // MLP [1, 3, 2] flattens as w1 (3), b1 (3), w2 (6), b2 (2), then the
        // four kernel classes.
        let classes = [
            (0usize, 3usize, "layer1 weight"),
            (3, 6, "layer1 bias"),
            (6, 12, "layer2 weight"),
            (12, 14, "layer2 bias"),
            (14, 16, "lengthscales"),
            (16, 17, "signal"),
            (17, 18, "noise"),
            (18, 19, "mean"),
        ];
        check_kiss_grad(&dk, &grid, &x, &y, &classes, 1e-4);
    }

    #[test]
    fn kiss_gradient_zeroes_floored_variances() {
        let x = chacha_mat(95, 15, 2, -1.0, 1.0);
        let grid = build_grid(&x, 5, 0.2).unwrap();
        let dk = identity_dk(&[0.0, 0.0], 0.2, (1e-9f64).ln(), 0.0);
        let y = chacha_vec(96, 15, -1.0, 1.0);
        let (_, grad) = kiss_nll_grad(&dk, &grid, &x, &y).unwrap();
        assert_eq!(grad[3], 0.0, "floored noise must not receive gradient");
        assert!(grad[2] != 0.0, "signal gradient should still flow");
    }

    #[test]
    fn kiss_grad_value_agrees_with_kiss_nll() {
        let x = chacha_mat(97, 18, 2, -1.0, 1.0);
        let grid = build_grid(&x, 5, 0.2).unwrap();
        let dk = identity_dk(&[0.1, -0.2], 0.0, 0.02f64.ln(), 0.3);
        let y = chacha_vec(98, 18, -1.0, 1.0);
        let (value, _) = kiss_nll_grad(&dk, &grid, &x, &y).unwrap();
        let model = KissGpModel::with_grid(dk, &x, grid).unwrap();
        let direct = kiss_nll(&model, &y).unwrap();
        assert_eq!(value.to_bits(), direct.to_bits());
    }
}
