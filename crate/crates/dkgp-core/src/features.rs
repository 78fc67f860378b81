//! Neural feature extractors: multilayer perceptrons and Kolmogorov-Arnold
//! (KAN) layers built from B-splines.
//!
//! Both map an `n x d` input batch to an `n x out` latent batch (the deep
//! kernel composes this with an RBF kernel over the latent space, see
//! [`crate::kernels`]). A KAN layer puts a learnable univariate function on
//! every edge:
//!
//! ```text
//! out[r][o] = sum_i  base_weight[o][i] * silu(x[r][i])
//!           + sum_i  spline_scaler[o][i] * sum_b spline_weight[o][i*B+b] * N_b(x[r][i])
//! ```
//!
//! where `N_b` are B-spline basis functions of a fixed order on a uniform
//! grid. Inputs outside the grid range are clamped before basis evaluation
//! (the SiLU base path sees the raw value), which keeps the basis a partition
//! of unity and the spline gradient bounded.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, TracedValue};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::par;

/// Largest supported spline order; the Cox-de Boor scratch buffers in the
/// hot path are stack-allocated with this bound.
const MAX_SPLINE_ORDER: usize = 15;

// ---------------------------------------------------------------------------
// B-spline basis
// ---------------------------------------------------------------------------

/// A uniform B-spline basis of a fixed `order` over `grid_size` cells
/// spanning `[lo, hi]`, with the knot vector extended by `order` extra
/// uniform knots on each side:
///
/// ```text
/// t_i = lo + (i - order) * h,   h = (hi - lo) / grid_size,
/// i = 0 ..= grid_size + 2*order.
/// ```
///
/// Every point of `[lo, hi]` is then covered by `order + 1` basis functions
/// that sum to one, and there are `grid_size + order` basis functions total.
#[derive(Clone, Debug, PartialEq)]
pub struct BsplineDesign {
    knots: Vec<f64>,
    order: usize,
    grid_size: usize,
    lo: f64,
    hi: f64,
    step: f64,
}

impl BsplineDesign {
    pub fn new(grid_size: usize, order: usize, lo: f64, hi: f64) -> Result<Self> {
        if grid_size == 0 {
            return Err(Error::InvalidConfig("grid_size must be at least 1".into()));
        }
        if order > MAX_SPLINE_ORDER {
            return Err(Error::InvalidConfig(format!(
                "spline order {order} above {MAX_SPLINE_ORDER} is not supported"
            )));
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidConfig(format!(
                "grid range [{lo}, {hi}] is not a nondegenerate finite interval"
            )));
        }
        let step = (hi - lo) / grid_size as f64;
        let knots = (0..=grid_size + 2 * order)
            .map(|i| lo + (i as f64 - order as f64) * step)
            .collect();
        Ok(Self { knots, order, grid_size, lo, hi, step })
    }

    /// Number of basis functions: `grid_size + order`.
    pub fn basis_count(&self) -> usize {
        self.grid_size + self.order
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn range(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Whether `u` lies inside the grid range (clamping is a no-op there).
    pub fn in_range(&self, u: f64) -> bool {
        self.lo <= u && u <= self.hi
    }

    fn clamp(&self, u: f64) -> f64 {
        u.clamp(self.lo, self.hi)
    }

    /// Index of the grid cell containing `u`, computed arithmetically rather
    /// than by comparing against knot values so that `u == hi` lands in the
    /// last cell even when `lo + grid_size * step` rounds past `hi`.
    fn cell_of(&self, u: f64) -> usize {
        let t = ((u - self.lo) / self.step).floor();
        if t <= 0.0 {
            0
        } else {
            (t as usize).min(self.grid_size - 1)
        }
    }

    /// All basis values at `u` (clamped into range), written into `out`
    /// which must have length [`Self::basis_count`]. At most `order + 1`
    /// entries are nonzero and they sum to one.
    pub fn basis_into(&self, u: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.basis_count());
        out.fill(0.0);
        let u = self.clamp(u);
        let span = self.cell_of(u) + self.order;
        let mut left = [0.0f64; MAX_SPLINE_ORDER + 1];
        let mut right = [0.0f64; MAX_SPLINE_ORDER + 1];
        cox_de_boor(
            &self.knots,
            self.order,
            span,
            u,
            &mut out[span - self.order..=span],
            &mut left,
            &mut right,
        );
    }

    /// Derivatives `N_b'(u)` of all basis functions at `u` (clamped), via
    ///
    /// ```text
    /// N'_{i,k}(u) = k * ( N_{i,k-1}(u) / (t_{i+k} - t_i)
    ///                   - N_{i+1,k-1}(u) / (t_{i+k+1} - t_{i+1}) ).
    /// ```
    ///
    /// This is the in-range derivative; callers that clamp out-of-range
    /// inputs must treat those derivatives as zero themselves (see
    /// [`bspline_combine_vjp`]).
    pub fn basis_deriv_into(&self, u: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.basis_count());
        out.fill(0.0);
        let k = self.order;
        if k == 0 {
            return;
        }
        let u = self.clamp(u);
        let span = self.cell_of(u) + k;
        let mut lower = [0.0f64; MAX_SPLINE_ORDER + 1];
        let mut left = [0.0f64; MAX_SPLINE_ORDER + 1];
        let mut right = [0.0f64; MAX_SPLINE_ORDER + 1];
        // lower[j] = N_{span-(k-1)+j, k-1}(u) for j in 0..k.
        cox_de_boor(&self.knots, k - 1, span, u, &mut lower[..k], &mut left, &mut right);
        let kf = k as f64;
        let base = span - k;
        for (idx, slot) in out[base..=span].iter_mut().enumerate() {
            let i = base + idx;
            // Basis index i maps to lower[idx - 1]; the two window edges fall
            // back to zero (those lower-order splines vanish on this cell).
            let a = if idx > 0 { lower[idx - 1] } else { 0.0 };
            let b = if idx < k { lower[idx] } else { 0.0 };
            let da = self.knots[i + k] - self.knots[i];
            let db = self.knots[i + k + 1] - self.knots[i + 1];
            *slot = kf * (a / da - b / db);
        }
    }
}

/// Local Cox-de Boor recursion: given the knot span `span` with
/// `t_span <= u <= t_{span+1}`, fills `out` (length `order + 1`) with the
/// nonzero basis values `N_{span-order}(u) ..= N_span(u)` of the given order.
///
/// `left`/`right` are scratch, length at least `order + 1`. All knot spans of
/// `order` consecutive cells must have positive width, which holds for any
/// strictly increasing knot vector.
fn cox_de_boor(
    knots: &[f64],
    order: usize,
    span: usize,
    u: f64,
    out: &mut [f64],
    left: &mut [f64],
    right: &mut [f64],
) {
    out[0] = 1.0;
    for j in 1..=order {
        left[j] = u - knots[span + 1 - j];
        right[j] = knots[span + j] - u;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let temp = out[r] / denom;
            out[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        out[j] = saved;
    }
}

/// B-spline basis values at `u` for an arbitrary strictly increasing knot
/// vector. Returns `knots.len() - order - 1` values; at most `order + 1` are
/// nonzero and, on the fully supported region
/// `[knots[order], knots[len-1-order]]` (into which `u` is clamped), they sum
/// to one.
pub fn bspline_basis(u: f64, knots: &[f64], order: usize) -> Result<Vec<f64>> {
    if knots.len() < 2 * order + 2 {
        return Err(Error::InvalidKnots(format!(
            "order {order} needs at least {} knots, got {}",
            2 * order + 2,
            knots.len()
        )));
    }
    for (i, pair) in knots.windows(2).enumerate() {
        if !(pair[0].is_finite() && pair[1].is_finite()) {
            return Err(Error::InvalidKnots(format!("knot {} or {} is not finite", i, i + 1)));
        }
        if pair[0] >= pair[1] {
            return Err(Error::InvalidKnots(format!(
                "knots must be strictly increasing, but t[{}] = {} >= t[{}] = {}",
                i,
                pair[0],
                i + 1,
                pair[1]
            )));
        }
    }
    let count = knots.len() - order - 1;
    let hi_span = knots.len() - 2 - order;
    let u = u.clamp(knots[order], knots[knots.len() - 1 - order]);
    let mut span = order;
    while span < hi_span && u >= knots[span + 1] {
        span += 1;
    }
    let mut out = vec![0.0; count];
    let mut left = vec![0.0; order + 1];
    let mut right = vec![0.0; order + 1];
    cox_de_boor(knots, order, span, u, &mut out[span - order..=span], &mut left, &mut right);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Specifications and parameters
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Mlp,
    Kan,
}

fn default_grid_size() -> usize {
    5
}

fn default_spline_order() -> usize {
    3
}

fn default_grid_range() -> (f64, f64) {
    (-1.0, 1.0)
}

/// Architecture of a feature extractor. `layer_widths` includes the input
/// dimension and the final latent width, so `[d, 1000, 500, 50, 2]` is a
/// four-layer network from `d` inputs to a 2-dimensional latent space. The
/// grid fields only apply to KAN networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub kind: FeatureKind,
    pub layer_widths: Vec<usize>,
    #[serde(default = "default_grid_size")]
    pub grid_size: usize,
    #[serde(default = "default_spline_order")]
    pub spline_order: usize,
    #[serde(default = "default_grid_range")]
    pub grid_range: (f64, f64),
}

impl FeatureSpec {
    /// MLP spec with the given widths.
    pub fn mlp(layer_widths: Vec<usize>) -> Self {
        Self {
            kind: FeatureKind::Mlp,
            layer_widths,
            grid_size: default_grid_size(),
            spline_order: default_spline_order(),
            grid_range: default_grid_range(),
        }
    }

    /// KAN spec with the given widths and the default grid (5 cells, cubic
    /// splines, range [-1, 1]); per-edge parameter count is then
    /// `2 + grid_size + spline_order = 10`.
    pub fn kan(layer_widths: Vec<usize>) -> Self {
        Self { kind: FeatureKind::Kan, ..Self::mlp(layer_widths) }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths.first().copied().unwrap_or(0)
    }

    pub fn output_dim(&self) -> usize {
        self.layer_widths.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "layer_widths needs input and output entries, got {:?}",
                self.layer_widths
            )));
        }
        if let Some(pos) = self.layer_widths.iter().position(|&w| w == 0) {
            return Err(Error::InvalidConfig(format!("layer width {pos} is zero")));
        }
        if self.kind == FeatureKind::Kan {
            // Surface the same bounds BsplineDesign::new would reject.
            BsplineDesign::new(
                self.grid_size,
                self.spline_order,
                self.grid_range.0,
                self.grid_range.1,
            )?;
            if self.spline_order == 0 {
                return Err(Error::InvalidConfig("spline_order must be at least 1".into()));
            }
        }
        Ok(())
    }
}

/// One dense layer: `weight` is `out x in`, `bias` is `1 x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpLayerParams {
    pub weight: DenseMatrix,
    pub bias: DenseMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<MlpLayerParams>,
}

/// One KAN layer. With `B = grid_size + spline_order` basis functions,
/// `base_weight` and `spline_scaler` are `out x in` and `spline_weight` is
/// `out x (in * B)` with the coefficients of edge `(o, i)` stored at columns
/// `i*B ..< (i+1)*B`.
#[derive(Clone, Debug, PartialEq)]
pub struct KanLayerParams {
    pub base_weight: DenseMatrix,
    pub spline_weight: DenseMatrix,
    pub spline_scaler: DenseMatrix,
    pub design: BsplineDesign,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KanParams {
    pub layers: Vec<KanLayerParams>,
}

/// Trainable state of a feature map. `Identity` is the plain-GP case: the
/// kernel sees raw inputs and there is nothing to train here.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureParams {
    Identity,
    Mlp(MlpParams),
    Kan(KanParams),
}

impl FeatureParams {
    /// Width of the latent space this map produces from `input_dim` columns.
    pub fn latent_dim(&self, input_dim: usize) -> usize {
        match self {
            FeatureParams::Identity => input_dim,
            FeatureParams::Mlp(p) => {
                p.layers.last().map_or(input_dim, |l| l.weight.rows())
            }
            FeatureParams::Kan(p) => {
                p.layers.last().map_or(input_dim, |l| l.base_weight.rows())
            }
        }
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        match self {
            FeatureParams::Identity => 0,
            FeatureParams::Mlp(p) => p
                .layers
                .iter()
                .map(|l| l.weight.data().len() + l.bias.data().len())
                .sum(),
            FeatureParams::Kan(p) => p
                .layers
                .iter()
                .map(|l| {
                    l.base_weight.data().len()
                        + l.spline_weight.data().len()
                        + l.spline_scaler.data().len()
                })
                .sum(),
        }
    }

    /// Append all parameters in declaration order (per layer: MLP weight
    /// then bias; KAN base_weight, spline_weight, spline_scaler), each
    /// row-major. This is the order [`trace_feature`] registers leaves in
    /// and [`Self::write_flat`] reads back.
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        match self {
            FeatureParams::Identity => {}
            FeatureParams::Mlp(p) => {
                for l in &p.layers {
                    out.extend_from_slice(l.weight.data());
                    out.extend_from_slice(l.bias.data());
                }
            }
            FeatureParams::Kan(p) => {
                for l in &p.layers {
                    out.extend_from_slice(l.base_weight.data());
                    out.extend_from_slice(l.spline_weight.data());
                    out.extend_from_slice(l.spline_scaler.data());
                }
            }
        }
    }

    /// Overwrite all parameters from a flat slice laid out as in
    /// [`Self::flatten_into`].
    pub fn write_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.param_count();
        if flat.len() != expected {
            return Err(Error::DimensionMismatch { op: "write_flat", expected, got: flat.len() });
        }
        let mut pos = 0;
        let mut take = |m: &mut DenseMatrix| {
            let len = m.data().len();
            m.data_mut().copy_from_slice(&flat[pos..pos + len]);
            pos += len;
        };
        match self {
            FeatureParams::Identity => {}
            FeatureParams::Mlp(p) => {
                for l in &mut p.layers {
                    take(&mut l.weight);
                    take(&mut l.bias);
                }
            }
            FeatureParams::Kan(p) => {
                for l in &mut p.layers {
                    take(&mut l.base_weight);
                    take(&mut l.spline_weight);
                    take(&mut l.spline_scaler);
                }
            }
        }
        Ok(())
    }
}

/// Parameter count implied by a spec, before adding kernel hyperparameters:
/// MLP layers hold `(in + 1) * out` values, KAN layers
/// `in * out * (2 + grid_size + spline_order)`.
pub fn feature_param_count(spec: &FeatureSpec) -> usize {
    let edges: usize = spec.layer_widths.windows(2).map(|w| w[0] * w[1]).sum();
    match spec.kind {
        FeatureKind::Mlp => spec.layer_widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum(),
        FeatureKind::Kan => edges * (2 + spec.grid_size + spec.spline_order),
    }
}

/// Initialize parameters for a spec, deterministically in `seed`.
///
/// MLP weights and the KAN base weight and spline scaler are Kaiming-uniform
/// `U(-sqrt(6/in), sqrt(6/in))`; MLP biases start at zero. Spline
/// coefficients start near zero, `U(-0.1, 0.1) / (grid_size + spline_order)`,
/// so a fresh KAN is dominated by its SiLU base path and the spline acts as
/// a learned correction.
///
/// Draw order is fixed (layers in order; within a layer, declaration order;
/// within a matrix, row-major), so equal seeds give bitwise-equal parameters.
pub fn init_feature(spec: &FeatureSpec, seed: u64) -> Result<FeatureParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |r: usize, c: usize, bound: f64| -> DenseMatrix {
        let data = (0..r * c).map(|_| rng.gen_range(-bound..bound)).collect();
        DenseMatrix::new(r, c, data).expect("sampled shape")
    };
    match spec.kind {
        FeatureKind::Mlp => {
            let layers = spec
                .layer_widths
                .windows(2)
                .map(|w| {
                    let (fan_in, fan_out) = (w[0], w[1]);
                    MlpLayerParams {
                        weight: uniform(fan_out, fan_in, (6.0 / fan_in as f64).sqrt()),
                        bias: DenseMatrix::zeros(1, fan_out),
                    }
                })
                .collect();
            Ok(FeatureParams::Mlp(MlpParams { layers }))
        }
        FeatureKind::Kan => {
            let design = BsplineDesign::new(
                spec.grid_size,
                spec.spline_order,
                spec.grid_range.0,
                spec.grid_range.1,
            )?;
            let nb = design.basis_count();
            let coeff_scale = 1.0 / nb as f64;
            let layers = spec
                .layer_widths
                .windows(2)
                .map(|w| {
                    let (fan_in, fan_out) = (w[0], w[1]);
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let base_weight = uniform(fan_out, fan_in, bound);
                    let mut spline_weight = uniform(fan_out, fan_in * nb, 0.1);
                    for v in spline_weight.data_mut() {
                        *v *= coeff_scale;
                    }
                    let spline_scaler = uniform(fan_out, fan_in, bound);
                    KanLayerParams { base_weight, spline_weight, spline_scaler, design: design.clone() }
                })
                .collect();
            Ok(FeatureParams::Kan(KanParams { layers }))
        }
    }
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// d silu/dx = sigmoid(x) * (1 + x * (1 - sigmoid(x))).
pub(crate) fn silu_deriv(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn map(a: &DenseMatrix, f: impl Fn(f64) -> f64) -> DenseMatrix {
    let data = a.data().iter().map(|&v| f(v)).collect();
    DenseMatrix::new(a.rows(), a.cols(), data).expect("same shape")
}

/// `m + row` with `row` broadcast across rows of `m`.
fn add_row(m: &DenseMatrix, row: &DenseMatrix) -> Result<DenseMatrix> {
    if row.rows() != 1 || row.cols() != m.cols() {
        return Err(Error::ShapeMismatch {
            op: "add_row",
            left_rows: m.rows(),
            left_cols: m.cols(),
            right_rows: row.rows(),
            right_cols: row.cols(),
        });
    }
    let mut out = DenseMatrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            out.set(i, j, m.get(i, j) + row.get(0, j));
        }
    }
    Ok(out)
}

/// Affine layers with SiLU on every hidden layer; the final layer is purely
/// affine so the latent space is unconstrained.
pub fn mlp_forward(params: &MlpParams, x: &DenseMatrix) -> Result<DenseMatrix> {
    let mut h = x.clone();
    let last = params.layers.len().saturating_sub(1);
    for (li, layer) in params.layers.iter().enumerate() {
        let a = add_row(&h.matmul(&layer.weight.transpose())?, &layer.bias)?;
        h = if li < last { map(&a, silu) } else { a };
    }
    Ok(h)
}

/// One KAN layer: SiLU base path plus scaled spline path (see module docs).
pub fn kan_layer_forward(params: &KanLayerParams, x: &DenseMatrix) -> Result<DenseMatrix> {
    let base = map(x, silu).matmul(&params.base_weight.transpose())?;
    let spline = bspline_combine_forward(
        x,
        &params.spline_weight,
        &params.spline_scaler,
        &params.design,
    )?;
    base.add(&spline)
}

pub fn kan_forward(params: &KanParams, x: &DenseMatrix) -> Result<DenseMatrix> {
    let mut h = x.clone();
    for layer in &params.layers {
        h = kan_layer_forward(layer, &h)?;
    }
    Ok(h)
}

/// Run whichever feature map `params` holds; `Identity` passes `x` through.
pub fn feature_forward(params: &FeatureParams, x: &DenseMatrix) -> Result<DenseMatrix> {
    match params {
        FeatureParams::Identity => Ok(x.clone()),
        FeatureParams::Mlp(p) => mlp_forward(p, x),
        FeatureParams::Kan(p) => kan_forward(p, x),
    }
}

// ---------------------------------------------------------------------------
// Traced forward (autodiff)
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct TracedMlpLayer {
    pub weight: TracedValue,
    pub bias: TracedValue,
}

#[derive(Clone, Debug)]
pub struct TracedKanLayer {
    pub base_weight: TracedValue,
    pub spline_weight: TracedValue,
    pub spline_scaler: TracedValue,
    pub design: BsplineDesign,
}

/// Tape handles for a feature map's parameters.
#[derive(Clone, Debug)]
pub enum TracedFeature {
    Identity,
    Mlp(Vec<TracedMlpLayer>),
    Kan(Vec<TracedKanLayer>),
}

impl TracedFeature {
    /// Leaves in the same order as [`FeatureParams::flatten_into`].
    pub fn leaves(&self) -> Vec<TracedValue> {
        match self {
            TracedFeature::Identity => Vec::new(),
            TracedFeature::Mlp(layers) => {
                layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
            }
            TracedFeature::Kan(layers) => layers
                .iter()
                .flat_map(|l| [l.base_weight, l.spline_weight, l.spline_scaler])
                .collect(),
        }
    }
}

/// Register every parameter matrix as a leaf on `tape`, in declaration
/// order, so gradients can be read back per matrix after a backward pass.
pub fn trace_feature(tape: &mut Tape, params: &FeatureParams) -> TracedFeature {
    match params {
        FeatureParams::Identity => TracedFeature::Identity,
        FeatureParams::Mlp(p) => TracedFeature::Mlp(
            p.layers
                .iter()
                .map(|l| TracedMlpLayer {
                    weight: tape.leaf(l.weight.clone()),
                    bias: tape.leaf(l.bias.clone()),
                })
                .collect(),
        ),
        FeatureParams::Kan(p) => TracedFeature::Kan(
            p.layers
                .iter()
                .map(|l| TracedKanLayer {
                    base_weight: tape.leaf(l.base_weight.clone()),
                    spline_weight: tape.leaf(l.spline_weight.clone()),
                    spline_scaler: tape.leaf(l.spline_scaler.clone()),
                    design: l.design.clone(),
                })
                .collect(),
        ),
    }
}

/// Forward pass recorded on the tape. Runs the same arithmetic as
/// [`feature_forward`], so values agree bitwise with the untraced path.
pub fn feature_forward_traced(
    tape: &mut Tape,
    feature: &TracedFeature,
    x: TracedValue,
) -> Result<TracedValue> {
    match feature {
        TracedFeature::Identity => Ok(x),
        TracedFeature::Mlp(layers) => {
            let mut h = x;
            let last = layers.len().saturating_sub(1);
            for (li, layer) in layers.iter().enumerate() {
                let wt = tape.transpose(layer.weight);
                let mm = tape.matmul(h, wt)?;
                let a = tape.add(mm, layer.bias)?;
                h = if li < last { tape.silu(a) } else { a };
            }
            Ok(h)
        }
        TracedFeature::Kan(layers) => {
            let mut h = x;
            for layer in layers {
                let s = tape.silu(h);
                let bt = tape.transpose(layer.base_weight);
                let base = tape.matmul(s, bt)?;
                let spline = tape.bspline_combine(
                    h,
                    layer.spline_weight,
                    layer.spline_scaler,
                    &layer.design,
                )?;
                h = tape.add(base, spline)?;
            }
            Ok(h)
        }
    }
}

// ---------------------------------------------------------------------------
// Fused spline-path math shared with the autodiff primitive
// ---------------------------------------------------------------------------

pub(crate) fn bspline_shapes(
    x: &DenseMatrix,
    w: &DenseMatrix,
    s: &DenseMatrix,
    design: &BsplineDesign,
) -> Result<(usize, usize, usize, usize)> {
    let (n, d_in) = x.shape();
    let nb = design.basis_count();
    let (out_dim, wib) = w.shape();
    if wib != d_in * nb || s.shape() != (out_dim, d_in) {
        return Err(Error::ShapeMismatch {
            op: "bspline_combine",
            left_rows: out_dim,
            left_cols: wib,
            right_rows: s.rows(),
            right_cols: s.cols(),
        });
    }
    Ok((n, d_in, nb, out_dim))
}

/// Expanded basis matrix `E` (`n x in*B`) for the clamped inputs.
pub(crate) fn basis_expansion(x: &DenseMatrix, design: &BsplineDesign) -> DenseMatrix {
    let (n, d_in) = x.shape();
    let nb = design.basis_count();
    let mut e = DenseMatrix::zeros(n, d_in * nb);
    let xd = x.data();
    par::for_each_row(e.data_mut(), d_in * nb, |r, row| {
        for i in 0..d_in {
            design.basis_into(xd[r * d_in + i], &mut row[i * nb..(i + 1) * nb]);
        }
    });
    e
}

/// Per-edge scaled coefficients `W~[o][i*B+b] = s[o][i] * w[o][i*B+b]`.
pub(crate) fn scaled_weights(w: &DenseMatrix, s: &DenseMatrix, nb: usize) -> DenseMatrix {
    let (out_dim, wib) = w.shape();
    let d_in = wib / nb;
    let mut ws = DenseMatrix::zeros(out_dim, wib);
    for o in 0..out_dim {
        for i in 0..d_in {
            let sv = s.get(o, i);
            for b in 0..nb {
                ws.set(o, i * nb + b, sv * w.get(o, i * nb + b));
            }
        }
    }
    ws
}

/// Spline path of a KAN layer: `E W~^T` where `E` is the basis expansion.
pub(crate) fn bspline_combine_forward(
    x: &DenseMatrix,
    w: &DenseMatrix,
    s: &DenseMatrix,
    design: &BsplineDesign,
) -> Result<DenseMatrix> {
    let (_n, _d_in, nb, _out_dim) = bspline_shapes(x, w, s, design)?;
    let e = basis_expansion(x, design);
    let ws = scaled_weights(w, s, nb);
    e.matmul(&ws.transpose())
}

/// Pullback of [`bspline_combine_forward`]: given the output adjoint `g`
/// (`n x out`), returns `(dx, dw, ds)`. Inputs that were clamped get a zero
/// input-derivative, matching the clamp's flat extension.
pub(crate) fn bspline_combine_vjp(
    g: &DenseMatrix,
    x: &DenseMatrix,
    w: &DenseMatrix,
    s: &DenseMatrix,
    design: &BsplineDesign,
) -> Result<(DenseMatrix, DenseMatrix, DenseMatrix)> {
    let (n, d_in, nb, out_dim) = bspline_shapes(x, w, s, design)?;
    if g.shape() != (n, out_dim) {
        return Err(Error::ShapeMismatch {
            op: "bspline_combine-vjp",
            left_rows: g.rows(),
            left_cols: g.cols(),
            right_rows: n,
            right_cols: out_dim,
        });
    }
    let e = basis_expansion(x, design);
    let ws = scaled_weights(w, s, nb);
    // d(scaled weights) = G^T E, then split into weight and scaler parts.
    let gws = g.transpose().matmul(&e)?;
    let mut gw = DenseMatrix::zeros(out_dim, d_in * nb);
    let mut gs = DenseMatrix::zeros(out_dim, d_in);
    for o in 0..out_dim {
        for i in 0..d_in {
            let mut s_acc = 0.0;
            let sv = s.get(o, i);
            for b in 0..nb {
                let gwsv = gws.get(o, i * nb + b);
                gw.set(o, i * nb + b, sv * gwsv);
                s_acc += w.get(o, i * nb + b) * gwsv;
            }
            gs.set(o, i, s_acc);
        }
    }
    // dX via the basis derivative: P = G W~ (n x in*B), then contract each
    // input's B block against N'_b. Clamped inputs get zero derivative.
    let p = g.matmul(&ws)?;
    let mut gx = DenseMatrix::zeros(n, d_in);
    let xd = x.data();
    let mut deriv = vec![0.0; nb];
    for r in 0..n {
        for i in 0..d_in {
            let u = xd[r * d_in + i];
            if !design.in_range(u) {
                continue;
            }
            design.basis_deriv_into(u, &mut deriv);
            let mut acc = 0.0;
            for b in 0..nb {
                acc += deriv[b] * p.get(r, i * nb + b);
            }
            gx.set(r, i, acc);
        }
    }
    Ok((gx, gw, gs))
}

// ---------------------------------------------------------------------------
// Parameter serialization
// ---------------------------------------------------------------------------

/// A JSON number carrying 17 significant decimal digits, enough to
/// reconstruct the exact f64 bit pattern on read-back.
pub(crate) fn float_value(v: f64) -> serde_json::Value {
    assert!(v.is_finite(), "refusing to serialize a non-finite value");
    serde_json::from_str(&format!("{v:.16e}")).expect("decimal float literal")
}

pub(crate) fn json_floats(vals: &[f64]) -> serde_json::Value {
    serde_json::Value::Array(vals.iter().map(|&v| float_value(v)).collect())
}

pub(crate) fn floats_from_json(v: &serde_json::Value) -> Result<Vec<f64>> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::InvalidConfig("expected a JSON array of numbers".into()))?;
    arr.iter()
        .map(|x| {
            x.as_f64()
                .ok_or_else(|| Error::InvalidConfig(format!("expected a number, got {x}")))
        })
        .collect()
}

/// Flat JSON view of the parameters: one object per layer, matrices as
/// row-major arrays in declaration order, floats with 17 significant digits.
pub fn feature_params_to_json(params: &FeatureParams) -> serde_json::Value {
    use serde_json::json;
    match params {
        FeatureParams::Identity => json!({ "kind": "identity" }),
        FeatureParams::Mlp(p) => {
            let layers: Vec<_> = p
                .layers
                .iter()
                .map(|l| {
                    json!({
                        "weight": json_floats(l.weight.data()),
                        "bias": json_floats(l.bias.data()),
                    })
                })
                .collect();
            json!({ "kind": "mlp", "layers": layers })
        }
        FeatureParams::Kan(p) => {
            let layers: Vec<_> = p
                .layers
                .iter()
                .map(|l| {
                    json!({
                        "base_weight": json_floats(l.base_weight.data()),
                        "spline_weight": json_floats(l.spline_weight.data()),
                        "spline_scaler": json_floats(l.spline_scaler.data()),
                    })
                })
                .collect();
            json!({ "kind": "kan", "layers": layers })
        }
    }
}

/// Read parameters serialized by [`feature_params_to_json`] into an
/// already-shaped `params` (as produced by [`init_feature`] for the same
/// spec). Shapes are taken from `params`; the JSON must match them.
pub fn feature_params_from_json(v: &serde_json::Value, params: &mut FeatureParams) -> Result<()> {
    let kind = v
        .get("kind")
        .and_then(|k| k.as_str())
        .ok_or_else(|| Error::InvalidConfig("feature parameters need a \"kind\" field".into()))?;
    let fill = |m: &mut DenseMatrix, val: Option<&serde_json::Value>, name: &str| -> Result<()> {
        let val = val
            .ok_or_else(|| Error::InvalidConfig(format!("missing parameter array {name:?}")))?;
        let data = floats_from_json(val)?;
        if data.len() != m.data().len() {
            return Err(Error::DimensionMismatch {
                op: "feature_params_from_json",
                expected: m.data().len(),
                got: data.len(),
            });
        }
        m.data_mut().copy_from_slice(&data);
        Ok(())
    };
    let layers = |v: &serde_json::Value, expected: usize| -> Result<Vec<serde_json::Value>> {
        let arr = v
            .get("layers")
            .and_then(|l| l.as_array())
            .ok_or_else(|| Error::InvalidConfig("feature parameters need \"layers\"".into()))?;
        if arr.len() != expected {
            return Err(Error::DimensionMismatch {
                op: "feature_params_from_json",
                expected,
                got: arr.len(),
            });
        }
        Ok(arr.clone())
    };
    match (kind, params) {
        ("identity", FeatureParams::Identity) => Ok(()),
        ("mlp", FeatureParams::Mlp(p)) => {
            let lvs = layers(v, p.layers.len())?;
            for (l, lv) in p.layers.iter_mut().zip(lvs) {
                fill(&mut l.weight, lv.get("weight"), "weight")?;
                fill(&mut l.bias, lv.get("bias"), "bias")?;
            }
            Ok(())
        }
        ("kan", FeatureParams::Kan(p)) => {
            let lvs = layers(v, p.layers.len())?;
            for (l, lv) in p.layers.iter_mut().zip(lvs) {
                fill(&mut l.base_weight, lv.get("base_weight"), "base_weight")?;
                fill(&mut l.spline_weight, lv.get("spline_weight"), "spline_weight")?;
                fill(&mut l.spline_scaler, lv.get("spline_scaler"), "spline_scaler")?;
            }
            Ok(())
        }
        (other, _) => Err(Error::InvalidConfig(format!(
            "feature kind {other:?} does not match the checkpoint shapes"
        ))),
    }
}
