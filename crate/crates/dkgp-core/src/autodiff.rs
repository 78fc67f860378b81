//! Minimal reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records a directed acyclic graph of matrix operations. Every
//! value is a [`DenseMatrix`]; vectors are `n x 1`, scalars `1 x 1`.
//! [`Tape::backward`] seeds a scalar output with adjoint 1 and walks the node
//! list in reverse recording order, so adjoint accumulation for fan-out is
//! deterministic and two backward passes produce bitwise-identical gradients.
//!
//! The primitive set is deliberately small: elementwise arithmetic with
//! scalar/row/column broadcasting, matrix product, transpose, exp, log,
//! square, full sum, SiLU, pairwise squared distances, the fused B-spline
//! layer combination, and a fused Cholesky log-determinant/quadratic-form
//! whose pullback is the implicit derivative of the GP marginal likelihood
//! (see [`crate::gp::dnll_dk`]).

use crate::error::{Error, Result};
use crate::features::{
    bspline_combine_forward, bspline_combine_vjp, silu, silu_deriv, BsplineDesign,
};
use crate::linalg::{
    cholesky_jittered, inverse_from_cholesky, solve_lower, solve_lower_transpose, sum, DenseMatrix,
};
use crate::par;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TracedValue {
    id: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Matmul(usize, usize),
    Transpose(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Sum(usize),
    Silu(usize),
    PairwiseSqdist(usize),
    BsplineCombine { x: usize, weights: usize, scaler: usize, design: BsplineDesign },
    CholeskyLogdetQuadform { k: usize, y: usize },
}

struct Node {
    op: Op,
    value: DenseMatrix,
    /// Cholesky factor and solve cached by the fused GP primitive for its pullback.
    chol: Option<(DenseMatrix, Vec<f64>)>,
}

/// Reverse-mode tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], keyed by traced value.
pub struct Gradients {
    adjoints: Vec<Option<DenseMatrix>>,
}

impl Gradients {
    /// Gradient of the scalar output with respect to `v`, if `v` influenced it.
    pub fn wrt(&self, v: TracedValue) -> Option<&DenseMatrix> {
        self.adjoints.get(v.id).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a recorded node.
    pub fn value(&self, v: TracedValue) -> &DenseMatrix {
        &self.nodes[v.id].value
    }

    fn push(&mut self, op: Op, value: DenseMatrix) -> TracedValue {
        self.nodes.push(Node { op, value, chol: None });
        TracedValue { id: self.nodes.len() - 1 }
    }

    /// Register a trainable input.
    pub fn leaf(&mut self, value: DenseMatrix) -> TracedValue {
        self.push(Op::Leaf, value)
    }

    /// Register a non-trainable input (no adjoint is accumulated for it).
    pub fn constant(&mut self, value: DenseMatrix) -> TracedValue {
        self.push(Op::Constant, value)
    }

    pub fn add(&mut self, a: TracedValue, b: TracedValue) -> Result<TracedValue> {
        let v = broadcast_zip(self.value(a), self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a.id, b.id), v))
    }

    pub fn sub(&mut self, a: TracedValue, b: TracedValue) -> Result<TracedValue> {
        let v = broadcast_zip(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub(a.id, b.id), v))
    }

    /// Elementwise (broadcasting) product.
    pub fn mul(&mut self, a: TracedValue, b: TracedValue) -> Result<TracedValue> {
        let v = broadcast_zip(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a.id, b.id), v))
    }

    pub fn matmul(&mut self, a: TracedValue, b: TracedValue) -> Result<TracedValue> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::Matmul(a.id, b.id), v))
    }

    pub fn transpose(&mut self, a: TracedValue) -> TracedValue {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a.id), v)
    }

    pub fn exp(&mut self, a: TracedValue) -> TracedValue {
        let v = map(self.value(a), f64::exp);
        self.push(Op::Exp(a.id), v)
    }

    /// Elementwise natural log. Domain errors surface as non-finite values,
    /// which the training loop treats as fatal.
    pub fn log(&mut self, a: TracedValue) -> TracedValue {
        let v = map(self.value(a), f64::ln);
        self.push(Op::Log(a.id), v)
    }

    pub fn square(&mut self, a: TracedValue) -> TracedValue {
        let v = map(self.value(a), |x| x * x);
        self.push(Op::Square(a.id), v)
    }

    /// Sum of all entries, as a `1 x 1` matrix.
    pub fn sum(&mut self, a: TracedValue) -> TracedValue {
        let s = sum(self.value(a).data());
        self.push(Op::Sum(a.id), DenseMatrix::scalar(s))
    }

    /// SiLU activation `x * sigmoid(x)`.
    pub fn silu(&mut self, a: TracedValue) -> TracedValue {
        let v = map(self.value(a), silu);
        self.push(Op::Silu(a.id), v)
    }

    /// All-pairs squared Euclidean distances between the rows of an `n x d`
    /// matrix: output is `n x n` with an exactly zero diagonal.
    pub fn pairwise_sqdist(&mut self, a: TracedValue) -> TracedValue {
        let v = pairwise_sqdist(self.value(a));
        self.push(Op::PairwiseSqdist(a.id), v)
    }

    /// Fused spline path of a KAN layer: given inputs `x` (`n x in`), spline
    /// coefficients `weights` (`out x in*B`) and per-edge scalers `scaler`
    /// (`out x in`), computes `out[r][o] = sum_i s[o][i] sum_b w[o][i*B+b]
    /// N_b(clamp(x[r][i]))` where `N_b` are the design's B-spline bases.
    pub fn bspline_combine(
        &mut self,
        x: TracedValue,
        weights: TracedValue,
        scaler: TracedValue,
        design: &BsplineDesign,
    ) -> Result<TracedValue> {
        let value = bspline_combine_forward(self.value(x), self.value(weights), self.value(scaler), design)?;
        Ok(self.push(
            Op::BsplineCombine { x: x.id, weights: weights.id, scaler: scaler.id, design: design.clone() },
            value,
        ))
    }

    /// Fused `y^T K^{-1} y + log|K|` for a symmetric positive definite `K`
    /// (`n x n`) and column vector `y` (`n x 1`), returning a scalar.
    ///
    /// The pullback is the implicit derivative of the log marginal
    /// likelihood: `d/dK = K^{-1} - K^{-1} y y^T K^{-1}` (see
    /// [`crate::gp::dnll_dk`]), so the factorization is never differentiated
    /// entry by entry.
    pub fn cholesky_logdet_quadform(&mut self, k: TracedValue, y: TracedValue) -> Result<TracedValue> {
        let kv = self.value(k);
        let yv = self.value(y);
        if yv.cols() != 1 || yv.rows() != kv.rows() {
            return Err(Error::ShapeMismatch {
                op: "cholesky_logdet_quadform",
                left_rows: kv.rows(),
                left_cols: kv.cols(),
                right_rows: yv.rows(),
                right_cols: yv.cols(),
            });
        }
        let (l, _jitter) = cholesky_jittered(kv)?;
        let half = solve_lower(&l, yv.data())?;
        let alpha = solve_lower_transpose(&l, &half)?;
        let quad = crate::linalg::dot(yv.data(), &alpha);
        let logdet = 2.0 * sum(&l.diag().iter().map(|d| d.ln()).collect::<Vec<_>>());
        let tv = self.push(
            Op::CholeskyLogdetQuadform { k: k.id, y: y.id },
            DenseMatrix::scalar(quad + logdet),
        );
        self.nodes[tv.id].chol = Some((l, alpha));
        Ok(tv)
    }

    /// Reverse pass from a scalar output. Returns adjoints for every node
    /// that influences the output (constants included; they are simply
    /// never read back as parameters).
    pub fn backward(&self, output: TracedValue) -> Result<Gradients> {
        let out_val = self.value(output);
        if out_val.shape() != (1, 1) {
            return Err(Error::NotScalar { rows: out_val.rows(), cols: out_val.cols() });
        }
        let mut adj: Vec<Option<DenseMatrix>> = vec![None; self.nodes.len()];
        adj[output.id] = Some(DenseMatrix::scalar(1.0));
        for id in (0..=output.id).rev() {
            let g = match adj[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Leaf | Op::Constant => {
                    adj[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut adj, *a, reduce_to(&g, self.nodes[*a].value.shape()));
                    self.accumulate(&mut adj, *b, reduce_to(&g, self.nodes[*b].value.shape()));
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut adj, *a, reduce_to(&g, self.nodes[*a].value.shape()));
                    self.accumulate(&mut adj, *b, reduce_to(&g.scale(-1.0), self.nodes[*b].value.shape()));
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    let ga = broadcast_zip(&g, bv, "mul-vjp", |x, y| x * y)?;
                    let gb = broadcast_zip(&g, av, "mul-vjp", |x, y| x * y)?;
                    self.accumulate(&mut adj, *a, reduce_to(&ga, av.shape()));
                    self.accumulate(&mut adj, *b, reduce_to(&gb, bv.shape()));
                }
                Op::Matmul(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    self.accumulate(&mut adj, *a, g.matmul(&bv.transpose())?);
                    self.accumulate(&mut adj, *b, av.transpose().matmul(&g)?);
                }
                Op::Transpose(a) => {
                    self.accumulate(&mut adj, *a, g.transpose());
                }
                Op::Exp(a) => {
                    // value already holds exp(x)
                    let v = &self.nodes[id].value;
                    self.accumulate(&mut adj, *a, zip(&g, v, |gi, vi| gi * vi));
                }
                Op::Log(a) => {
                    let av = &self.nodes[*a].value;
                    self.accumulate(&mut adj, *a, zip(&g, av, |gi, xi| gi / xi));
                }
                Op::Square(a) => {
                    let av = &self.nodes[*a].value;
                    self.accumulate(&mut adj, *a, zip(&g, av, |gi, xi| 2.0 * xi * gi));
                }
                Op::Sum(a) => {
                    let (r, c) = self.nodes[*a].value.shape();
                    let gv = g.get(0, 0);
                    self.accumulate(&mut adj, *a, DenseMatrix::new(r, c, vec![gv; r * c])?);
                }
                Op::Silu(a) => {
                    let av = &self.nodes[*a].value;
                    self.accumulate(&mut adj, *a, zip(&g, av, |gi, xi| gi * silu_deriv(xi)));
                }
                Op::PairwiseSqdist(a) => {
                    let z = &self.nodes[*a].value;
                    self.accumulate(&mut adj, *a, pairwise_sqdist_vjp(&g, z)?);
                }
                Op::BsplineCombine { x, weights, scaler, design } => {
                    let (gx, gw, gs) = bspline_combine_vjp(
                        &g,
                        &self.nodes[*x].value,
                        &self.nodes[*weights].value,
                        &self.nodes[*scaler].value,
                        design,
                    )?;
                    self.accumulate(&mut adj, *x, gx);
                    self.accumulate(&mut adj, *weights, gw);
                    self.accumulate(&mut adj, *scaler, gs);
                }
                Op::CholeskyLogdetQuadform { k, y } => {
                    let (l, alpha) = self.nodes[id].chol.as_ref().expect("cached factorization");
                    let kinv = inverse_from_cholesky(l)?;
                    let a = g.get(0, 0);
                    // d(quad + logdet)/dK = K^{-1} - alpha alpha^T.
                    let gk = crate::gp::dq_dk_from_parts(&kinv, alpha).scale(a);
                    let gy = DenseMatrix::column(&alpha.iter().map(|v| 2.0 * a * v).collect::<Vec<_>>());
                    self.accumulate(&mut adj, *k, gk);
                    self.accumulate(&mut adj, *y, gy);
                }
            }
        }
        Ok(Gradients { adjoints: adj })
    }

    fn accumulate(&self, adj: &mut [Option<DenseMatrix>], id: usize, grad: DenseMatrix) {
        match &mut adj[id] {
            Some(existing) => {
                debug_assert_eq!(existing.shape(), grad.shape());
                for (e, g) in existing.data_mut().iter_mut().zip(grad.data()) {
                    *e += g;
                }
            }
            slot @ None => *slot = Some(grad),
        }
    }
}

fn map(a: &DenseMatrix, f: impl Fn(f64) -> f64) -> DenseMatrix {
    let data = a.data().iter().map(|&v| f(v)).collect();
    DenseMatrix::new(a.rows(), a.cols(), data).expect("same shape")
}

fn zip(a: &DenseMatrix, b: &DenseMatrix, f: impl Fn(f64, f64) -> f64) -> DenseMatrix {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    DenseMatrix::new(a.rows(), a.cols(), data).expect("same shape")
}

/// Elementwise binary op with broadcasting: shapes must match, or one operand
/// may be `1x1`, a `1xc` row, or an `rx1` column against an `rxc` matrix.
fn broadcast_zip(
    a: &DenseMatrix,
    b: &DenseMatrix,
    op: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<DenseMatrix> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let rows = ar.max(br);
    let cols = ac.max(bc);
    let ok = |r: usize, c: usize| (r == rows || r == 1) && (c == cols || c == 1);
    if !ok(ar, ac) || !ok(br, bc) {
        return Err(Error::ShapeMismatch {
            op,
            left_rows: ar,
            left_cols: ac,
            right_rows: br,
            right_cols: bc,
        });
    }
    let mut out = DenseMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let av = a.get(if ar == 1 { 0 } else { i }, if ac == 1 { 0 } else { j });
            let bv = b.get(if br == 1 { 0 } else { i }, if bc == 1 { 0 } else { j });
            out.set(i, j, f(av, bv));
        }
    }
    Ok(out)
}

/// Sum `g` over any axes that were broadcast to reach `g`'s shape, returning
/// a matrix of the original operand shape.
fn reduce_to(g: &DenseMatrix, shape: (usize, usize)) -> DenseMatrix {
    let (r, c) = shape;
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = DenseMatrix::zeros(r, c);
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let ti = if r == 1 { 0 } else { i };
            let tj = if c == 1 { 0 } else { j };
            out.set(ti, tj, out.get(ti, tj) + g.get(i, j));
        }
    }
    out
}

/// All-pairs squared distances between rows; the diagonal is exactly zero and
/// `S[i][j]` and `S[j][i]` run the same arithmetic.
fn pairwise_sqdist(z: &DenseMatrix) -> DenseMatrix {
    let (n, d) = z.shape();
    let mut out = DenseMatrix::zeros(n, n);
    let zd = z.data();
    par::for_each_row(out.data_mut(), n.max(1), |i, row| {
        let zi = &zd[i * d..(i + 1) * d];
        for (j, slot) in row.iter_mut().enumerate() {
            if j == i {
                *slot = 0.0;
                continue;
            }
            let zj = &zd[j * d..(j + 1) * d];
            let mut s = 0.0;
            for (a, b) in zi.iter().zip(zj) {
                let diff = a - b;
                s += diff * diff;
            }
            *slot = s;
        }
    });
    out
}

/// VJP of [`pairwise_sqdist`]: with `B = G + G^T`,
/// `dZ = 2 (diag(B 1) Z - B Z)`.
fn pairwise_sqdist_vjp(g: &DenseMatrix, z: &DenseMatrix) -> Result<DenseMatrix> {
    let (n, d) = z.shape();
    if g.shape() != (n, n) {
        return Err(Error::ShapeMismatch {
            op: "pairwise_sqdist-vjp",
            left_rows: g.rows(),
            left_cols: g.cols(),
            right_rows: n,
            right_cols: n,
        });
    }
    let mut out = DenseMatrix::zeros(n, d);
    for i in 0..n {
        for j in 0..n {
            let b = g.get(i, j) + g.get(j, i);
            if b == 0.0 {
                continue;
            }
            for k in 0..d {
                let diff = z.get(i, k) - z.get(j, k);
                out.set(i, k, out.get(i, k) + 2.0 * b * diff);
            }
        }
    }
    Ok(out)
}

/// Maximum relative disagreement between an analytic gradient and a central
/// finite difference, over all parameters:
/// `max_i |g_i - fd_i| / (|fd_i| + 1e-8)`.
///
/// `f` maps a parameter vector to `(loss, gradient)`; only the loss is used
/// for the finite differences, so `f`'s gradient path (typically a tape) is
/// checked end to end.
pub fn grad_check<F>(f: F, params: &[f64], step: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (_, analytic) = f(params)?;
    if analytic.len() != params.len() {
        return Err(Error::DimensionMismatch {
            op: "grad_check",
            expected: params.len(),
            got: analytic.len(),
        });
    }
    let mut worst = 0.0f64;
    let mut p = params.to_vec();
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let (up, _) = f(&p)?;
        p[i] = orig - step;
        let (down, _) = f(&p)?;
        p[i] = orig;
        let fd = (up - down) / (2.0 * step);
        let rel = (analytic[i] - fd).abs() / (fd.abs() + 1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> DenseMatrix {
        let data = (0..r * c).map(|_| rng.gen_range(lo..hi)).collect();
        DenseMatrix::new(r, c, data).unwrap()
    }

    /// Flatten-params-to-graph harness: builds a scalar loss from a single
    /// primitive so finite differences exercise exactly one VJP. A random
    /// probe matrix (shaped like the op's output) weights every output entry
    /// so positional mistakes in a VJP cannot cancel in the sum.
    fn check_unary(op: impl Fn(&mut Tape, TracedValue) -> TracedValue, seed: u64, lo: f64, hi: f64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = rand_mat(&mut rng, 3, 4, lo, hi);
        let out_shape = {
            let mut scratch = Tape::new();
            let x = scratch.leaf(x0.clone());
            let y = op(&mut scratch, x);
            scratch.value(y).shape()
        };
        let weights = rand_mat(&mut rng, out_shape.0, out_shape.1, -1.0, 1.0);
        let f = |p: &[f64]| -> crate::Result<(f64, Vec<f64>)> {
            let mut tape = Tape::new();
            let x = tape.leaf(DenseMatrix::new(3, 4, p.to_vec())?);
            let w = tape.constant(weights.clone());
            let y = op(&mut tape, x);
            let prod = tape.mul(y, w)?;
            let loss = tape.sum(prod);
            let grads = tape.backward(loss)?;
            Ok((
                tape.value(loss).get(0, 0),
                grads.wrt(x).unwrap().data().to_vec(),
            ))
        };
        grad_check(f, x0.data(), 1e-6).unwrap()
    }

    #[test]
    fn unary_vjps_match_finite_differences() {
        for seed in 0..20 {
            assert!(check_unary(|t, x| t.exp(x), seed, -1.0, 1.0) < 1e-6);
            assert!(check_unary(|t, x| t.log(x), 100 + seed, 0.5, 2.0) < 1e-6);
            assert!(check_unary(|t, x| t.square(x), 200 + seed, -1.0, 1.0) < 1e-6);
            assert!(check_unary(|t, x| t.silu(x), 300 + seed, -2.0, 2.0) < 1e-6);
            assert!(check_unary(|t, x| t.transpose(x), 400 + seed, -1.0, 1.0) < 1e-6);
        }
    }

    #[test]
    fn binary_broadcast_vjps_match_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shapes: [(usize, usize); 4] = [(3, 4), (1, 1), (1, 4), (3, 1)];
            let (br, bc) = shapes[(seed % 4) as usize];
            let a0 = rand_mat(&mut rng, 3, 4, -1.0, 1.0);
            let b0 = rand_mat(&mut rng, br, bc, -1.0, 1.0);
            let probe = rand_mat(&mut rng, 3, 4, -1.0, 1.0);
            for kind in 0..3 {
                let f = |p: &[f64]| -> crate::Result<(f64, Vec<f64>)> {
                    let na = 3 * 4;
                    let mut tape = Tape::new();
                    let a = tape.leaf(DenseMatrix::new(3, 4, p[..na].to_vec())?);
                    let b = tape.leaf(DenseMatrix::new(br, bc, p[na..].to_vec())?);
                    let w = tape.constant(probe.clone());
                    let y = match kind {
                        0 => tape.add(a, b)?,
                        1 => tape.sub(a, b)?,
                        _ => tape.mul(a, b)?,
                    };
                    let prod = tape.mul(y, w)?;
                    let loss = tape.sum(prod);
                    let grads = tape.backward(loss)?;
                    let mut g = grads.wrt(a).unwrap().data().to_vec();
                    g.extend_from_slice(grads.wrt(b).unwrap().data());
                    Ok((tape.value(loss).get(0, 0), g))
                };
                let mut params = a0.data().to_vec();
                params.extend_from_slice(b0.data());
                assert!(grad_check(f, &params, 1e-6).unwrap() < 1e-6, "kind {kind} seed {seed}");
            }
        }
    }

    #[test]
    fn matmul_vjp_matches_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
            let a0 = rand_mat(&mut rng, 3, 2, -1.0, 1.0);
            let b0 = rand_mat(&mut rng, 2, 4, -1.0, 1.0);
            let probe = rand_mat(&mut rng, 3, 4, -1.0, 1.0);
            let f = |p: &[f64]| -> crate::Result<(f64, Vec<f64>)> {
                let mut tape = Tape::new();
                let a = tape.leaf(DenseMatrix::new(3, 2, p[..6].to_vec())?);
                let b = tape.leaf(DenseMatrix::new(2, 4, p[6..].to_vec())?);
                let w = tape.constant(probe.clone());
                let y = tape.matmul(a, b)?;
                let prod = tape.mul(y, w)?;
                let loss = tape.sum(prod);
                let grads = tape.backward(loss)?;
                let mut g = grads.wrt(a).unwrap().data().to_vec();
                g.extend_from_slice(grads.wrt(b).unwrap().data());
                Ok((tape.value(loss).get(0, 0), g))
            };
            let mut params = a0.data().to_vec();
            params.extend_from_slice(b0.data());
            assert!(grad_check(f, &params, 1e-6).unwrap() < 1e-6);
        }
    }

    #[test]
    fn pairwise_sqdist_vjp_matches_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1300 + seed);
            let z0 = rand_mat(&mut rng, 5, 2, -1.0, 1.0);
            let probe = rand_mat(&mut rng, 5, 5, -1.0, 1.0);
            let f = |p: &[f64]| -> crate::Result<(f64, Vec<f64>)> {
                let mut tape = Tape::new();
                let z = tape.leaf(DenseMatrix::new(5, 2, p.to_vec())?);
                let w = tape.constant(probe.clone());
                let s = tape.pairwise_sqdist(z);
                let prod = tape.mul(s, w)?;
                let loss = tape.sum(prod);
                let grads = tape.backward(loss)?;
                Ok((tape.value(loss).get(0, 0), grads.wrt(z).unwrap().data().to_vec()))
            };
            assert!(grad_check(f, z0.data(), 1e-6).unwrap() < 1e-6);
        }
    }

    #[test]
    fn pairwise_sqdist_diagonal_exactly_zero_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z = rand_mat(&mut rng, 8, 3, -2.0, 2.0);
        let s = pairwise_sqdist(&z);
        for i in 0..8 {
            assert_eq!(s.get(i, i), 0.0);
            for j in 0..8 {
                assert_eq!(s.get(i, j), s.get(j, i));
            }
        }
    }

    #[test]
    fn fused_gp_primitive_matches_finite_differences() {
        // Parameterize K by its lower triangle so finite-difference
        // perturbations stay symmetric; both mirrored entries share one
        // parameter, so dLoss/dtheta_ij = G_ij + G_ji off the diagonal.
        for seed in 0..10u64 {
            let n = 4;
            let mut rng = ChaCha8Rng::seed_from_u64(1700 + seed);
            let m = rand_mat(&mut rng, n, n, -1.0, 1.0);
            let mut k0 = m.transpose().matmul(&m).unwrap();
            k0.add_diagonal(2.0);
            let y0 = rand_mat(&mut rng, n, 1, -1.0, 1.0);
            let tri: Vec<(usize, usize)> =
                (0..n).flat_map(|i| (0..=i).map(move |j| (i, j))).collect();
            let mut params: Vec<f64> = tri.iter().map(|&(i, j)| k0.get(i, j)).collect();
            params.extend_from_slice(y0.data());
            let tri_ref = &tri;
            let f = |p: &[f64]| -> crate::Result<(f64, Vec<f64>)> {
                let mut km = DenseMatrix::zeros(n, n);
                for (idx, &(i, j)) in tri_ref.iter().enumerate() {
                    km.set(i, j, p[idx]);
                    km.set(j, i, p[idx]);
                }
                let yv = DenseMatrix::new(n, 1, p[tri_ref.len()..].to_vec())?;
                let mut tape = Tape::new();
                let k = tape.leaf(km);
                let y = tape.leaf(yv);
                let q = tape.cholesky_logdet_quadform(k, y)?;
                let grads = tape.backward(q)?;
                let gk = grads.wrt(k).unwrap();
                let gy = grads.wrt(y).unwrap();
                let mut g: Vec<f64> = tri_ref
                    .iter()
                    .map(|&(i, j)| if i == j { gk.get(i, i) } else { gk.get(i, j) + gk.get(j, i) })
                    .collect();
                g.extend_from_slice(gy.data());
                Ok((tape.value(q).get(0, 0), g))
            };
            assert!(grad_check(f, &params, 1e-6).unwrap() < 1e-6, "seed {seed}");
        }
    }

    #[test]
    fn fused_gp_primitive_value_matches_direct_formula() {
        // K = 2 I_2, y = (1, 0): quad = 0.5, logdet = 2 ln 2.
        let mut tape = Tape::new();
        let k = tape.leaf(DenseMatrix::from_rows(vec![vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap());
        let y = tape.leaf(DenseMatrix::column(&[1.0, 0.0]));
        let q = tape.cholesky_logdet_quadform(k, y).unwrap();
        let expect = 0.5 + 2.0 * 2.0f64.ln();
        assert!((tape.value(q).get(0, 0) - expect).abs() < 1e-14);
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let a0 = rand_mat(&mut rng, 4, 4, -1.0, 1.0);
        let mut tape = Tape::new();
        let a = tape.leaf(a0);
        // Fan-out: `a` feeds three paths that later merge.
        let e = tape.exp(a);
        let sq = tape.square(a);
        let t = tape.transpose(a);
        let m = tape.matmul(e, t).unwrap();
        let s = tape.add(m, sq).unwrap();
        let loss = tape.sum(s);
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        assert_eq!(g1.wrt(a).unwrap().data(), g2.wrt(a).unwrap().data());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let a = tape.leaf(DenseMatrix::zeros(2, 2));
        let e = tape.exp(a);
        assert!(matches!(tape.backward(e), Err(Error::NotScalar { .. })));
    }

    #[test]
    fn constants_receive_no_parameter_updates_but_leaves_do() {
        let mut tape = Tape::new();
        let a = tape.leaf(DenseMatrix::scalar(3.0));
        let c = tape.constant(DenseMatrix::scalar(5.0));
        let p = tape.mul(a, c).unwrap();
        let loss = tape.sum(p);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(a).unwrap().get(0, 0), 5.0);
        // The constant still has an adjoint (it influenced the output), the
        // training loop simply never reads it.
        assert_eq!(grads.wrt(c).unwrap().get(0, 0), 3.0);
    }
}
