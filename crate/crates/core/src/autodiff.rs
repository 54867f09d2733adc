//! A small matrix-valued reverse-mode tape.
//!
//! Nodes hold dense column-major matrices. Column-wise hyperbolic maps
//! (`exp_0`, `log_0`, Möbius addition) are single nodes with hand-derived
//! vector-Jacobian products, including the radial re-projection that keeps
//! outputs inside the ball margin.
//!
//! The same kernels back [`Eval`], a tape-free evaluator, so a forward pass
//! through either backend produces bit-identical values.

use nalgebra::DMatrix;

use crate::geometry::{dot, norm, Curvature, ARTANH_CLAMP};

pub type Matrix = DMatrix<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a^T b`
    MatMulTn(Var, Var),
    Add(Var, Var),
    /// `a + bias 1^T`
    AddColBias(Var, Var),
    /// `bias 1^T`
    BroadcastCols(Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxCols(Var),
    Exp0Cols(Var, Curvature),
    Log0Cols(Var, Curvature),
    MobiusCols(Var, Var, Curvature),
    GatherCols(Var, Vec<usize>),
    Clamp(Var, f64),
    /// `sum((a - target)^2)` as a 1x1 matrix.
    SquaredError(Var, Matrix),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Backend-agnostic primitive set used by the model forward pass.
pub trait Backend {
    type T: Clone;

    fn value<'a>(&'a self, t: &'a Self::T) -> &'a Matrix;
    fn matmul(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn matmul_tn(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn add(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn add_col_bias(&mut self, a: &Self::T, bias: &Self::T) -> Self::T;
    fn broadcast_cols(&mut self, bias: &Self::T, ncols: usize) -> Self::T;
    fn scale(&mut self, a: &Self::T, k: f64) -> Self::T;
    fn relu(&mut self, a: &Self::T) -> Self::T;
    fn softmax_cols(&mut self, a: &Self::T) -> Self::T;
    fn exp0(&mut self, a: &Self::T, c: Curvature) -> Self::T;
    fn log0(&mut self, a: &Self::T, c: Curvature) -> Self::T;
    fn mobius(&mut self, a: &Self::T, b: &Self::T, c: Curvature) -> Self::T;
    fn gather_cols(&mut self, table: &Self::T, ids: &[usize]) -> Self::T;
}

pub mod kernels {
    use super::*;

    pub fn softmax_cols(a: &Matrix) -> Matrix {
        let mut out = a.clone();
        let rows = a.nrows();
        for col in out.as_mut_slice().chunks_exact_mut(rows) {
            let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in col.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in col.iter_mut() {
                *v /= sum;
            }
        }
        out
    }

    pub fn exp0_cols(a: &Matrix, c: Curvature) -> Matrix {
        let mut out = a.clone();
        if c.is_euclidean() {
            return out;
        }
        let rows = a.nrows();
        for (o, x) in out.as_mut_slice().chunks_exact_mut(rows).zip(a.as_slice().chunks_exact(rows)) {
            c.exp0_into(x, o);
        }
        out
    }

    pub fn log0_cols(a: &Matrix, c: Curvature) -> Matrix {
        let mut out = a.clone();
        if c.is_euclidean() {
            return out;
        }
        let rows = a.nrows();
        for (o, x) in out.as_mut_slice().chunks_exact_mut(rows).zip(a.as_slice().chunks_exact(rows)) {
            c.log0_into(x, o);
        }
        out
    }

    pub fn mobius_cols(a: &Matrix, b: &Matrix, c: Curvature) -> Matrix {
        if c.is_euclidean() {
            return a + b;
        }
        let rows = a.nrows();
        let mut out = Matrix::zeros(rows, a.ncols());
        for ((o, u), v) in out
            .as_mut_slice()
            .chunks_exact_mut(rows)
            .zip(a.as_slice().chunks_exact(rows))
            .zip(b.as_slice().chunks_exact(rows))
        {
            c.mobius_add_into(u, v, o);
        }
        out
    }

    pub fn clamp(a: &Matrix, m: f64) -> Matrix {
        a.map(|v| v.clamp(-m, m))
    }

    pub fn relu(a: &Matrix) -> Matrix {
        a.map(|v| v.max(0.0))
    }

    pub fn gather_cols(table: &Matrix, ids: &[usize]) -> Matrix {
        Matrix::from_fn(table.nrows(), ids.len(), |i, j| table[(i, ids[j])])
    }

    pub fn add_col_bias(a: &Matrix, bias: &Matrix) -> Matrix {
        let mut out = a.clone();
        for mut col in out.column_iter_mut() {
            col += bias.column(0);
        }
        out
    }
}

/// `tanh(a)/a` and `(d/da (tanh(a)/a)) / a`.
fn exp0_factors(a: f64) -> (f64, f64) {
    if a < 1e-2 {
        let a2 = a * a;
        (1.0 - a2 / 3.0 + 2.0 * a2 * a2 / 15.0, -2.0 / 3.0 + 8.0 * a2 / 15.0 - 34.0 * a2 * a2 / 105.0)
    } else {
        let th = a.tanh();
        let sech2 = 1.0 - th * th;
        (th / a, (a * sech2 - th) / (a * a * a))
    }
}

/// `artanh(b)/b` and `(d/db (artanh(b)/b)) / b`, honoring the argument clamp.
fn log0_factors(b: f64) -> (f64, f64) {
    if b < 1e-2 {
        let b2 = b * b;
        (1.0 + b2 / 3.0 + b2 * b2 / 5.0, 2.0 / 3.0 + 4.0 * b2 / 5.0 + 6.0 * b2 * b2 / 7.0)
    } else if b >= ARTANH_CLAMP {
        let at = ARTANH_CLAMP.atanh();
        (at / b, -at / (b * b * b))
    } else {
        let at = b.atanh();
        (at / b, (b / (1.0 - b * b) - at) / (b * b * b))
    }
}

/// Pull `g` back through the radial projection `z -> R z/|z|` when it was active.
fn unproject_grad(c: Curvature, z: &[f64], g: &mut [f64]) {
    if c.is_euclidean() {
        return;
    }
    let n = norm(z);
    let limit = c.max_norm();
    if n > limit {
        let zg = dot(z, g) / (n * n);
        let s = limit / n;
        for (gi, zi) in g.iter_mut().zip(z) {
            *gi = s * (*gi - zg * zi);
        }
    }
}

fn exp0_vjp(c: Curvature, v: &[f64], g: &[f64], out: &mut [f64]) {
    let cv = c.value();
    let a = cv.sqrt() * norm(v);
    let (s, ds) = exp0_factors(a);
    let mut g = g.to_vec();
    let z: Vec<f64> = v.iter().map(|x| s * x).collect();
    unproject_grad(c, &z, &mut g);
    let gv = dot(&g, v);
    for ((o, gi), vi) in out.iter_mut().zip(&g).zip(v) {
        *o += s * gi + cv * ds * gv * vi;
    }
}

fn log0_vjp(c: Curvature, x: &[f64], g: &[f64], out: &mut [f64]) {
    let cv = c.value();
    let b = cv.sqrt() * norm(x);
    let (t, dt) = log0_factors(b);
    let gx = dot(g, x);
    for ((o, gi), xi) in out.iter_mut().zip(g).zip(x) {
        *o += t * gi + cv * dt * gx * xi;
    }
}

fn mobius_vjp(c: Curvature, u: &[f64], v: &[f64], g: &[f64], gu_out: &mut [f64], gv_out: &mut [f64]) {
    let k = c.value();
    let uv = dot(u, v);
    let uu = dot(u, u);
    let vv = dot(v, v);
    let alpha = 1.0 + 2.0 * k * uv + k * vv;
    let beta = 1.0 - k * uu;
    let denom = 1.0 + 2.0 * k * uv + k * k * uu * vv;
    let w: Vec<f64> = u.iter().zip(v).map(|(a, b)| (alpha * a + beta * b) / denom).collect();
    let mut g = g.to_vec();
    unproject_grad(c, &w, &mut g);

    // w = N / D with N = alpha u + beta v.
    let gn: Vec<f64> = g.iter().map(|x| x / denom).collect();
    let g_denom = -dot(&g, &w) / denom;
    let pu = dot(&gn, u);
    let pv = dot(&gn, v);
    // d alpha/du = 2k v, d alpha/dv = 2k (u + v), d beta/du = -2k u,
    // d D/du = 2k v + 2k^2 |v|^2 u, d D/dv = 2k u + 2k^2 |u|^2 v.
    for i in 0..u.len() {
        gu_out[i] += alpha * gn[i] + pu * 2.0 * k * v[i] - pv * 2.0 * k * u[i]
            + g_denom * (2.0 * k * v[i] + 2.0 * k * k * vv * u[i]);
        gv_out[i] += beta * gn[i] + pu * 2.0 * k * (u[i] + v[i]) + g_denom * (2.0 * k * u[i] + 2.0 * k * k * uu * v[i]);
    }
}

/// Recorded computation. Build with the [`Backend`] methods, then call [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not influence the output.
    pub fn get_or_zeros(&self, v: Var, like: &Matrix) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(like.nrows(), like.ncols()))
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn clamp(&mut self, a: Var, m: f64) -> Var {
        let v = kernels::clamp(&self.nodes[a.0].value, m);
        self.push(v, Op::Clamp(a, m))
    }

    pub fn squared_error(&mut self, a: Var, target: Matrix) -> Var {
        let diff = &self.nodes[a.0].value - &target;
        let v = Matrix::from_element(1, 1, diff.norm_squared());
        self.push(v, Op::SquaredError(a, target))
    }

    /// Reverse sweep from `root`, seeded with `seed * ones`.
    pub fn backward(&self, root: Var, seed: f64) -> Grads {
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        let r = &self.nodes[root.0].value;
        grads[root.0] = Some(Matrix::from_element(r.nrows(), r.ncols(), seed));

        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => *existing += g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let val = |v: &Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = &g * val(b).transpose();
                    let gb = val(a).transpose() * &g;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulTn(a, b) => {
                    let ga = val(b) * g.transpose();
                    let gb = val(a) * &g;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::AddColBias(a, bias) => {
                    let gb = Matrix::from_iterator(g.nrows(), 1, g.row_iter().map(|r| r.sum()));
                    acc(&mut grads, *bias, gb);
                    acc(&mut grads, *a, g);
                }
                Op::BroadcastCols(bias) => {
                    let gb = Matrix::from_iterator(g.nrows(), 1, g.row_iter().map(|r| r.sum()));
                    acc(&mut grads, *bias, gb);
                }
                Op::Scale(a, k) => acc(&mut grads, *a, g * *k),
                Op::Relu(a) => {
                    let ga = g.zip_map(val(a), |gi, x| if x > 0.0 { gi } else { 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::Clamp(a, m) => {
                    let ga = g.zip_map(val(a), |gi, x| if x.abs() < *m { gi } else { 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxCols(a) => {
                    let p = &node.value;
                    let rows = p.nrows();
                    let mut ga = Matrix::zeros(rows, p.ncols());
                    for ((o, pc), gc) in ga
                        .as_mut_slice()
                        .chunks_exact_mut(rows)
                        .zip(p.as_slice().chunks_exact(rows))
                        .zip(g.as_slice().chunks_exact(rows))
                    {
                        let s = dot(pc, gc);
                        for ((oi, pi), gi) in o.iter_mut().zip(pc).zip(gc) {
                            *oi = pi * (gi - s);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Exp0Cols(a, c) => {
                    if c.is_euclidean() {
                        acc(&mut grads, *a, g);
                    } else {
                        let x = val(a);
                        let rows = x.nrows();
                        let mut ga = Matrix::zeros(rows, x.ncols());
                        for ((o, xc), gc) in ga
                            .as_mut_slice()
                            .chunks_exact_mut(rows)
                            .zip(x.as_slice().chunks_exact(rows))
                            .zip(g.as_slice().chunks_exact(rows))
                        {
                            exp0_vjp(*c, xc, gc, o);
                        }
                        acc(&mut grads, *a, ga);
                    }
                }
                Op::Log0Cols(a, c) => {
                    if c.is_euclidean() {
                        acc(&mut grads, *a, g);
                    } else {
                        let x = val(a);
                        let rows = x.nrows();
                        let mut ga = Matrix::zeros(rows, x.ncols());
                        for ((o, xc), gc) in ga
                            .as_mut_slice()
                            .chunks_exact_mut(rows)
                            .zip(x.as_slice().chunks_exact(rows))
                            .zip(g.as_slice().chunks_exact(rows))
                        {
                            log0_vjp(*c, xc, gc, o);
                        }
                        acc(&mut grads, *a, ga);
                    }
                }
                Op::MobiusCols(a, b, c) => {
                    if c.is_euclidean() {
                        acc(&mut grads, *a, g.clone());
                        acc(&mut grads, *b, g);
                    } else {
                        let (x, y) = (val(a), val(b));
                        let rows = x.nrows();
                        let mut ga = Matrix::zeros(rows, x.ncols());
                        let mut gb = Matrix::zeros(rows, x.ncols());
                        for ((((oa, ob), xc), yc), gc) in ga
                            .as_mut_slice()
                            .chunks_exact_mut(rows)
                            .zip(gb.as_mut_slice().chunks_exact_mut(rows))
                            .zip(x.as_slice().chunks_exact(rows))
                            .zip(y.as_slice().chunks_exact(rows))
                            .zip(g.as_slice().chunks_exact(rows))
                        {
                            mobius_vjp(*c, xc, yc, gc, oa, ob);
                        }
                        acc(&mut grads, *a, ga);
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::GatherCols(table, ids) => {
                    let t = val(table);
                    let mut gt = Matrix::zeros(t.nrows(), t.ncols());
                    for (j, &id) in ids.iter().enumerate() {
                        let mut col = gt.column_mut(id);
                        col += g.column(j);
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::SquaredError(a, target) => {
                    let ga = (val(a) - target) * (2.0 * g[(0, 0)]);
                    acc(&mut grads, *a, ga);
                }
            }
        }
        Grads { grads }
    }
}

impl Backend for Tape {
    type T = Var;

    fn value<'a>(&'a self, t: &'a Var) -> &'a Matrix {
        &self.nodes[t.0].value
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::MatMul(*a, *b))
    }

    fn matmul_tn(&mut self, a: &Var, b: &Var) -> Var {
        let v = self.nodes[a.0].value.tr_mul(&self.nodes[b.0].value);
        self.push(v, Op::MatMulTn(*a, *b))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(*a, *b))
    }

    fn add_col_bias(&mut self, a: &Var, bias: &Var) -> Var {
        let v = kernels::add_col_bias(&self.nodes[a.0].value, &self.nodes[bias.0].value);
        self.push(v, Op::AddColBias(*a, *bias))
    }

    fn broadcast_cols(&mut self, bias: &Var, ncols: usize) -> Var {
        let b = &self.nodes[bias.0].value;
        let v = Matrix::from_fn(b.nrows(), ncols, |i, _| b[(i, 0)]);
        self.push(v, Op::BroadcastCols(*bias))
    }

    fn scale(&mut self, a: &Var, k: f64) -> Var {
        let v = &self.nodes[a.0].value * k;
        self.push(v, Op::Scale(*a, k))
    }

    fn relu(&mut self, a: &Var) -> Var {
        let v = kernels::relu(&self.nodes[a.0].value);
        self.push(v, Op::Relu(*a))
    }

    fn softmax_cols(&mut self, a: &Var) -> Var {
        let v = kernels::softmax_cols(&self.nodes[a.0].value);
        self.push(v, Op::SoftmaxCols(*a))
    }

    fn exp0(&mut self, a: &Var, c: Curvature) -> Var {
        let v = kernels::exp0_cols(&self.nodes[a.0].value, c);
        self.push(v, Op::Exp0Cols(*a, c))
    }

    fn log0(&mut self, a: &Var, c: Curvature) -> Var {
        let v = kernels::log0_cols(&self.nodes[a.0].value, c);
        self.push(v, Op::Log0Cols(*a, c))
    }

    fn mobius(&mut self, a: &Var, b: &Var, c: Curvature) -> Var {
        let v = kernels::mobius_cols(&self.nodes[a.0].value, &self.nodes[b.0].value, c);
        self.push(v, Op::MobiusCols(*a, *b, c))
    }

    fn gather_cols(&mut self, table: &Var, ids: &[usize]) -> Var {
        let v = kernels::gather_cols(&self.nodes[table.0].value, ids);
        self.push(v, Op::GatherCols(*table, ids.to_vec()))
    }
}

/// Tape-free evaluation on owned matrices.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eval;

impl Backend for Eval {
    type T = Matrix;

    fn value<'a>(&'a self, t: &'a Matrix) -> &'a Matrix {
        t
    }

    fn matmul(&mut self, a: &Matrix, b: &Matrix) -> Matrix {
        a * b
    }

    fn matmul_tn(&mut self, a: &Matrix, b: &Matrix) -> Matrix {
        a.tr_mul(b)
    }

    fn add(&mut self, a: &Matrix, b: &Matrix) -> Matrix {
        a + b
    }

    fn add_col_bias(&mut self, a: &Matrix, bias: &Matrix) -> Matrix {
        kernels::add_col_bias(a, bias)
    }

    fn broadcast_cols(&mut self, bias: &Matrix, ncols: usize) -> Matrix {
        Matrix::from_fn(bias.nrows(), ncols, |i, _| bias[(i, 0)])
    }

    fn scale(&mut self, a: &Matrix, k: f64) -> Matrix {
        a * k
    }

    fn relu(&mut self, a: &Matrix) -> Matrix {
        kernels::relu(a)
    }

    fn softmax_cols(&mut self, a: &Matrix) -> Matrix {
        kernels::softmax_cols(a)
    }

    fn exp0(&mut self, a: &Matrix, c: Curvature) -> Matrix {
        kernels::exp0_cols(a, c)
    }

    fn log0(&mut self, a: &Matrix, c: Curvature) -> Matrix {
        kernels::log0_cols(a, c)
    }

    fn mobius(&mut self, a: &Matrix, b: &Matrix, c: Curvature) -> Matrix {
        kernels::mobius_cols(a, b, c)
    }

    fn gather_cols(&mut self, table: &Matrix, ids: &[usize]) -> Matrix {
        kernels::gather_cols(table, ids)
    }
}
