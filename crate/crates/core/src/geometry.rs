//! Gyrovector calculus on the Poincaré ball `D_c^n`.
//!
//! Points live strictly inside the ball of radius `1/sqrt(c)`. Every operation
//! that produces a ball point re-projects radially onto the boundary margin
//! [`BALL_MARGIN`] if rounding pushed it out. A curvature of exactly zero is a
//! separate code path that evaluates the Euclidean formulas (vector addition,
//! identity exponential and logarithmic maps) rather than a small-`c` limit.
//!
//! Two layers are exposed:
//!
//! - slice kernels on [`Curvature`] (`mobius_add`, `exp0_into`, ...) that do no
//!   validation and are used on hot paths by the model;
//! - checked free functions over [`BallPoint`] / [`TangentVector`] that
//!   validate dimension, curvature and finiteness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative distance to the boundary that every ball point must keep.
pub const BALL_MARGIN: f64 = 1e-5;

/// Upper clamp for the argument of `artanh`.
pub const ARTANH_CLAMP: f64 = 1.0 - 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("curvature mismatch: {left} vs {right}")]
    CurvatureMismatch { left: f64, right: f64 },
    #[error("curvature must be finite and nonnegative, got {0}")]
    InvalidCurvature(f64),
    #[error("non-finite coordinate or scalar")]
    NonFinite,
    #[error("point with norm {norm} lies outside the ball (limit {limit})")]
    OutsideBall { norm: f64, limit: f64 },
    #[error("hyperbolic distance is undefined at c = 0; use the Euclidean norm")]
    EuclideanCurvature,
    #[error("operation needs at least one point")]
    Empty,
    #[error("need at least {needed} distinct points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("tangent vector is based at a different point")]
    BasepointMismatch,
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Negative of the sectional curvature. `c = 0` is flat space.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Curvature(f64);

impl TryFrom<f64> for Curvature {
    type Error = GeometryError;

    fn try_from(c: f64) -> Result<Self> {
        Curvature::new(c)
    }
}

impl From<Curvature> for f64 {
    fn from(c: Curvature) -> f64 {
        c.0
    }
}

impl std::fmt::Display for Curvature {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
fn clamped_artanh(x: f64) -> f64 {
    x.min(ARTANH_CLAMP).atanh()
}

impl Curvature {
    pub const EUCLIDEAN: Curvature = Curvature(0.0);

    pub fn new(c: f64) -> Result<Self> {
        if c.is_finite() && c >= 0.0 {
            Ok(Curvature(c))
        } else {
            Err(GeometryError::InvalidCurvature(c))
        }
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }

    #[inline]
    pub fn is_euclidean(self) -> bool {
        self.0 == 0.0
    }

    /// Ball radius `1/sqrt(c)`; infinite for `c = 0`.
    pub fn radius(self) -> f64 {
        if self.is_euclidean() {
            f64::INFINITY
        } else {
            1.0 / self.0.sqrt()
        }
    }

    /// Largest admissible norm, `(1 - BALL_MARGIN) / sqrt(c)`.
    pub fn max_norm(self) -> f64 {
        (1.0 - BALL_MARGIN) * self.radius()
    }

    /// `lambda_x^c = 2 / (1 - c |x|^2)`.
    pub fn conformal_factor(self, x: &[f64]) -> f64 {
        2.0 / (1.0 - self.0 * dot(x, x))
    }

    /// Radially rescales `x` onto the margin if it lies outside. Returns whether it moved.
    pub fn project(self, x: &mut [f64]) -> bool {
        if self.is_euclidean() {
            return false;
        }
        let n = norm(x);
        let limit = self.max_norm();
        if n > limit {
            let mut s = limit / n;
            x.iter_mut().for_each(|v| *v *= s);
            // rounding can leave the rescaled norm an ulp above the limit
            while norm(x) > limit {
                s = 1.0 - f64::EPSILON;
                x.iter_mut().for_each(|v| *v *= s);
            }
            true
        } else {
            false
        }
    }

    pub fn mobius_add_into(self, u: &[f64], v: &[f64], out: &mut [f64]) {
        let c = self.0;
        if c == 0.0 {
            for ((o, a), b) in out.iter_mut().zip(u).zip(v) {
                *o = a + b;
            }
            return;
        }
        let uv = dot(u, v);
        let uu = dot(u, u);
        let vv = dot(v, v);
        let alpha = 1.0 + 2.0 * c * uv + c * vv;
        let beta = 1.0 - c * uu;
        let denom = 1.0 + 2.0 * c * uv + c * c * uu * vv;
        for ((o, a), b) in out.iter_mut().zip(u).zip(v) {
            *o = (alpha * a + beta * b) / denom;
        }
        self.project(out);
    }

    /// `u (+)_c v`.
    pub fn mobius_add(self, u: &[f64], v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; u.len()];
        self.mobius_add_into(u, v, &mut out);
        out
    }

    /// `r (x)_c u`; the zero vector maps to zero for every `r`.
    pub fn mobius_scalar_mul(self, r: f64, u: &[f64]) -> Vec<f64> {
        if self.is_euclidean() {
            return u.iter().map(|x| r * x).collect();
        }
        let n = norm(u);
        if n == 0.0 {
            return vec![0.0; u.len()];
        }
        let sc = self.0.sqrt();
        let scale = (r * clamped_artanh(sc * n)).tanh() / (sc * n);
        let mut out: Vec<f64> = u.iter().map(|x| scale * x).collect();
        self.project(&mut out);
        out
    }

    pub fn exp0_into(self, v: &[f64], out: &mut [f64]) {
        if self.is_euclidean() {
            out.copy_from_slice(v);
            return;
        }
        let a = self.0.sqrt() * norm(v);
        let s = if a == 0.0 { 1.0 } else { a.tanh() / a };
        for (o, x) in out.iter_mut().zip(v) {
            *o = s * x;
        }
        self.project(out);
    }

    /// Exponential map at the origin.
    pub fn exp0(self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        self.exp0_into(v, &mut out);
        out
    }

    pub fn log0_into(self, y: &[f64], out: &mut [f64]) {
        if self.is_euclidean() {
            out.copy_from_slice(y);
            return;
        }
        let b = self.0.sqrt() * norm(y);
        let s = if b == 0.0 { 1.0 } else { clamped_artanh(b) / b };
        for (o, x) in out.iter_mut().zip(y) {
            *o = s * x;
        }
    }

    /// Logarithmic map at the origin.
    pub fn log0(self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; y.len()];
        self.log0_into(y, &mut out);
        out
    }

    /// `exp_x^c(v)`; returns `x` for `v = 0`.
    pub fn exp_map(self, x: &[f64], v: &[f64]) -> Vec<f64> {
        if self.is_euclidean() {
            return x.iter().zip(v).map(|(a, b)| a + b).collect();
        }
        let n = norm(v);
        if n == 0.0 {
            return x.to_vec();
        }
        let sc = self.0.sqrt();
        let lambda = self.conformal_factor(x);
        let s = (sc * lambda * n / 2.0).tanh() / (sc * n);
        let step: Vec<f64> = v.iter().map(|a| s * a).collect();
        self.mobius_add(x, &step)
    }

    /// `log_x^c(y)`; returns the zero vector for `y = x`.
    pub fn log_map(self, x: &[f64], y: &[f64]) -> Vec<f64> {
        if self.is_euclidean() {
            return y.iter().zip(x).map(|(a, b)| a - b).collect();
        }
        let neg_x: Vec<f64> = x.iter().map(|a| -a).collect();
        let w = self.mobius_add(&neg_x, y);
        let n = norm(&w);
        if n == 0.0 {
            return vec![0.0; x.len()];
        }
        let sc = self.0.sqrt();
        let lambda = self.conformal_factor(x);
        let s = 2.0 / (sc * lambda) * clamped_artanh(sc * n) / n;
        w.iter().map(|a| s * a).collect()
    }

    /// Distance formula as printed in the HyT construction, including its
    /// interior factor of two and without a `1/sqrt(c)` prefactor.
    pub fn conformal_distance(self, p: &[f64], q: &[f64]) -> Result<f64> {
        if self.is_euclidean() {
            return Err(GeometryError::EuclideanCurvature);
        }
        let c = self.0;
        let diff: f64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
        let inv = 1.0 / c;
        let arg = 2.0 * diff / (c * (inv - dot(p, p)) * (inv - dot(q, q)));
        Ok(2.0 * arg.max(0.0).sqrt().asinh())
    }

    /// Gyrodistance `(2/sqrt(c)) artanh(sqrt(c) |(-p) (+) q|)`.
    pub fn gyro_distance(self, p: &[f64], q: &[f64]) -> Result<f64> {
        if self.is_euclidean() {
            return Err(GeometryError::EuclideanCurvature);
        }
        let neg_p: Vec<f64> = p.iter().map(|a| -a).collect();
        let w = self.mobius_add(&neg_p, q);
        let sc = self.0.sqrt();
        Ok(2.0 / sc * clamped_artanh(sc * norm(&w)))
    }
}

/// A point strictly inside the ball, at least [`BALL_MARGIN`] from the boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BallPoint {
    coords: Vec<f64>,
    curvature: Curvature,
}

impl BallPoint {
    /// Validating constructor: rejects non-finite coordinates and points beyond the margin.
    pub fn new(coords: Vec<f64>, curvature: Curvature) -> Result<Self> {
        if coords.iter().any(|x| !x.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let n = norm(&coords);
        let limit = curvature.max_norm();
        if n > limit {
            return Err(GeometryError::OutsideBall { norm: n, limit });
        }
        Ok(BallPoint { coords, curvature })
    }

    /// Like [`BallPoint::new`] but radially rescales out-of-ball input onto the margin.
    pub fn projected(mut coords: Vec<f64>, curvature: Curvature) -> Result<Self> {
        if coords.iter().any(|x| !x.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        curvature.project(&mut coords);
        Ok(BallPoint { coords, curvature })
    }

    pub fn origin(dim: usize, curvature: Curvature) -> Self {
        BallPoint { coords: vec![0.0; dim], curvature }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn curvature(&self) -> Curvature {
        self.curvature
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.coords)
    }

    /// Gyro-inverse `-u`.
    pub fn neg(&self) -> BallPoint {
        BallPoint { coords: self.coords.iter().map(|x| -x).collect(), curvature: self.curvature }
    }

    fn compatible(&self, other: &BallPoint) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(GeometryError::DimensionMismatch { left: self.dim(), right: other.dim() });
        }
        if self.curvature != other.curvature {
            return Err(GeometryError::CurvatureMismatch {
                left: self.curvature.value(),
                right: other.curvature.value(),
            });
        }
        Ok(())
    }

    fn finish(coords: Vec<f64>, curvature: Curvature) -> Result<BallPoint> {
        if coords.iter().any(|x| !x.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        Ok(BallPoint { coords, curvature })
    }
}

/// A vector in the tangent space at `basepoint`.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    coords: Vec<f64>,
    basepoint: BallPoint,
}

impl TangentVector {
    pub fn new(coords: Vec<f64>, basepoint: BallPoint) -> Result<Self> {
        if coords.iter().any(|x| !x.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if coords.len() != basepoint.dim() {
            return Err(GeometryError::DimensionMismatch { left: coords.len(), right: basepoint.dim() });
        }
        Ok(TangentVector { coords, basepoint })
    }

    /// Tangent vector at the origin.
    pub fn at_origin(coords: Vec<f64>, curvature: Curvature) -> Result<Self> {
        let base = BallPoint::origin(coords.len(), curvature);
        Self::new(coords, base)
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn basepoint(&self) -> &BallPoint {
        &self.basepoint
    }

    pub fn norm(&self) -> f64 {
        norm(&self.coords)
    }
}

/// Local metric scale `lambda_x^c`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct ConformalFactor(f64);

impl ConformalFactor {
    pub fn at(x: &BallPoint) -> Self {
        ConformalFactor(x.curvature.conformal_factor(&x.coords))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

pub fn mobius_add(u: &BallPoint, v: &BallPoint) -> Result<BallPoint> {
    u.compatible(v)?;
    BallPoint::finish(u.curvature.mobius_add(&u.coords, &v.coords), u.curvature)
}

pub fn mobius_scalar_mul(r: f64, u: &BallPoint) -> Result<BallPoint> {
    if !r.is_finite() {
        return Err(GeometryError::NonFinite);
    }
    BallPoint::finish(u.curvature.mobius_scalar_mul(r, &u.coords), u.curvature)
}

pub fn exp_map(x: &BallPoint, v: &TangentVector) -> Result<BallPoint> {
    if v.basepoint != *x {
        return Err(GeometryError::BasepointMismatch);
    }
    BallPoint::finish(x.curvature.exp_map(&x.coords, &v.coords), x.curvature)
}

pub fn log_map(x: &BallPoint, y: &BallPoint) -> Result<TangentVector> {
    x.compatible(y)?;
    let v = x.curvature.log_map(&x.coords, &y.coords);
    TangentVector::new(v, x.clone())
}

/// The closed-form distance exactly as printed with the model definition.
///
/// At `c = 1`, `p = 0`, `q = (0.5, 0)` this gives 1.4910 whereas the usual
/// Poincaré metric ([`distance_via_log`]) gives 1.0986. Both are kept.
pub fn geodesic_distance(p: &BallPoint, q: &BallPoint) -> Result<f64> {
    p.compatible(q)?;
    p.curvature.conformal_distance(&p.coords, &q.coords)
}

/// Gyrodistance induced by the logarithmic map, `|log_p(q)|_p`.
pub fn distance_via_log(p: &BallPoint, q: &BallPoint) -> Result<f64> {
    p.compatible(q)?;
    p.curvature.gyro_distance(&p.coords, &q.coords)
}

/// `(1/m) (x) (x_1 (+) (x_2 (+) ... (x_{m-1} (+) x_m)))`, folded from the right.
///
/// This is a Möbius-folded average, not the variational Fréchet mean.
pub fn frechet_centroid(points: &[BallPoint]) -> Result<BallPoint> {
    let (last, rest) = points.split_last().ok_or(GeometryError::Empty)?;
    for p in rest {
        p.compatible(last)?;
    }
    let c = last.curvature;
    let mut acc = last.coords.clone();
    for p in rest.iter().rev() {
        acc = c.mobius_add(&p.coords, &acc);
    }
    let m = points.len() as f64;
    BallPoint::finish(c.mobius_scalar_mul(1.0 / m, &acc), c)
}

/// Which distance enters Gromov products.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    /// [`geodesic_distance`].
    Conformal,
    /// [`distance_via_log`].
    #[default]
    Gyro,
}

impl Metric {
    /// Distance under this metric; falls back to `|p - q|` when `c = 0`.
    pub fn distance(self, c: Curvature, p: &[f64], q: &[f64]) -> f64 {
        if c.is_euclidean() {
            return p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        }
        let d = match self {
            Metric::Conformal => c.conformal_distance(p, q),
            Metric::Gyro => c.gyro_distance(p, q),
        };
        d.unwrap_or(f64::NAN)
    }
}

/// `(x, y)_w = (d(x, w) + d(y, w) - d(x, y)) / 2`.
pub fn gromov_product(x: &BallPoint, y: &BallPoint, w: &BallPoint, metric: Metric) -> Result<f64> {
    x.compatible(y)?;
    x.compatible(w)?;
    let c = x.curvature;
    let d = |a: &BallPoint, b: &BallPoint| metric.distance(c, &a.coords, &b.coords);
    Ok(0.5 * (d(x, w) + d(y, w) - d(x, y)))
}

/// Monte-Carlo estimate of the four-point hyperbolicity constant.
///
/// Draws `n_quadruples` index tuples `(x, y, z, w)` uniformly with replacement
/// and returns the largest violation of
/// `(x, z)_w >= min((x, y)_w, (y, z)_w) - delta`, floored at zero.
pub fn estimate_delta(samples: &[BallPoint], n_quadruples: usize, metric: Metric, seed: u64) -> Result<f64> {
    let first = samples.first().ok_or(GeometryError::TooFewPoints { needed: 4, got: 0 })?;
    for p in samples {
        p.compatible(first)?;
    }
    let mut distinct: Vec<&[f64]> = Vec::new();
    for p in samples {
        if !distinct.iter().any(|q| *q == p.coords()) {
            distinct.push(p.coords());
            if distinct.len() >= 4 {
                break;
            }
        }
    }
    if distinct.len() < 4 {
        return Err(GeometryError::TooFewPoints { needed: 4, got: distinct.len() });
    }

    let n = samples.len();
    let c = first.curvature;
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = metric.distance(c, &samples[i].coords, &samples[j].coords);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let gp = |a: usize, b: usize, w: usize| 0.5 * (dist[a * n + w] + dist[b * n + w] - dist[a * n + b]);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut delta = 0.0f64;
    for _ in 0..n_quadruples {
        let x = rng.random_range(0..n);
        let y = rng.random_range(0..n);
        let z = rng.random_range(0..n);
        let w = rng.random_range(0..n);
        let violation = gp(x, y, w).min(gp(y, z, w)) - gp(x, z, w);
        delta = delta.max(violation);
    }
    Ok(delta)
}
