//! Counting formulas, capacity bounds, the consistency-condition checker and a
//! Monte-Carlo packing estimator.
//!
//! Unnamed absolute constants are explicit arguments. Quantities that overflow
//! `f64` are reported as natural logarithms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{kernels, Matrix};
use crate::geometry::{Curvature, ARTANH_CLAMP};
use crate::model::{self, HyTConfig};
use crate::training::{truncate, TruncationLevel};

#[derive(Debug, Error)]
pub enum CapacityError {
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("integer overflow evaluating {0}")]
    Overflow(&'static str),
    #[error("eps = {eps} outside (0, {limit}]")]
    EpsOutOfRange { eps: f64, limit: f64 },
    #[error("theta = {theta} outside (0, {limit})")]
    ThetaOutOfRange { theta: f64, limit: f64 },
    #[error("schedule gives M = {m} at t = {t}, not inside radius {radius}")]
    ScheduleOutsideBall { t: f64, m: f64, radius: f64 },
    #[error("conditions need a positive curvature")]
    EuclideanCurvature,
    #[error("t grid must be non-empty, strictly increasing and > 1")]
    BadGrid,
    #[error("condition expression undefined at t = {t}")]
    Undefined { t: f64 },
    #[error("empty function sample")]
    Empty,
    #[error("function sample shapes differ")]
    RaggedSample,
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

pub type Result<T> = std::result::Result<T, CapacityError>;

fn positive(name: &'static str, v: usize) -> Result<u64> {
    if v == 0 {
        Err(CapacityError::NonPositive(name))
    } else {
        Ok(v as u64)
    }
}

fn checked(terms: &[Option<u64>]) -> Option<u64> {
    terms.iter().try_fold(0u64, |acc, t| acc.checked_add((*t)?))
}

/// `4sdh + 2dr + d + r + dv`. `v = 0` means no embedding table.
pub fn n_param(h: usize, s: usize, r: usize, d: usize, v: usize) -> Result<u64> {
    let (h, s, r, d) = (positive("h", h)?, positive("s", s)?, positive("r", r)?, positive("d", d)?);
    let v = v as u64;
    checked(&[
        4u64.checked_mul(s).and_then(|x| x.checked_mul(d)).and_then(|x| x.checked_mul(h)),
        2u64.checked_mul(d).and_then(|x| x.checked_mul(r)),
        Some(d),
        Some(r),
        d.checked_mul(v),
    ])
    .ok_or(CapacityError::Overflow("n_param"))
}

/// `h[3(d+s)+d] + 2d + r`.
pub fn n_neuron(h: usize, s: usize, r: usize, d: usize) -> Result<u64> {
    let (h, s, r, d) = (positive("h", h)?, positive("s", s)?, positive("r", r)?, positive("d", d)?);
    let inner = d.checked_add(s).and_then(|x| x.checked_mul(3)).and_then(|x| x.checked_add(d));
    checked(&[inner.and_then(|x| x.checked_mul(h)), d.checked_mul(2), Some(r)])
        .ok_or(CapacityError::Overflow("n_neuron"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureCount {
    pub n_param: u64,
    pub n_neuron: u64,
}

impl ArchitectureCount {
    pub fn new(h: usize, s: usize, r: usize, d: usize, v: usize) -> Result<Self> {
        Ok(ArchitectureCount { n_param: n_param(h, s, r, d, v)?, n_neuron: n_neuron(h, s, r, d)? })
    }

    /// Counts for one block of `cfg`, with `cfg.vocab` as the embedding size.
    pub fn of(cfg: &HyTConfig) -> Result<Self> {
        Self::new(cfg.heads, cfg.head_size, cfg.ffn_hidden, cfg.dim, cfg.vocab)
    }
}

/// `constant * n_param * log2(n_neuron)`.
pub fn pdim_bound(h: usize, s: usize, r: usize, d: usize, v: usize, constant: f64) -> Result<f64> {
    if !(constant >= 0.0 && constant.is_finite()) {
        return Err(CapacityError::NonPositive("constant"));
    }
    let c = ArchitectureCount::new(h, s, r, d, v)?;
    Ok(constant * c.n_param as f64 * (c.n_neuron as f64).log2())
}

/// `ln(2 (2eK (2M/eps)^K ln(2eK (2M/eps)^K))^pdim)`, for `0 < eps <= 2M`.
pub fn log_packing_bound(eps: f64, m: f64, k: usize, pdim: f64) -> Result<f64> {
    if !(m > 0.0 && m.is_finite()) {
        return Err(CapacityError::NonPositive("M"));
    }
    if !(eps > 0.0 && eps <= 2.0 * m) {
        return Err(CapacityError::EpsOutOfRange { eps, limit: 2.0 * m });
    }
    if k == 0 {
        return Err(CapacityError::NonPositive("K"));
    }
    if !(pdim >= 1.0 && pdim.is_finite()) {
        return Err(CapacityError::NonPositive("pdim - 1"));
    }
    let k = k as f64;
    let log_inner = (2.0 * std::f64::consts::E * k).ln() + k * (2.0 * m / eps).ln();
    Ok(std::f64::consts::LN_2 + pdim * (log_inner + log_inner.ln()))
}

/// `constant * d * n_param * ln(n_neuron) * ln[dt (2M/eps)^{dt} ln(dt (2M/eps)^{dt})]`,
/// for `0 < eps <= M`.
pub fn log_covering_bound(
    eps: f64,
    m: f64,
    d: usize,
    t: usize,
    n_param: u64,
    n_neuron: u64,
    constant: f64,
) -> Result<f64> {
    if !(m > 0.0 && m.is_finite()) {
        return Err(CapacityError::NonPositive("M"));
    }
    if !(eps > 0.0 && eps <= m) {
        return Err(CapacityError::EpsOutOfRange { eps, limit: m });
    }
    let dt = positive("d", d)? as f64 * positive("t", t)? as f64;
    if n_param == 0 || n_neuron == 0 {
        return Err(CapacityError::NonPositive("n_param and n_neuron"));
    }
    let log_a = dt.ln() + dt * (2.0 * m / eps).ln();
    Ok(constant * d as f64 * n_param as f64 * (n_neuron as f64).ln() * (log_a + log_a.ln()))
}

/// Size of a greedy `eps`-separated subset under the empirical L1 distance
/// `(1/m) sum_probes sum_components |f - g|`. Each function is a `K x m` matrix
/// of tangent outputs, one column per probe point.
///
/// The greedy runs over the scales `eps 2^k` from the sample diameter down to
/// `eps`, keeping every point chosen at a coarser scale, so the count at `2 eps`
/// never exceeds the count at `eps`.
pub fn estimate_packing(functions: &[Matrix], eps: f64) -> Result<usize> {
    if functions.is_empty() {
        return Err(CapacityError::Empty);
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(CapacityError::EpsOutOfRange { eps, limit: f64::INFINITY });
    }
    let shape = functions[0].shape();
    if functions.iter().any(|f| f.shape() != shape) {
        return Err(CapacityError::RaggedSample);
    }
    let probes = shape.1.max(1) as f64;
    let dist = |a: &Matrix, b: &Matrix| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / probes;

    let mut diameter = 0.0f64;
    for (i, a) in functions.iter().enumerate() {
        for b in &functions[i + 1..] {
            diameter = diameter.max(dist(a, b));
        }
    }
    let mut scale = eps;
    let mut levels = 0;
    while scale < diameter {
        scale *= 2.0;
        levels += 1;
    }

    let mut chosen: Vec<usize> = Vec::new();
    for level in (0..=levels).rev() {
        let scale = eps * f64::powi(2.0, level);
        for (i, f) in functions.iter().enumerate() {
            if !chosen.contains(&i) && chosen.iter().all(|&j| dist(f, &functions[j]) >= scale) {
                chosen.push(i);
            }
        }
    }
    Ok(chosen.len())
}

/// A family of small random models evaluated on shared probe inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyClass {
    pub config: HyTConfig,
    pub models: usize,
    pub probes: usize,
    /// Tangent-space truncation applied to every output.
    pub truncation: f64,
    pub weight_scale: f64,
    pub seed: u64,
}

impl TinyClass {
    /// `d = 1, t = 2, M = 1` with 200 models on 16 probes.
    pub fn standard(seed: u64) -> Self {
        TinyClass {
            config: HyTConfig { dim: 1, tokens: 2, ..HyTConfig::default() },
            models: 200,
            probes: 16,
            truncation: 1.0,
            weight_scale: 1.0,
            seed,
        }
    }

    /// Output dimension `K = d t` of each function.
    pub fn output_dim(&self) -> usize {
        self.config.dim * self.config.tokens
    }

    /// Each model's truncated outputs as a `K x probes` matrix.
    pub fn sample(&self) -> Result<Vec<Matrix>> {
        let cfg = &self.config;
        let m = TruncationLevel::new(self.truncation).map_err(|_| CapacityError::NonPositive("truncation"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let probes: Vec<Matrix> = (0..self.probes)
            .map(|_| {
                let z = Matrix::from_fn(cfg.dim, cfg.tokens, |_, _| normal.sample(&mut rng));
                kernels::exp0_cols(&z, cfg.curvature)
            })
            .collect();
        let k = self.output_dim();
        (0..self.models)
            .map(|i| {
                let seed = self.seed.wrapping_add(1 + i as u64);
                let p = model::init_params(cfg, seed, self.weight_scale)?;
                let mut out = Matrix::zeros(k, self.probes);
                for (j, x) in probes.iter().enumerate() {
                    let y = truncate(&model::forward(&p, cfg, x)?, m);
                    out.column_mut(j).copy_from_slice(y.as_slice());
                }
                Ok(out)
            })
            .collect()
    }
}

/// Truncation schedule `M_t` (ball units) for the condition checker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MSchedule {
    /// `M_t = (1 - t^{-1/2}) / sqrt(c)`.
    Default,
    Constant(f64),
}

impl MSchedule {
    pub fn at(self, t: f64, c: Curvature) -> f64 {
        match self {
            MSchedule::Default => (1.0 - t.powf(-0.5)) / c.value().sqrt(),
            MSchedule::Constant(m) => m,
        }
    }
}

/// `2^lo, ..., 2^hi`.
pub fn pow2_grid(lo: u32, hi: u32) -> Vec<f64> {
    (lo..=hi).map(|k| f64::powi(2.0, k as i32)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionTrace {
    pub curvature: f64,
    pub d: usize,
    pub theta: f64,
    pub t: Vec<f64>,
    pub m_t: Vec<f64>,
    pub condition2: Vec<f64>,
    pub condition3: Vec<f64>,
    /// First grid index of the tail the verdict inspects.
    pub tail_start: usize,
    pub condition2_decreasing: bool,
    pub condition3_decreasing: bool,
    pub verdict: bool,
}

/// Fraction of the grid, counted from the end, that the verdict inspects.
pub const TAIL_FRACTION: f64 = 0.75;

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

/// Evaluates the two rate conditions over a grid:
///
/// ```text
/// cond2(t) = t^{-theta} M^2 [1 + artanh(M sqrt c) / (M sqrt c)]^2
/// cond3(t) = d P ln Q / t^{1 - 2 theta d},  P = (artanh(M sqrt c)/sqrt c)^4 d ln d,
/// ln Q = ln A + ln ln A,  ln A = ln(dt) + dt ln(artanh(M sqrt c)/sqrt c * t^theta)
/// ```
pub fn check_conditions(
    c: Curvature,
    d: usize,
    theta: f64,
    schedule: MSchedule,
    grid: &[f64],
) -> Result<ConditionTrace> {
    if c.is_euclidean() {
        return Err(CapacityError::EuclideanCurvature);
    }
    let dd = positive("d", d)? as f64;
    let limit = 1.0 / (2.0 * dd);
    if !(theta > 0.0 && theta < limit) {
        return Err(CapacityError::ThetaOutOfRange { theta, limit });
    }
    if grid.is_empty() || grid[0] <= 1.0 || !grid.windows(2).all(|w| w[1] > w[0]) || grid.iter().any(|t| !t.is_finite())
    {
        return Err(CapacityError::BadGrid);
    }
    let sc = c.value().sqrt();
    let mut trace = ConditionTrace {
        curvature: c.value(),
        d,
        theta,
        t: grid.to_vec(),
        m_t: Vec::with_capacity(grid.len()),
        condition2: Vec::with_capacity(grid.len()),
        condition3: Vec::with_capacity(grid.len()),
        tail_start: 0,
        condition2_decreasing: false,
        condition3_decreasing: false,
        verdict: false,
    };
    for &t in grid {
        let m = schedule.at(t, c);
        if !(m > 0.0 && m < c.radius()) {
            return Err(CapacityError::ScheduleOutsideBall { t, m, radius: c.radius() });
        }
        let x = (m * sc).min(ARTANH_CLAMP);
        let tangent = x.atanh() / sc;
        let cond2 = t.powf(-theta) * m * m * (1.0 + x.atanh() / x).powi(2);
        let p = tangent.powi(4) * dd * dd.ln();
        let dt = dd * t;
        let log_a = dt.ln() + dt * (tangent.ln() + theta * t.ln());
        let log_q = log_a + log_a.ln();
        let cond3 = dd * p * log_q / t.powf(1.0 - 2.0 * theta * dd);
        if !cond2.is_finite() || !cond3.is_finite() {
            return Err(CapacityError::Undefined { t });
        }
        trace.m_t.push(m);
        trace.condition2.push(cond2);
        trace.condition3.push(cond3);
    }
    let n = grid.len();
    let tail = ((TAIL_FRACTION * n as f64).ceil() as usize).clamp(1, n);
    trace.tail_start = n - tail;
    trace.condition2_decreasing = strictly_decreasing(&trace.condition2[trace.tail_start..]);
    trace.condition3_decreasing = strictly_decreasing(&trace.condition3[trace.tail_start..]);
    trace.verdict = trace.condition2_decreasing && trace.condition3_decreasing;
    Ok(trace)
}

/// Inputs of a [`BoundReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub heads: usize,
    pub head_size: usize,
    pub ffn_hidden: usize,
    pub dim: usize,
    pub vocab: usize,
    pub tokens: usize,
    pub eps: f64,
    pub m: f64,
    /// Output dimension used by the packing bound.
    pub k: usize,
    pub pdim_constant: f64,
    pub covering_constant: f64,
}

impl BoundInputs {
    /// Bound inputs for `cfg` with `K = d t`.
    pub fn for_config(cfg: &HyTConfig, eps: f64, m: f64) -> Self {
        BoundInputs {
            heads: cfg.heads,
            head_size: cfg.head_size,
            ffn_hidden: cfg.ffn_hidden,
            dim: cfg.dim,
            vocab: cfg.vocab,
            tokens: cfg.tokens,
            eps,
            m,
            k: cfg.dim * cfg.tokens,
            pdim_constant: 1.0,
            covering_constant: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub inputs: BoundInputs,
    pub n_param: u64,
    pub n_neuron: u64,
    pub pdim_bound: f64,
    pub log_packing_bound: f64,
    pub log_covering_bound: f64,
    pub condition_trace: Option<ConditionTrace>,
}

impl BoundReport {
    pub fn compute(inputs: BoundInputs, condition_trace: Option<ConditionTrace>) -> Result<Self> {
        let i = &inputs;
        let count = ArchitectureCount::new(i.heads, i.head_size, i.ffn_hidden, i.dim, i.vocab)?;
        let pdim = pdim_bound(i.heads, i.head_size, i.ffn_hidden, i.dim, i.vocab, i.pdim_constant)?;
        let log_packing_bound = log_packing_bound(i.eps, i.m, i.k, pdim.max(1.0))?;
        let log_covering_bound =
            log_covering_bound(i.eps, i.m, i.dim, i.tokens, count.n_param, count.n_neuron, i.covering_constant)?;
        Ok(BoundReport {
            n_param: count.n_param,
            n_neuron: count.n_neuron,
            pdim_bound: pdim,
            log_packing_bound,
            log_covering_bound,
            condition_trace,
            inputs,
        })
    }
}
