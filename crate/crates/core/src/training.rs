//! Risks, truncation, gradients and the optimizer loop.
//!
//! Risks average the squared tangent-space error over every token of every
//! sample, so values are comparable across sample counts and sequence lengths.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{kernels, Backend, Eval, Matrix, Tape};
use crate::geometry::Curvature;
use crate::model::{self, check_in_ball, HyTConfig, HyTParams, ModelError};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("dataset is empty")]
    Empty,
    #[error("sample {index}: {source}")]
    Sample { index: usize, source: ModelError },
    #[error("{0} outputs for {1} targets")]
    LengthMismatch(usize, usize),
    #[error("dataset (d={data_dim}, t={data_tokens}, c={data_curvature}) does not match model (d={dim}, t={tokens}, c={curvature})")]
    Incompatible {
        data_dim: usize,
        data_tokens: usize,
        data_curvature: Curvature,
        dim: usize,
        tokens: usize,
        curvature: Curvature,
    },
    #[error("invalid truncation level {0}")]
    InvalidTruncation(f64),
    #[error("truncation level {m} is not inside the ball radius {radius}")]
    TruncationOutsideBall { m: f64, radius: f64 },
    #[error("invalid optimizer setting: {0}")]
    InvalidOptimizer(String),
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("trace csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("trace io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainingError>;

/// One `(X, Y)` pair of `d x t` ball-valued token matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Matrix,
    pub y: Matrix,
}

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    Synthetic { seed: u64, teacher: String, noise_std: f64 },
    Ingested { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    items: Vec<Sample>,
    dim: usize,
    tokens: usize,
    curvature: Curvature,
    provenance: Provenance,
}

impl SequenceDataset {
    /// Validates shapes and ball membership of every token.
    pub fn new(
        items: Vec<Sample>,
        dim: usize,
        tokens: usize,
        curvature: Curvature,
        provenance: Provenance,
    ) -> Result<Self> {
        for (index, s) in items.iter().enumerate() {
            let check = |m: &Matrix, what: &str| -> std::result::Result<(), ModelError> {
                model::check_shape(what, m, (dim, tokens))?;
                check_in_ball(m, curvature)
            };
            check(&s.x, "X")
                .and_then(|_| check(&s.y, "Y"))
                .map_err(|source| TrainingError::Sample { index, source })?;
        }
        Ok(SequenceDataset { items, dim, tokens, curvature, provenance })
    }

    pub fn items(&self) -> &[Sample] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn curvature(&self) -> Curvature {
        self.curvature
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    fn check_against(&self, cfg: &HyTConfig) -> Result<()> {
        if self.dim != cfg.dim || self.tokens != cfg.tokens || self.curvature != cfg.curvature {
            return Err(TrainingError::Incompatible {
                data_dim: self.dim,
                data_tokens: self.tokens,
                data_curvature: self.curvature,
                dim: cfg.dim,
                tokens: cfg.tokens,
                curvature: cfg.curvature,
            });
        }
        Ok(())
    }
}

/// A positive clamp level for [`truncate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationLevel(f64);

impl TruncationLevel {
    pub fn new(m: f64) -> Result<Self> {
        if m > 0.0 && !m.is_nan() {
            Ok(TruncationLevel(m))
        } else {
            Err(TrainingError::InvalidTruncation(m))
        }
    }

    /// A ball-level threshold, required to lie strictly inside radius `1/sqrt(c)`.
    pub fn in_ball(m: f64, c: Curvature) -> Result<Self> {
        let level = Self::new(m)?;
        if !c.is_euclidean() && m >= c.radius() {
            return Err(TrainingError::TruncationOutsideBall { m, radius: c.radius() });
        }
        Ok(level)
    }

    /// `M_t = (1 - t^{-1/2}) / sqrt(c)`; `None` in the Euclidean case, where no finite
    /// radius exists and outputs are left untruncated.
    pub fn schedule(total_tokens: usize, c: Curvature) -> Option<Self> {
        if c.is_euclidean() || total_tokens < 2 {
            return None;
        }
        let m = (1.0 - (total_tokens as f64).powf(-0.5)) / c.value().sqrt();
        Some(TruncationLevel(m))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Image of a ball-level threshold in tangent coordinates: `artanh(sqrt(c) M) / sqrt(c)`.
    pub fn tangent_bound(self, c: Curvature) -> TruncationLevel {
        if c.is_euclidean() {
            return self;
        }
        let sc = c.value().sqrt();
        TruncationLevel((sc * self.0).min(crate::geometry::ARTANH_CLAMP).atanh() / sc)
    }
}

/// Componentwise `min(M, |z|) sign(z)`.
pub fn truncate(z: &Matrix, m: TruncationLevel) -> Matrix {
    kernels::clamp(z, m.0)
}

pub fn truncate_scalar(z: f64, m: TruncationLevel) -> f64 {
    z.clamp(-m.0, m.0)
}

fn risk_with(outputs: &[Matrix], targets: &[Matrix], c: Curvature, m: Option<TruncationLevel>) -> Result<f64> {
    if outputs.len() != targets.len() {
        return Err(TrainingError::LengthMismatch(outputs.len(), targets.len()));
    }
    if outputs.is_empty() {
        return Err(TrainingError::Empty);
    }
    let mut total = 0.0;
    let mut tokens = 0usize;
    for (f, y) in outputs.iter().zip(targets) {
        model::check_shape("output", f, y.shape())?;
        let mut target = kernels::log0_cols(y, c);
        let out = match m {
            Some(m) => {
                target = truncate(&target, m);
                truncate(f, m)
            }
            None => f.clone(),
        };
        total += (out - target).norm_squared();
        tokens += f.ncols();
    }
    Ok(total / tokens as f64)
}

/// Mean over samples and tokens of `||f(X_i) - log0(Y_i)||^2`.
pub fn empirical_risk(outputs: &[Matrix], targets: &[Matrix], c: Curvature) -> Result<f64> {
    risk_with(outputs, targets, c, None)
}

/// [`empirical_risk`] with both outputs and tangent targets clamped at `m`.
pub fn truncated_empirical_risk(
    outputs: &[Matrix],
    targets: &[Matrix],
    m: TruncationLevel,
    c: Curvature,
) -> Result<f64> {
    risk_with(outputs, targets, c, Some(m))
}

/// Model outputs `f_P(X_i)` for every sample.
pub fn predict(params: &HyTParams, cfg: &HyTConfig, data: &SequenceDataset) -> Result<Vec<Matrix>> {
    data.check_against(cfg)?;
    params.check_shapes(cfg)?;
    data.items.iter().map(|s| Ok(model::encode(&mut Eval, params, cfg, &s.x, true)?)).collect()
}

/// Plain and (optionally) truncated risk of a model on a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskSummary {
    pub risk: f64,
    pub truncated_risk: Option<f64>,
}

pub fn evaluate(
    params: &HyTParams,
    cfg: &HyTConfig,
    data: &SequenceDataset,
    truncation: Option<TruncationLevel>,
) -> Result<RiskSummary> {
    let outputs = predict(params, cfg, data)?;
    let targets: Vec<Matrix> = data.items.iter().map(|s| s.y.clone()).collect();
    let risk = empirical_risk(&outputs, &targets, cfg.curvature)?;
    let truncated_risk =
        truncation.map(|m| truncated_empirical_risk(&outputs, &targets, m, cfg.curvature)).transpose()?;
    Ok(RiskSummary { risk, truncated_risk })
}

/// Which objective [`gradients`] differentiates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Loss {
    Plain,
    /// Outputs and tangent targets clamped at the level before the squared error.
    Truncated(TruncationLevel),
}

#[derive(Debug, Clone)]
pub struct GradientResult {
    pub loss: f64,
    pub grads: HyTParams,
}

/// Exact gradient of the batch-mean token loss with respect to every tensor.
/// The clamp contributes derivative 1 strictly inside `(-M, M)` and 0 elsewhere.
pub fn gradients(params: &HyTParams, cfg: &HyTConfig, batch: &[Sample], loss: Loss) -> Result<GradientResult> {
    if batch.is_empty() {
        return Err(TrainingError::Empty);
    }
    let mut tape = Tape::new();
    let vars = params.map(|m| tape.leaf(m.clone()));
    let mut total = None;
    for s in batch {
        let x = tape.leaf(s.x.clone());
        let out = model::encode(&mut tape, &vars, cfg, &x, true)?;
        let target = kernels::log0_cols(&s.y, cfg.curvature);
        let err = match loss {
            Loss::Plain => tape.squared_error(out, target),
            Loss::Truncated(m) => {
                let clamped = tape.clamp(out, m.0);
                tape.squared_error(clamped, truncate(&target, m))
            }
        };
        total = Some(match total {
            None => err,
            Some(acc) => tape.add(&acc, &err),
        });
    }
    let tokens = batch.len() * cfg.tokens;
    let mean = tape.scale(&total.expect("non-empty batch"), 1.0 / tokens as f64);
    let value = tape.value(&mean)[(0, 0)];
    if !value.is_finite() {
        return Err(TrainingError::NonFiniteLoss);
    }
    let g = tape.backward(mean, 1.0);
    let grads = vars.map(|v| g.get_or_zeros(*v, tape.value(v)));
    Ok(GradientResult { loss: value, grads })
}

pub const DEFAULT_WEIGHT_DECAY: f64 = 5e-4;
/// The alternative weight decay quoted in the experimental prose.
pub const ALT_WEIGHT_DECAY: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Record wall-clock milliseconds in the trace. Off keeps traces byte-reproducible.
    #[serde(default)]
    pub timing: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-3,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            batch_size: 16,
            epochs: 50,
            seed: 0,
            timing: false,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TrainingError::InvalidOptimizer(format!("learning rate {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainingError::InvalidOptimizer(format!("weight decay {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(TrainingError::InvalidOptimizer("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay: `p <- p (1 - lr wd)` followed by the Adam step.
#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: HyTParams,
    v: HyTParams,
}

impl AdamW {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(params: &HyTParams, lr: f64, weight_decay: f64) -> Self {
        let zeros = params.map(|m| Matrix::zeros(m.nrows(), m.ncols()));
        AdamW {
            lr,
            weight_decay,
            beta1: Self::BETA1,
            beta2: Self::BETA2,
            eps: Self::EPS,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut HyTParams, grads: &HyTParams) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let decay = 1.0 - lr * self.weight_decay;
        let g = grads.named();
        for (((p, m), v), (_, g)) in
            params.tensors_mut().into_iter().zip(self.m.tensors_mut()).zip(self.v.tensors_mut()).zip(g)
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                p[i] = p[i] * decay - lr * update;
            }
        }
    }
}

/// One trace line. Epoch 0 is the initial model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub epoch: usize,
    pub train_risk: f64,
    pub test_risk: Option<f64>,
    pub truncated_test_risk: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: HyTParams,
    pub trace: Vec<TraceRecord>,
}

/// Initializes from `opt.seed` and trains. See [`train_from`].
pub fn train(
    data: &SequenceDataset,
    test: Option<&SequenceDataset>,
    cfg: &HyTConfig,
    opt: &OptimizerConfig,
    truncation: Option<TruncationLevel>,
) -> Result<TrainOutcome> {
    let params = model::init_params(cfg, opt.seed, model::default_scale(cfg))?;
    train_from(params, data, test, cfg, opt, truncation)
}

/// Minibatch AdamW on the plain empirical risk. Each epoch shuffles the samples
/// with a stream seeded by `opt.seed`. `truncation`, in tangent units, is applied
/// only when evaluating the test set.
pub fn train_from(
    mut params: HyTParams,
    data: &SequenceDataset,
    test: Option<&SequenceDataset>,
    cfg: &HyTConfig,
    opt: &OptimizerConfig,
    truncation: Option<TruncationLevel>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    opt.validate()?;
    params.check_shapes(cfg)?;
    data.check_against(cfg)?;
    if data.is_empty() {
        return Err(TrainingError::Empty);
    }
    if let Some(t) = test {
        t.check_against(cfg)?;
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let mut adam = AdamW::new(&params, opt.lr, opt.weight_decay);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(opt.epochs + 1);

    let record = |params: &HyTParams, epoch: usize| -> Result<TraceRecord> {
        let train_risk = evaluate(params, cfg, data, None).map_err(|_| TrainingError::Diverged { epoch })?.risk;
        if !train_risk.is_finite() {
            return Err(TrainingError::Diverged { epoch });
        }
        let (test_risk, truncated_test_risk) = match test {
            Some(t) if !t.is_empty() => {
                let r = evaluate(params, cfg, t, truncation).map_err(|_| TrainingError::Diverged { epoch })?;
                (Some(r.risk), r.truncated_risk)
            }
            _ => (None, None),
        };
        let wall_ms = if opt.timing { start.elapsed().as_millis() as u64 } else { 0 };
        Ok(TraceRecord { epoch, train_risk, test_risk, truncated_test_risk, wall_ms })
    };

    trace.push(record(&params, 0)?);
    let mut batch = Vec::with_capacity(opt.batch_size);
    for epoch in 1..=opt.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(opt.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| data.items[i].clone()));
            let g = match gradients(&params, cfg, &batch, Loss::Plain) {
                Ok(g) => g,
                Err(TrainingError::NonFiniteLoss | TrainingError::Model(ModelError::NonFinite { .. })) => {
                    return Err(TrainingError::Diverged { epoch })
                }
                Err(e) => return Err(e),
            };
            adam.step(&mut params, &g.grads);
            params.project_positional(cfg.curvature);
            if !params.is_finite() {
                return Err(TrainingError::Diverged { epoch });
            }
        }
        trace.push(record(&params, epoch)?);
    }
    Ok(TrainOutcome { params, trace })
}

/// Writes the trace as CSV with a header row.
pub fn write_trace_csv<W: Write>(trace: &[TraceRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in trace {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn curv(c: f64) -> Curvature {
        Curvature::new(c).unwrap()
    }

    fn random_ball(rng: &mut ChaCha8Rng, d: usize, t: usize, c: Curvature, scale: f64) -> Matrix {
        let m = Matrix::from_fn(d, t, |_, _| rng.random_range(-scale..scale));
        kernels::exp0_cols(&m, c)
    }

    fn dataset(cfg: &HyTConfig, n: usize, seed: u64) -> SequenceDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let items = (0..n)
            .map(|_| Sample {
                x: random_ball(&mut rng, cfg.dim, cfg.tokens, cfg.curvature, 1.0),
                y: random_ball(&mut rng, cfg.dim, cfg.tokens, cfg.curvature, 0.5),
            })
            .collect();
        let prov = Provenance::Synthetic { seed, teacher: "uniform".into(), noise_std: 0.0 };
        SequenceDataset::new(items, cfg.dim, cfg.tokens, cfg.curvature, prov).unwrap()
    }

    #[test]
    fn truncation_examples() {
        let one = TruncationLevel::new(1.0).unwrap();
        assert_eq!(truncate_scalar(0.3, one), 0.3);
        assert_eq!(truncate_scalar(-2.5, one), -1.0);
        assert!(TruncationLevel::new(0.0).is_err());
        assert!(TruncationLevel::in_ball(1.0, curv(1.0)).is_err());
        assert!(TruncationLevel::in_ball(0.99, curv(1.0)).is_ok());
        assert!(TruncationLevel::schedule(256, Curvature::EUCLIDEAN).is_none());
        let m = TruncationLevel::schedule(256, curv(4.0)).unwrap();
        assert!((m.value() - (1.0 - 1.0 / 16.0) / 2.0).abs() < 1e-15);
        assert!((m.tangent_bound(curv(4.0)).value() - (0.9375f64).atanh() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn risk_examples() {
        let c = Curvature::EUCLIDEAN;
        let f = vec![Matrix::from_element(1, 1, 0.5)];
        let y = vec![Matrix::from_element(1, 1, 0.2)];
        assert!((empirical_risk(&f, &y, c).unwrap() - 0.09).abs() < 1e-15);
        let f = vec![Matrix::from_element(1, 1, 2.0)];
        let y = vec![Matrix::from_element(1, 1, 3.0)];
        let one = TruncationLevel::new(1.0).unwrap();
        assert_eq!(truncated_empirical_risk(&f, &y, one, c).unwrap(), 0.0);
        assert!(matches!(empirical_risk(&[], &[], c), Err(TrainingError::Empty)));
    }

    #[test]
    fn risk_matches_log_targets_and_is_order_invariant() {
        let c = curv(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ys: Vec<Matrix> = (0..5).map(|_| random_ball(&mut rng, 3, 4, c, 1.0)).collect();
        let exact: Vec<Matrix> = ys.iter().map(|y| kernels::log0_cols(y, c)).collect();
        assert!(empirical_risk(&exact, &ys, c).unwrap() < 1e-28);
        let fs: Vec<Matrix> = (0..5).map(|_| random_ball(&mut rng, 3, 4, c, 1.0)).collect();
        let a = empirical_risk(&fs, &ys, c).unwrap();
        let (mut fr, mut yr) = (fs.clone(), ys.clone());
        fr.reverse();
        yr.reverse();
        assert!((a - empirical_risk(&fr, &yr, c).unwrap()).abs() < 1e-15);
        let big = TruncationLevel::new(1e9).unwrap();
        assert_eq!(truncated_empirical_risk(&fs, &ys, big, c).unwrap(), a);
        let tiny = TruncationLevel::new(1e-12).unwrap();
        assert!(truncated_empirical_risk(&fs, &ys, tiny, c).unwrap() < 1e-22);
    }

    #[test]
    fn euclidean_output_bias_gradient_is_linear() {
        // c = 0 with zero weights: f(X) = X + E + l2 1^T, so dL/dl2 = 2/(nt) sum(X + E + l2 - Y).
        let cfg = HyTConfig { curvature: Curvature::EUCLIDEAN, dim: 3, tokens: 4, ..HyTConfig::default() };
        let data = dataset(&cfg, 5, 11);
        let mut p = HyTParams::zeros(&cfg);
        p.positional = Matrix::from_fn(3, 4, |i, j| 0.01 * (i + 2 * j) as f64);
        p.blocks[0].ffn_out_bias = Matrix::from_column_slice(3, 1, &[0.3, -0.2, 0.1]);
        let g = gradients(&p, &cfg, data.items(), Loss::Plain).unwrap();
        let mut expected = Matrix::zeros(3, 1);
        for s in data.items() {
            let r = &s.x + &p.positional - &s.y;
            for j in 0..4 {
                expected += r.column(j) + &p.blocks[0].ffn_out_bias;
            }
        }
        expected *= 2.0 / 20.0;
        assert!((&g.grads.blocks[0].ffn_out_bias - expected).amax() < 1e-14);
    }

    #[test]
    fn output_bias_descent_is_monotone() {
        let cfg = HyTConfig { curvature: Curvature::EUCLIDEAN, ..HyTConfig::default() };
        let data = dataset(&cfg, 8, 2);
        let mut p = HyTParams::zeros(&cfg);
        let mut prev = f64::INFINITY;
        for _ in 0..20 {
            let g = gradients(&p, &cfg, data.items(), Loss::Plain).unwrap();
            assert!(g.loss < prev);
            prev = g.loss;
            p.blocks[0].ffn_out_bias -= 0.1 * &g.grads.blocks[0].ffn_out_bias;
        }
    }

    #[test]
    fn gradient_vanishes_at_teacher() {
        let cfg = HyTConfig::default();
        let teacher = model::init_params(&cfg, 5, 0.7).unwrap();
        let mut data = dataset(&cfg, 6, 4);
        for s in &mut data.items {
            let f = model::forward(&teacher, &cfg, &s.x).unwrap();
            s.y = kernels::exp0_cols(&f, cfg.curvature);
        }
        let g = gradients(&teacher, &cfg, data.items(), Loss::Plain).unwrap();
        let norm: f64 = g.grads.named().iter().map(|(_, m)| m.norm_squared()).sum::<f64>().sqrt();
        assert!(norm < 1e-8, "{norm}");
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let cfg = HyTConfig::default();
        let data = dataset(&cfg, 20, 1);
        let opt = OptimizerConfig { lr: 0.0, epochs: 3, ..OptimizerConfig::default() };
        let init = model::init_params(&cfg, 0, model::default_scale(&cfg)).unwrap();
        let out = train_from(init.clone(), &data, None, &cfg, &opt, None).unwrap();
        assert_eq!(out.params, init);
    }

    #[test]
    fn training_is_deterministic_and_traced() {
        let cfg = HyTConfig::default();
        let data = dataset(&cfg, 40, 1);
        let test = dataset(&cfg, 10, 2);
        let opt = OptimizerConfig { epochs: 4, lr: 1e-2, ..OptimizerConfig::default() };
        let m = Some(TruncationLevel::new(1.0).unwrap());
        let a = train(&data, Some(&test), &cfg, &opt, m).unwrap();
        let b = train(&data, Some(&test), &cfg, &opt, m).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.params, b.params);
        assert_eq!(a.trace.len(), 5);
        assert!(a.trace.iter().all(|r| r.truncated_test_risk.is_some() && r.wall_ms == 0));
        let mut buf = Vec::new();
        write_trace_csv(&a.trace, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("epoch,train_risk,test_risk,truncated_test_risk,wall_ms\n"));
        assert_eq!(text.lines().count(), 6);
    }

    #[test]
    fn divergence_names_the_epoch() {
        let cfg = HyTConfig::default();
        let data = dataset(&cfg, 16, 1);
        let opt = OptimizerConfig { lr: 1e300, epochs: 3, ..OptimizerConfig::default() };
        let err = train(&data, None, &cfg, &opt, None).unwrap_err();
        assert!(matches!(err, TrainingError::Diverged { epoch: 1 }), "{err}");
    }

    #[test]
    fn rejects_mismatched_data() {
        let cfg = HyTConfig::default();
        let data = dataset(&cfg, 4, 1);
        let other = cfg.with_curvature(curv(2.0));
        assert!(matches!(
            train(&data, None, &other, &OptimizerConfig::default(), None),
            Err(TrainingError::Incompatible { .. })
        ));
        let bad = Sample { x: Matrix::from_element(2, 4, 0.9), y: Matrix::zeros(2, 4) };
        assert!(SequenceDataset::new(vec![bad], 2, 4, curv(1.0), Provenance::Ingested { path: "x".into() }).is_err());
    }
}
