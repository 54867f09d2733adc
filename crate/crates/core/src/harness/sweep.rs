use std::io::{Read, Write};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{synthesize, Teacher, TeacherSpec};
use super::{cell_seed, stream_seed, worker_pool, HarnessError, Result};
use crate::autodiff::Matrix;
use crate::geometry::Curvature;
use crate::model;
use crate::training::{
    self, empirical_risk, predict, truncate, truncated_empirical_risk, OptimizerConfig, TrainingError, TruncationLevel,
};

/// The four curvatures of the reference experiment.
pub const DEFAULT_CURVATURES: [f64; 4] = [0.0, 1e-4, 1.0, 10.0];

const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;
const OPT_STREAM: u64 = 3;

/// How the student is initialized in each cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudentInit {
    /// Fresh seeded initialization.
    Random,
    /// Start from the teacher's parameters (random-HyT teachers only).
    Teacher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Teacher; its `config` is also the student architecture.
    pub teacher: TeacherSpec,
    pub curvatures: Vec<Curvature>,
    /// Total training tokens per cell. Each cell uses `n = T / t` sequences.
    pub token_grid: Vec<usize>,
    pub repetitions: usize,
    pub optimizer: OptimizerConfig,
    /// Held-out tokens used to estimate risks; at least `10^4`.
    pub test_tokens: usize,
    pub seed: u64,
    pub student_init: StudentInit,
    /// Apply `pi_M` with the default schedule when scoring held-out outputs.
    #[serde(default = "enabled")]
    pub truncate: bool,
}

fn enabled() -> bool {
    true
}

/// One `(curvature, t, seed)` cell. Risks are NaN when training diverged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub curvature: f64,
    pub d: usize,
    /// Total training tokens.
    pub t: usize,
    pub n: usize,
    pub seed: u64,
    pub train_risk: f64,
    pub test_risk: f64,
    pub trunc_test_risk: f64,
    pub excess_risk: f64,
    pub wall_ms: u64,
}

/// Log-log summary of one curvature's records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureFit {
    pub curvature: f64,
    /// Least-squares slope of `ln excess` against `ln t` over all finite records.
    pub slope: f64,
    pub intercept: f64,
    /// `-1/(2d)`.
    pub reference_exponent: f64,
    /// `C` with `C t_min^{-1/(2d)}` equal to the mean excess risk at the smallest `t`.
    pub bound_constant: f64,
    pub t: Vec<usize>,
    pub mean_excess: Vec<f64>,
}

impl CurvatureFit {
    pub fn reference(&self, t: f64) -> f64 {
        self.bound_constant * t.powf(self.reference_exponent)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub records: Vec<SweepRecord>,
    pub fits: Vec<CurvatureFit>,
}

fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return (f64::NAN, f64::NAN);
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

impl SweepReport {
    /// Fits per curvature, in order of first appearance.
    pub fn from_records(records: Vec<SweepRecord>) -> Self {
        let mut curvatures: Vec<f64> = Vec::new();
        for r in &records {
            if !curvatures.iter().any(|c| c.to_bits() == r.curvature.to_bits()) {
                curvatures.push(r.curvature);
            }
        }
        let fits = curvatures
            .into_iter()
            .map(|c| {
                let rows: Vec<&SweepRecord> = records.iter().filter(|r| r.curvature.to_bits() == c.to_bits()).collect();
                let d = rows[0].d;
                let mut grid: Vec<usize> = rows.iter().map(|r| r.t).collect();
                grid.sort_unstable();
                grid.dedup();
                let mean_excess: Vec<f64> = grid
                    .iter()
                    .map(|&t| {
                        let v: Vec<f64> = rows.iter().filter(|r| r.t == t).map(|r| r.excess_risk).collect();
                        v.iter().sum::<f64>() / v.len() as f64
                    })
                    .collect();
                let (xs, ys): (Vec<f64>, Vec<f64>) = rows
                    .iter()
                    .filter(|r| r.excess_risk.is_finite() && r.excess_risk > 0.0)
                    .map(|r| ((r.t as f64).ln(), r.excess_risk.ln()))
                    .unzip();
                let (slope, intercept) = least_squares(&xs, &ys);
                let reference_exponent = -1.0 / (2.0 * d as f64);
                let bound_constant = mean_excess[0] * (grid[0] as f64).powf(-reference_exponent);
                CurvatureFit {
                    curvature: c,
                    slope,
                    intercept,
                    reference_exponent,
                    bound_constant,
                    t: grid,
                    mean_excess,
                }
            })
            .collect();
        SweepReport { records, fits }
    }
}

struct Cell {
    curvature: Curvature,
    tokens: usize,
    repetition: usize,
}

/// Mean over tokens of `||pi_M f(X) - f_rho(X)||^2`.
fn excess_risk(outputs: &[Matrix], clean: &[Matrix], m: Option<TruncationLevel>) -> f64 {
    let mut total = 0.0;
    let mut tokens = 0;
    for (f, g) in outputs.iter().zip(clean) {
        let f = match m {
            Some(m) => truncate(f, m),
            None => f.clone(),
        };
        total += (f - g).norm_squared();
        tokens += g.ncols();
    }
    total / tokens as f64
}

fn run_cell(cfg: &SweepConfig, teacher: &Teacher, cell: &Cell) -> Result<SweepRecord> {
    let start = Instant::now();
    let spec = teacher.spec();
    let t = spec.config.tokens;
    let c = cell.curvature;
    let seed = cell_seed(cfg.seed, c, cell.tokens, cell.repetition);
    let n = (cell.tokens / t).max(1);
    let n_test = cfg.test_tokens.div_ceil(t);
    let train = synthesize(teacher, n, c, stream_seed(seed, TRAIN_STREAM))?;
    let test = synthesize(teacher, n_test, c, stream_seed(seed, TEST_STREAM))?;
    let student_cfg = spec.config.with_curvature(c);
    let opt = OptimizerConfig { seed: stream_seed(seed, OPT_STREAM), ..cfg.optimizer.clone() };
    let truncation = match cfg.truncate {
        true => TruncationLevel::schedule(cell.tokens, c).map(|m| m.tangent_bound(c)),
        false => None,
    };

    let init = match cfg.student_init {
        StudentInit::Random => model::init_params(&student_cfg, opt.seed, model::default_scale(&student_cfg))?,
        StudentInit::Teacher => teacher
            .params()
            .cloned()
            .ok_or_else(|| HarnessError::Invalid("teacher initialization needs a random-HyT teacher".into()))?,
    };
    let mut record = SweepRecord {
        curvature: c.value(),
        d: spec.config.dim,
        t: cell.tokens,
        n,
        seed,
        train_risk: f64::NAN,
        test_risk: f64::NAN,
        trunc_test_risk: f64::NAN,
        excess_risk: f64::NAN,
        wall_ms: 0,
    };
    match training::train_from(init, &train.dataset, None, &student_cfg, &opt, None) {
        Ok(out) => {
            let outputs = predict(&out.params, &student_cfg, &test.dataset)?;
            let targets: Vec<Matrix> = test.dataset.items().iter().map(|s| s.y.clone()).collect();
            record.train_risk = out.trace.last().map_or(f64::NAN, |r| r.train_risk);
            record.test_risk = empirical_risk(&outputs, &targets, c)?;
            record.trunc_test_risk = match truncation {
                Some(m) => truncated_empirical_risk(&outputs, &targets, m, c)?,
                None => record.test_risk,
            };
            record.excess_risk = excess_risk(&outputs, &test.clean, truncation);
        }
        Err(TrainingError::Diverged { epoch }) => {
            log::warn!("cell c={} t={} rep={} diverged at epoch {epoch}", c, cell.tokens, cell.repetition);
        }
        Err(e) => return Err(e.into()),
    }
    if cfg.optimizer.timing {
        record.wall_ms = start.elapsed().as_millis() as u64;
    }
    Ok(record)
}

/// Trains one student per `(curvature, T, repetition)` cell and estimates its
/// excess risk against the teacher on a held-out set. Cells run on the worker
/// pool; records come back in grid order regardless of scheduling.
pub fn consistency_sweep(cfg: &SweepConfig) -> Result<SweepReport> {
    if cfg.curvatures.is_empty() || cfg.token_grid.is_empty() {
        return Err(HarnessError::Invalid("sweep needs at least one curvature and one grid point".into()));
    }
    if !cfg.token_grid.windows(2).all(|w| w[1] > w[0]) {
        return Err(HarnessError::Invalid("token grid must be strictly increasing".into()));
    }
    if cfg.repetitions == 0 {
        return Err(HarnessError::Invalid("repetitions must be at least 1".into()));
    }
    if cfg.test_tokens < 10_000 {
        return Err(HarnessError::Invalid(format!("held-out set of {} tokens is below 10^4", cfg.test_tokens)));
    }
    cfg.optimizer.validate()?;
    let teacher = Teacher::new(&cfg.teacher)?;
    let mut cells = Vec::new();
    for &curvature in &cfg.curvatures {
        for &tokens in &cfg.token_grid {
            for repetition in 0..cfg.repetitions {
                cells.push(Cell { curvature, tokens, repetition });
            }
        }
    }
    let pool = worker_pool()?;
    let records =
        pool.install(|| cells.par_iter().map(|cell| run_cell(cfg, &teacher, cell)).collect::<Result<Vec<_>>>())?;
    Ok(SweepReport::from_records(records))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub teacher: TeacherSpec,
    pub curvatures: Vec<Curvature>,
    pub samples: usize,
    pub test_samples: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

/// One point of a test-RMSE trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub curvature: f64,
    pub test_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub rows: Vec<TraceRow>,
    /// Curvatures whose training diverged, with the epoch.
    pub diverged: Vec<(f64, usize)>,
}

impl CompareReport {
    pub fn trace(&self, c: f64) -> Vec<f64> {
        self.rows.iter().filter(|r| r.curvature.to_bits() == c.to_bits()).map(|r| r.test_rmse).collect()
    }
}

/// Trains the same architecture, initialization and tangent-space data at every
/// curvature and records the per-epoch test RMSE.
pub fn curvature_compare(cfg: &CompareConfig) -> Result<CompareReport> {
    if cfg.curvatures.len() < 2 {
        return Err(HarnessError::Invalid("curvature comparison needs at least two curvatures".into()));
    }
    if cfg.samples == 0 || cfg.test_samples == 0 {
        return Err(HarnessError::Invalid("sample counts must be positive".into()));
    }
    cfg.optimizer.validate()?;
    let teacher = Teacher::new(&cfg.teacher)?;
    let run = |c: Curvature| -> Result<std::result::Result<Vec<TraceRow>, usize>> {
        let train = synthesize(&teacher, cfg.samples, c, stream_seed(cfg.seed, TRAIN_STREAM))?;
        let test = synthesize(&teacher, cfg.test_samples, c, stream_seed(cfg.seed, TEST_STREAM))?;
        let student = cfg.teacher.config.with_curvature(c);
        let opt = OptimizerConfig { seed: stream_seed(cfg.seed, OPT_STREAM), ..cfg.optimizer.clone() };
        match training::train(&train.dataset, Some(&test.dataset), &student, &opt, None) {
            Ok(out) => Ok(Ok(out
                .trace
                .iter()
                .map(|r| TraceRow {
                    epoch: r.epoch,
                    curvature: c.value(),
                    test_rmse: r.test_risk.unwrap_or(f64::NAN).sqrt(),
                })
                .collect())),
            Err(TrainingError::Diverged { epoch }) => Ok(Err(epoch)),
            Err(e) => Err(e.into()),
        }
    };
    let pool = worker_pool()?;
    let results = pool.install(|| cfg.curvatures.par_iter().map(|&c| run(c)).collect::<Result<Vec<_>>>())?;
    let mut report = CompareReport { rows: Vec::new(), diverged: Vec::new() };
    for (c, r) in cfg.curvatures.iter().zip(results) {
        match r {
            Ok(rows) => report.rows.extend(rows),
            Err(epoch) => report.diverged.push((c.value(), epoch)),
        }
    }
    Ok(report)
}

fn write_rows<T: Serialize, W: Write>(rows: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows<T: serde::de::DeserializeOwned, R: Read>(input: R) -> Result<Vec<T>> {
    csv::Reader::from_reader(input).deserialize().map(|r| r.map_err(HarnessError::from)).collect()
}

/// `curvature,d,t,n,seed,train_risk,test_risk,trunc_test_risk,excess_risk,wall_ms`
pub fn write_sweep_csv<W: Write>(records: &[SweepRecord], out: W) -> Result<()> {
    write_rows(records, out)
}

pub fn read_sweep_csv<R: Read>(input: R) -> Result<Vec<SweepRecord>> {
    read_rows(input)
}

/// `epoch,curvature,test_rmse`
pub fn write_trace_csv<W: Write>(rows: &[TraceRow], out: W) -> Result<()> {
    write_rows(rows, out)
}

pub fn read_trace_csv<R: Read>(input: R) -> Result<Vec<TraceRow>> {
    read_rows(input)
}
