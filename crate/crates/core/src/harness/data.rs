use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::autodiff::{kernels, Matrix};
use crate::geometry::{norm, Curvature};
use crate::model::{self, HyTConfig, HyTParams};
use crate::training::{Provenance, Sample, SequenceDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherKind {
    /// A randomly initialized HyT evaluated at the spec's curvature.
    RandomHyt,
    /// `f(Z)_k = tanh(A z_k + B mean_j z_j)` on tangent coordinates.
    SmoothMap,
}

/// Ground-truth regression function, regenerated deterministically from
/// `(kind, seed, config)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSpec {
    pub kind: TeacherKind,
    pub seed: u64,
    /// Architecture of the teacher. Its curvature is the reference geometry the
    /// teacher is evaluated in; `dim` and `tokens` fix the data shape.
    pub config: HyTConfig,
    /// Standard deviation of the tangent-space target noise.
    pub noise_std: f64,
    /// Weight scale of a random-HyT teacher; defaults to `1/sqrt(d)`.
    #[serde(default)]
    pub weight_scale: Option<f64>,
}

impl TeacherSpec {
    pub fn random_hyt(config: HyTConfig, seed: u64, noise_std: f64) -> Self {
        TeacherSpec { kind: TeacherKind::RandomHyt, seed, config, noise_std, weight_scale: None }
    }

    pub fn describe(&self) -> String {
        serde_json::to_string(self).expect("teacher spec serializes")
    }
}

#[derive(Debug, Clone)]
enum TeacherFn {
    Hyt(HyTParams),
    Smooth { a: Matrix, b: Matrix },
}

/// An instantiated teacher mapping tangent token coordinates to tangent outputs.
#[derive(Debug, Clone)]
pub struct Teacher {
    spec: TeacherSpec,
    f: TeacherFn,
}

impl Teacher {
    pub fn new(spec: &TeacherSpec) -> Result<Self> {
        spec.config.validate()?;
        if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite()) {
            return Err(HarnessError::Invalid(format!("noise std {}", spec.noise_std)));
        }
        let scale = spec.weight_scale.unwrap_or_else(|| model::default_scale(&spec.config));
        let f = match spec.kind {
            TeacherKind::RandomHyt => TeacherFn::Hyt(model::init_params(&spec.config, spec.seed, scale)?),
            TeacherKind::SmoothMap => {
                let d = spec.config.dim;
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                let mut draw = || Matrix::from_fn(d, d, |_, _| rng.random_range(-scale..=scale));
                let a = draw();
                let b = draw();
                TeacherFn::Smooth { a, b }
            }
        };
        Ok(Teacher { spec: spec.clone(), f })
    }

    pub fn spec(&self) -> &TeacherSpec {
        &self.spec
    }

    /// The teacher's parameters when it is a random HyT.
    pub fn params(&self) -> Option<&HyTParams> {
        match &self.f {
            TeacherFn::Hyt(p) => Some(p),
            TeacherFn::Smooth { .. } => None,
        }
    }

    /// `f_rho` on tangent coordinates `Z` (`d x t`).
    pub fn tangent_output(&self, z: &Matrix) -> Result<Matrix> {
        match &self.f {
            TeacherFn::Hyt(p) => {
                let cfg = &self.spec.config;
                let x = kernels::exp0_cols(z, cfg.curvature);
                Ok(model::forward(p, cfg, &x)?)
            }
            TeacherFn::Smooth { a, b } => {
                let mean = z.column_mean();
                let shared = b * mean;
                let mut out = a * z;
                for mut col in out.column_iter_mut() {
                    col += &shared;
                    col.apply(|v| *v = v.tanh());
                }
                Ok(out)
            }
        }
    }
}

/// A generated dataset together with the noise-free teacher outputs `f_rho(X_i)`.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub dataset: SequenceDataset,
    pub clean: Vec<Matrix>,
}

/// Samples `n` sequences: token tangents `Z ~ N(0, I_d)`, inputs `X = exp0(Z)`,
/// targets `Y = exp0(f_rho + noise)` with noise `N(0, sigma^2 I)`.
///
/// The teacher always sees `Z` through its own reference curvature, so datasets
/// generated with the same seed at different curvatures share tangent coordinates.
pub fn synthesize(teacher: &Teacher, n: usize, curvature: Curvature, seed: u64) -> Result<Synthetic> {
    let spec = teacher.spec();
    let (d, t) = (spec.config.dim, spec.config.tokens);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut items = Vec::with_capacity(n);
    let mut clean = Vec::with_capacity(n);
    for _ in 0..n {
        let z = Matrix::from_fn(d, t, |_, _| unit.sample(&mut rng));
        let noise = Matrix::from_fn(d, t, |_, _| unit.sample(&mut rng) * spec.noise_std);
        let f = teacher.tangent_output(&z)?;
        let x = kernels::exp0_cols(&z, curvature);
        let y = kernels::exp0_cols(&(&f + noise), curvature);
        items.push(Sample { x, y });
        clean.push(f);
    }
    let provenance = Provenance::Synthetic { seed, teacher: spec.describe(), noise_std: spec.noise_std };
    let dataset = SequenceDataset::new(items, d, t, curvature, provenance)?;
    Ok(Synthetic { dataset, clean })
}

/// [`synthesize`] without the clean outputs.
pub fn generate_synthetic(teacher: &TeacherSpec, n: usize, curvature: Curvature, seed: u64) -> Result<SequenceDataset> {
    Ok(synthesize(&Teacher::new(teacher)?, n, curvature, seed)?.dataset)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Csv,
    Jsonl,
}

impl std::str::FromStr for DataFormat {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(DataFormat::Csv),
            "jsonl" => Ok(DataFormat::Jsonl),
            other => Err(HarnessError::Invalid(format!("unknown data format {other:?}"))),
        }
    }
}

/// An ingested dataset and the number of points that had to be pulled inside the ball.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub dataset: SequenceDataset,
    pub rescaled: usize,
}

fn row_to_sample(
    fields: &[f64],
    line: usize,
    d: usize,
    t: usize,
    c: Curvature,
    rescaled: &mut usize,
) -> Result<Sample> {
    let expected = 2 * d * t;
    if fields.len() != expected {
        return Err(HarnessError::FieldCount { line, expected, got: fields.len() });
    }
    if fields.iter().any(|v| !v.is_finite()) {
        return Err(HarnessError::Parse { line, message: "non-finite value".into() });
    }
    let mut x = Matrix::from_column_slice(d, t, &fields[..d * t]);
    let mut y = Matrix::from_column_slice(d, t, &fields[d * t..]);
    for m in [&mut x, &mut y] {
        for col in m.as_mut_slice().chunks_exact_mut(d) {
            if !c.is_euclidean() && norm(col) > c.max_norm() {
                c.project(col);
                *rescaled += 1;
            }
        }
    }
    Ok(Sample { x, y })
}

/// Reads one sequence per row: `2 d t` numbers, `X` then `Y`, each column-major by token.
/// CSV rows have no header; JSONL rows are JSON arrays. Blank lines are skipped.
pub fn ingest(path: &Path, format: DataFormat, d: usize, t: usize, c: Curvature) -> Result<Ingested> {
    let file = std::fs::File::open(path)?;
    let provenance = Provenance::Ingested { path: path.to_path_buf() };
    ingest_reader(file, format, d, t, c, provenance)
}

pub fn ingest_reader<R: Read>(
    reader: R,
    format: DataFormat,
    d: usize,
    t: usize,
    c: Curvature,
    provenance: Provenance,
) -> Result<Ingested> {
    if d == 0 || t == 0 {
        return Err(HarnessError::Invalid("d and t must be positive".into()));
    }
    let mut rescaled = 0;
    let mut items = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<f64> = match format {
            DataFormat::Csv => line
                .split(',')
                .map(|f| {
                    f.trim().parse::<f64>().map_err(|e| HarnessError::Parse {
                        line: line_no,
                        message: format!("field {:?}: {e}", f.trim()),
                    })
                })
                .collect::<Result<_>>()?,
            DataFormat::Jsonl => serde_json::from_str(&line)
                .map_err(|e| HarnessError::Parse { line: line_no, message: e.to_string() })?,
        };
        items.push(row_to_sample(&fields, line_no, d, t, c, &mut rescaled)?);
    }
    if rescaled > 0 {
        log::warn!("{rescaled} points were outside the ball and were rescaled to the margin");
    }
    let dataset = SequenceDataset::new(items, d, t, c, provenance)?;
    Ok(Ingested { dataset, rescaled })
}

/// Writes a dataset in the format [`ingest`] reads. Floats use shortest round-trip text.
pub fn export<W: Write>(data: &SequenceDataset, format: DataFormat, mut out: W) -> Result<()> {
    for s in data.items() {
        let row: Vec<f64> = s.x.iter().chain(s.y.iter()).copied().collect();
        match format {
            DataFormat::Csv => {
                let text: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                writeln!(out, "{}", text.join(","))?;
            }
            DataFormat::Jsonl => {
                serde_json::to_writer(&mut out, &row)?;
                writeln!(out)?;
            }
        }
    }
    out.flush()?;
    Ok(())
}
