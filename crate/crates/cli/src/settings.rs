//! Flags, the JSON config file, and their merge into validated settings.
//!
//! Every flag can also be set in the `--config` file under its long name;
//! a flag given on the command line wins over the file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::Args;
use serde::Deserialize;

use gyrohyt::geometry::Curvature;
use gyrohyt::harness::{DataFormat, TeacherKind};
use gyrohyt::model::HyTConfig;
use gyrohyt::training::{OptimizerConfig, DEFAULT_WEIGHT_DECAY};

fn parse_teacher(s: &str) -> Result<TeacherKind, String> {
    match s {
        "random-hyt" => Ok(TeacherKind::RandomHyt),
        "smooth-map" => Ok(TeacherKind::SmoothMap),
        other => Err(format!("unknown teacher {other:?} (expected random-hyt or smooth-map)")),
    }
}

fn parse_format(s: &str) -> Result<DataFormat, String> {
    s.parse().map_err(|e: gyrohyt::harness::HarnessError| e.to_string())
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct Flags {
    /// Ball curvature c (0 is Euclidean).
    #[arg(long, global = true)]
    pub curvature: Option<f64>,
    /// Comma-separated curvatures for sweeps, comparisons and the geometry check.
    #[arg(long, global = true, value_delimiter = ',')]
    pub curvatures: Option<Vec<f64>>,
    /// Embedding dimension d.
    #[arg(long, global = true)]
    pub dim: Option<usize>,
    /// Tokens per sequence t.
    #[arg(long, global = true)]
    pub tokens: Option<usize>,
    /// Training sequences (geometry-check: random pairs per curvature).
    #[arg(long, global = true)]
    pub samples: Option<usize>,
    /// Held-out sequences for train, eval and curvature-compare.
    #[arg(long, global = true)]
    pub test_samples: Option<usize>,
    #[arg(long, global = true)]
    pub heads: Option<usize>,
    #[arg(long, global = true)]
    pub head_size: Option<usize>,
    /// Feed-forward hidden width r.
    #[arg(long, global = true)]
    pub ffn: Option<usize>,
    #[arg(long, global = true)]
    pub blocks: Option<usize>,
    /// Embedding-table vocabulary size (0 for none).
    #[arg(long, global = true)]
    pub vocab: Option<usize>,
    /// Scale attention logits by 1/sqrt(d).
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    pub scale_logits: Option<bool>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub weight_decay: Option<f64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch: Option<usize>,
    /// Ball-level truncation threshold M; defaults to the (1 - t^-1/2)/sqrt(c) schedule.
    #[arg(long = "trunc-M", global = true)]
    #[serde(rename = "trunc-M")]
    pub trunc_m: Option<f64>,
    #[arg(long, global = true)]
    pub theta: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON file with any of these flags under their long names.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Scale eps of the packing and covering bounds.
    #[arg(long, global = true)]
    pub eps: Option<f64>,
    /// Output bound M of the packing and covering bounds.
    #[arg(long, global = true)]
    pub bound_m: Option<f64>,
    #[arg(long, global = true)]
    pub pdim_constant: Option<f64>,
    #[arg(long, global = true)]
    pub covering_constant: Option<f64>,
    /// Record wall-clock milliseconds (makes outputs run-dependent).
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    pub timing: Option<bool>,
    /// Dataset file to ingest instead of synthetic data.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Dataset format: csv or jsonl.
    #[arg(long, global = true, value_parser = parse_format)]
    pub format: Option<DataFormat>,
    /// Synthetic teacher: random-hyt or smooth-map.
    #[arg(long, global = true, value_parser = parse_teacher)]
    pub teacher: Option<TeacherKind>,
    #[arg(long, global = true)]
    pub teacher_seed: Option<u64>,
    /// Tangent-space target noise standard deviation.
    #[arg(long, global = true)]
    pub noise: Option<f64>,
    #[arg(long, global = true)]
    pub repetitions: Option<usize>,
    /// Held-out tokens per sweep cell.
    #[arg(long, global = true)]
    pub test_tokens: Option<usize>,
    /// Smallest exponent k of the 2^k grid.
    #[arg(long, global = true)]
    pub grid_min: Option<u32>,
    /// Largest exponent k of the 2^k grid.
    #[arg(long, global = true)]
    pub grid_max: Option<u32>,
}

macro_rules! merge {
    ($cli:expr, $file:expr; $($field:ident),* $(,)?) => {
        Flags { $($field: $cli.$field.clone().or($file.$field.clone()),)* config: None }
    };
}

impl Flags {
    fn over(&self, file: &Flags) -> Flags {
        merge!(self, file;
            curvature, curvatures, dim, tokens, samples, test_samples, heads, head_size, ffn, blocks, vocab,
            scale_logits, lr, weight_decay, epochs, batch, trunc_m, theta, seed, out, eps, bound_m,
            pdim_constant, covering_constant, timing, data, format, teacher, teacher_seed, noise,
            repetitions, test_tokens, grid_min, grid_max)
    }

    fn load(path: &Path) -> anyhow::Result<Flags> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Fully resolved and validated settings.
#[derive(Debug, Clone)]
pub struct Settings {
    pub model: HyTConfig,
    pub optimizer: OptimizerConfig,
    pub curvatures: Option<Vec<Curvature>>,
    samples_flag: Option<usize>,
    pub samples: usize,
    pub test_samples: usize,
    pub trunc_m: Option<f64>,
    pub theta: f64,
    pub theta_given: bool,
    pub seed: u64,
    pub out: PathBuf,
    pub eps: f64,
    pub bound_m: f64,
    pub pdim_constant: f64,
    pub covering_constant: f64,
    pub data: Option<PathBuf>,
    pub format: DataFormat,
    pub teacher: TeacherKind,
    pub teacher_seed: u64,
    pub noise: f64,
    pub repetitions: usize,
    pub test_tokens: usize,
    grid_min: Option<u32>,
    grid_max: Option<u32>,
}

impl Settings {
    pub fn resolve(cli: &Flags) -> anyhow::Result<Settings> {
        let f = match &cli.config {
            Some(path) => cli.over(&Flags::load(path)?),
            None => cli.clone(),
        };
        let curvature = Curvature::new(f.curvature.unwrap_or(1.0))?;
        let model = HyTConfig {
            dim: f.dim.unwrap_or(2),
            tokens: f.tokens.unwrap_or(4),
            heads: f.heads.unwrap_or(2),
            head_size: f.head_size.unwrap_or(1),
            ffn_hidden: f.ffn.unwrap_or(4),
            blocks: f.blocks.unwrap_or(1),
            curvature,
            scale_logits: f.scale_logits.unwrap_or(false),
            vocab: f.vocab.unwrap_or(0),
        };
        model.validate()?;
        let seed = f.seed.unwrap_or(0);
        let optimizer = OptimizerConfig {
            lr: f.lr.unwrap_or(1e-3),
            weight_decay: f.weight_decay.unwrap_or(DEFAULT_WEIGHT_DECAY),
            batch_size: f.batch.unwrap_or(16),
            epochs: f.epochs.unwrap_or(50),
            seed,
            timing: f.timing.unwrap_or(false),
        };
        optimizer.validate()?;
        let curvatures = f
            .curvatures
            .as_ref()
            .map(|cs| cs.iter().map(|&c| Curvature::new(c)).collect::<Result<Vec<_>, _>>())
            .transpose()?;
        let noise = f.noise.unwrap_or(0.05);
        if !(noise >= 0.0 && noise.is_finite()) {
            bail!("noise must be a nonnegative number, got {noise}");
        }
        if let (Some(lo), Some(hi)) = (f.grid_min, f.grid_max) {
            if lo > hi {
                bail!("grid-min {lo} exceeds grid-max {hi}");
            }
        }
        if f.grid_max.is_some_and(|k| k > 40) {
            bail!("grid-max above 40 is not supported");
        }
        Ok(Settings {
            model,
            optimizer,
            curvatures,
            samples_flag: f.samples,
            samples: f.samples.unwrap_or(256),
            test_samples: f.test_samples.unwrap_or(256),
            trunc_m: f.trunc_m,
            theta: f.theta.unwrap_or(0.1),
            theta_given: f.theta.is_some(),
            seed,
            out: f.out.unwrap_or_else(|| PathBuf::from("out")),
            eps: f.eps.unwrap_or(0.1),
            bound_m: f.bound_m.unwrap_or(1.0),
            pdim_constant: f.pdim_constant.unwrap_or(1.0),
            covering_constant: f.covering_constant.unwrap_or(1.0),
            data: f.data,
            format: f.format.unwrap_or(DataFormat::Csv),
            teacher: f.teacher.unwrap_or(TeacherKind::RandomHyt),
            teacher_seed: f.teacher_seed.unwrap_or(2024),
            noise,
            repetitions: f.repetitions.unwrap_or(10),
            test_tokens: f.test_tokens.unwrap_or(10_000),
            grid_min: f.grid_min,
            grid_max: f.grid_max,
        })
    }

    /// Random pairs per curvature for the geometry check.
    pub fn pairs(&self) -> usize {
        self.samples_flag.unwrap_or(1000)
    }

    /// Grid exponents, with command-specific defaults.
    pub fn grid(&self, lo: u32, hi: u32) -> (u32, u32) {
        (self.grid_min.unwrap_or(lo), self.grid_max.unwrap_or(hi))
    }
}
