//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on usage or validation errors, 2 on runtime failures.

mod settings;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde::Serialize;

use gyrohyt::capacity::{self, BoundInputs, BoundReport, MSchedule};
use gyrohyt::geometry::Curvature;
use gyrohyt::harness::{self, CompareConfig, StudentInit, SweepConfig, TeacherSpec};
use gyrohyt::model::{Checkpoint, HyTConfig};
use gyrohyt::training::{self, SequenceDataset, TruncationLevel};

use settings::{Flags, Settings};

#[derive(Debug, Parser)]
#[command(name = "gyrohyt", version, about = "Hyperbolic transformer experiments on the Poincare ball")]
struct Cli {
    #[command(flatten)]
    flags: Flags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the gyrovector identity and exp/log round-trip suite.
    GeometryCheck,
    /// Train a model and write checkpoint.json and trace.csv.
    Train,
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Excess risk against training tokens; writes sweep.csv, sweep.svg, sweep.json.
    ConsistencySweep,
    /// Test RMSE traces across curvatures; writes trace.csv, trace.svg, compare.json.
    CurvatureCompare,
    /// Print parameter counts and capacity bounds.
    Capacity,
    /// Print the rate-condition trace over a grid of t.
    Conditions,
}

/// A failure tagged with its exit code.
enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

trait Classify<T> {
    fn invalid(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn invalid(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Invalid(e.into()))
    }

    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let s = Settings::resolve(&cli.flags).invalid()?;
    match cli.command {
        Command::GeometryCheck => geometry_check(&s),
        Command::Train => train(&s),
        Command::Eval { checkpoint } => eval(&s, &checkpoint),
        Command::ConsistencySweep => sweep(&s),
        Command::CurvatureCompare => compare(&s),
        Command::Capacity => capacity(&s),
        Command::Conditions => conditions(&s),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<(), Failure> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value).runtime()?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => other.runtime(),
    }
}

fn out_dir(s: &Settings) -> Result<&Path, Failure> {
    fs::create_dir_all(&s.out).with_context(|| format!("creating {}", s.out.display())).runtime()?;
    Ok(&s.out)
}

fn write(path: PathBuf, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display())).runtime()
}

fn geometry_check(s: &Settings) -> Result<(), Failure> {
    let curvatures = match &s.curvatures {
        Some(cs) => cs.clone(),
        None => [1e-4, 1.0, 10.0].iter().map(|&c| Curvature::new(c).expect("valid")).collect(),
    };
    let report = harness::geometry_check(&curvatures, s.pairs(), s.model.dim, s.seed);
    print_json(&report)?;
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow::anyhow!("geometry check failed")))
    }
}

fn teacher(s: &Settings, cfg: &HyTConfig) -> TeacherSpec {
    TeacherSpec { kind: s.teacher, seed: s.teacher_seed, config: cfg.clone(), noise_std: s.noise, weight_scale: None }
}

/// Training and held-out data: an ingested file (no held-out split) or a synthetic teacher.
fn datasets(s: &Settings, cfg: &HyTConfig) -> Result<(SequenceDataset, Option<SequenceDataset>), Failure> {
    if let Some(path) = &s.data {
        let ing = harness::ingest(path, s.format, cfg.dim, cfg.tokens, cfg.curvature).invalid()?;
        if ing.rescaled > 0 {
            eprintln!("warning: {} points rescaled into the ball", ing.rescaled);
        }
        return Ok((ing.dataset, None));
    }
    let spec = teacher(s, cfg);
    let train =
        harness::generate_synthetic(&spec, s.samples, cfg.curvature, harness::stream_seed(s.seed, 1)).runtime()?;
    let test =
        harness::generate_synthetic(&spec, s.test_samples, cfg.curvature, harness::stream_seed(s.seed, 2)).runtime()?;
    Ok((train, Some(test)))
}

fn truncation(s: &Settings, c: Curvature, total_tokens: usize) -> Result<Option<TruncationLevel>, Failure> {
    let ball = match s.trunc_m {
        Some(m) => Some(TruncationLevel::in_ball(m, c).invalid()?),
        None => TruncationLevel::schedule(total_tokens, c),
    };
    Ok(ball.map(|m| m.tangent_bound(c)))
}

#[derive(Serialize)]
struct TrainSummary {
    samples: usize,
    epochs: usize,
    final_train_risk: f64,
    final_test_risk: Option<f64>,
    final_truncated_test_risk: Option<f64>,
    checkpoint: PathBuf,
    trace: PathBuf,
}

fn train(s: &Settings) -> Result<(), Failure> {
    let cfg = &s.model;
    let (data, test) = datasets(s, cfg)?;
    let m = truncation(s, cfg.curvature, data.len() * cfg.tokens)?;
    let out = training::train(&data, test.as_ref(), cfg, &s.optimizer, m).runtime()?;
    let dir = out_dir(s)?;
    let ck = Checkpoint::new(&out.params, cfg, s.seed);
    let ck_path = dir.join("checkpoint.json");
    write(ck_path.clone(), ck.to_json().runtime()?.as_bytes())?;
    let mut csv = Vec::new();
    training::write_trace_csv(&out.trace, &mut csv).runtime()?;
    let trace_path = dir.join("trace.csv");
    write(trace_path.clone(), &csv)?;
    let last = out.trace.last().expect("trace has the initial row");
    print_json(&TrainSummary {
        samples: data.len(),
        epochs: s.optimizer.epochs,
        final_train_risk: last.train_risk,
        final_test_risk: last.test_risk,
        final_truncated_test_risk: last.truncated_test_risk,
        checkpoint: ck_path,
        trace: trace_path,
    })
}

#[derive(Serialize)]
struct EvalSummary {
    samples: usize,
    risk: f64,
    truncated_risk: Option<f64>,
}

fn eval(s: &Settings, checkpoint: &Path) -> Result<(), Failure> {
    let ck = Checkpoint::load(checkpoint).invalid()?;
    let params = ck.to_params().invalid()?;
    let cfg = &ck.config;
    let (data, test) = datasets(s, cfg)?;
    let data = test.unwrap_or(data);
    // the training size is not recorded, so only an explicit level truncates here
    let m = match s.trunc_m {
        Some(m) => Some(TruncationLevel::in_ball(m, cfg.curvature).invalid()?.tangent_bound(cfg.curvature)),
        None => None,
    };
    let r = training::evaluate(&params, cfg, &data, m).runtime()?;
    print_json(&EvalSummary { samples: data.len(), risk: r.risk, truncated_risk: r.truncated_risk })
}

fn sweep(s: &Settings) -> Result<(), Failure> {
    let cfg = SweepConfig {
        teacher: teacher(s, &s.model),
        curvatures: s.curvatures.clone().unwrap_or_else(|| vec![s.model.curvature]),
        token_grid: {
            let (lo, hi) = s.grid(8, 14);
            (lo..=hi).map(|k| 1usize << k).collect()
        },
        repetitions: s.repetitions,
        optimizer: s.optimizer.clone(),
        test_tokens: s.test_tokens,
        seed: s.seed,
        student_init: StudentInit::Random,
        truncate: true,
    };
    let report = harness::consistency_sweep(&cfg).runtime()?;
    let dir = out_dir(s)?;
    let mut csv = Vec::new();
    harness::write_sweep_csv(&report.records, &mut csv).runtime()?;
    write(dir.join("sweep.csv"), &csv)?;
    let svg = harness::sweep_svg(std::str::from_utf8(&csv).expect("csv is utf-8")).runtime()?;
    write(dir.join("sweep.svg"), svg.as_bytes())?;
    let json = serde_json::to_string_pretty(&report.fits).runtime()?;
    write(dir.join("sweep.json"), json.as_bytes())?;
    print_json(&report.fits)
}

fn compare(s: &Settings) -> Result<(), Failure> {
    let curvatures = s
        .curvatures
        .clone()
        .unwrap_or_else(|| harness::DEFAULT_CURVATURES.iter().map(|&c| Curvature::new(c).expect("valid")).collect());
    let cfg = CompareConfig {
        teacher: teacher(s, &s.model),
        curvatures,
        samples: s.samples,
        test_samples: s.test_samples,
        optimizer: s.optimizer.clone(),
        seed: s.seed,
    };
    let report = harness::curvature_compare(&cfg).runtime()?;
    let dir = out_dir(s)?;
    let mut csv = Vec::new();
    harness::write_trace_csv(&report.rows, &mut csv).runtime()?;
    write(dir.join("trace.csv"), &csv)?;
    let svg = harness::trace_svg(std::str::from_utf8(&csv).expect("csv is utf-8")).runtime()?;
    write(dir.join("trace.svg"), svg.as_bytes())?;
    let json = serde_json::to_string_pretty(&report).runtime()?;
    write(dir.join("compare.json"), json.as_bytes())?;
    if !report.diverged.is_empty() {
        eprintln!("warning: diverged runs (curvature, epoch): {:?}", report.diverged);
    }
    let finals: Vec<(f64, f64)> =
        cfg.curvatures.iter().filter_map(|c| report.trace(c.value()).last().map(|&r| (c.value(), r))).collect();
    print_json(&finals)
}

fn condition_trace(s: &Settings) -> Result<capacity::ConditionTrace, Failure> {
    let schedule = s.trunc_m.map_or(MSchedule::Default, MSchedule::Constant);
    let (lo, hi) = s.grid(8, 20);
    let grid = capacity::pow2_grid(lo, hi);
    capacity::check_conditions(s.model.curvature, s.model.dim, s.theta, schedule, &grid).invalid()
}

fn capacity(s: &Settings) -> Result<(), Failure> {
    let mut inputs = BoundInputs::for_config(&s.model, s.eps, s.bound_m);
    inputs.pdim_constant = s.pdim_constant;
    inputs.covering_constant = s.covering_constant;
    let trace = match (s.theta_given, s.model.curvature.is_euclidean()) {
        (true, false) => Some(condition_trace(s)?),
        _ => None,
    };
    print_json(&BoundReport::compute(inputs, trace).invalid()?)
}

fn conditions(s: &Settings) -> Result<(), Failure> {
    print_json(&condition_trace(s)?)
}
