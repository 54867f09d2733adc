//! Synthetic data, ingestion, experiment orchestration and report emission.

mod check;
mod data;
mod plot;
mod sweep;

pub use check::{geometry_check, CheckResult, GeometryCheckReport};
pub use data::{
    export, generate_synthetic, ingest, ingest_reader, synthesize, DataFormat, Ingested, Synthetic, Teacher,
    TeacherKind, TeacherSpec,
};
pub use plot::{sweep_svg, trace_svg, LinePlot, Series};
pub use sweep::{
    consistency_sweep, curvature_compare, read_sweep_csv, read_trace_csv, write_sweep_csv, write_trace_csv,
    CompareConfig, CompareReport, CurvatureFit, StudentInit, SweepConfig, SweepRecord, SweepReport, TraceRow,
    DEFAULT_CURVATURES,
};

use thiserror::Error;

use crate::geometry::Curvature;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: expected {expected} fields, got {got}")]
    FieldCount { line: usize, expected: usize, got: usize },
    #[error(transparent)]
    Training(#[from] crate::training::TrainingError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("worker pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Environment variable bounding the worker pool.
pub const THREADS_ENV: &str = "GYROHYT_THREADS";

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of one sweep cell, a hash of its key.
pub fn cell_seed(base: u64, c: Curvature, tokens: usize, repetition: usize) -> u64 {
    let mut h = splitmix64(base);
    for part in [c.value().to_bits(), tokens as u64, repetition as u64] {
        h = splitmix64(h ^ part);
    }
    h
}

/// Independent sub-stream of a seed. Distinct `stream` values never share output.
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ splitmix64(stream.wrapping_add(0xD1B5_4A32_D192_ED03)))
}

/// Pool sized by `GYROHYT_THREADS`, or the machine's parallelism when unset.
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let threads = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()).unwrap_or(0);
    Ok(rayon::ThreadPoolBuilder::new().num_threads(threads).build()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_seeds_differ_by_every_key_part() {
        let one = Curvature::new(1.0).unwrap();
        let base = cell_seed(7, one, 256, 0);
        assert_eq!(base, cell_seed(7, one, 256, 0));
        assert_ne!(base, cell_seed(8, one, 256, 0));
        assert_ne!(base, cell_seed(7, Curvature::new(2.0).unwrap(), 256, 0));
        assert_ne!(base, cell_seed(7, one, 512, 0));
        assert_ne!(base, cell_seed(7, one, 256, 1));
        assert_ne!(stream_seed(base, 0), stream_seed(base, 1));
    }
}
