use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HyTConfig, HyTParams, ModelError, Result};
use crate::autodiff::Matrix;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// One tensor, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

impl TensorRecord {
    pub fn from_matrix(m: &Matrix) -> Self {
        let values = m.transpose().as_slice().to_vec();
        TensorRecord { shape: [m.nrows(), m.ncols()], values }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        let [r, c] = self.shape;
        if r * c != self.values.len() {
            return Err(ModelError::Checkpoint(format!("shape {r}x{c} does not match {} values", self.values.len())));
        }
        Ok(Matrix::from_row_slice(r, c, &self.values))
    }
}

/// A self-describing parameter file. Float values round-trip exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: HyTConfig,
    pub curvature: f64,
    pub seed: u64,
    pub tensors: BTreeMap<String, TensorRecord>,
}

impl Checkpoint {
    pub fn new(params: &HyTParams, config: &HyTConfig, seed: u64) -> Self {
        let tensors = params.named().into_iter().map(|(n, m)| (n, TensorRecord::from_matrix(m))).collect();
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: config.clone(),
            curvature: config.curvature.value(),
            seed,
            tensors,
        }
    }

    /// Rebuilds the parameters, checking every tensor against the stored configuration.
    pub fn to_params(&self) -> Result<HyTParams> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported format version {}", self.format_version)));
        }
        if self.curvature.to_bits() != self.config.curvature.value().to_bits() {
            return Err(ModelError::Checkpoint(format!(
                "curvature {} disagrees with configuration curvature {}",
                self.curvature,
                self.config.curvature.value()
            )));
        }
        self.config.validate()?;
        let mut params = HyTParams::zeros(&self.config);
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        if names.len() != self.tensors.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} tensors, found {}",
                names.len(),
                self.tensors.len()
            )));
        }
        for (name, slot) in names.iter().zip(params.tensors_mut()) {
            let record =
                self.tensors.get(name).ok_or_else(|| ModelError::Checkpoint(format!("missing tensor {name}")))?;
            let m = record.to_matrix()?;
            super::check_shape(name, &m, slot.shape())?;
            *slot = m;
        }
        if !params.is_finite() {
            return Err(ModelError::Checkpoint("non-finite parameter value".into()));
        }
        Ok(params)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
