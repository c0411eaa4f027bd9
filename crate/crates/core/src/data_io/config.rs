//! JSON run configuration.
//!
//! ```json
//! {
//!   "seed": 7,
//!   "data": {"synthetic": {"conditions": 3, "per_condition": 200, "dim": 20}},
//!   "architecture": {"fiber_dim": 2, "base_dim": 2},
//!   "train": {"epochs": 300, "adversarial": true},
//!   "solver": {"depth": 6, "dt": 0.00390625},
//!   "output_dir": "runs/demo"
//! }
//! ```
//!
//! Every section except `data` may be omitted; unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_csv, load_idx, make_synthetic, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::geodesic::SolverConfig;
use crate::nn::{Activation, FaeArchitecture};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Csv { path: PathBuf, condition_column: String },
    Idx { images: PathBuf, labels: PathBuf },
    Synthetic(SyntheticSpec),
}

impl DataSource {
    /// Loads the dataset and normalizes it into `[0, 1]` unless it already
    /// lies there (IDX pixels are pre-scaled).
    pub fn load(&self, base: &Path) -> Result<Dataset> {
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let mut ds = match self {
            DataSource::Csv {
                path,
                condition_column,
            } => load_csv(&resolve(path), condition_column)?,
            DataSource::Idx { images, labels } => load_idx(&resolve(images), &resolve(labels))?,
            DataSource::Synthetic(spec) => return make_synthetic(spec),
        };
        if !matches!(self, DataSource::Idx { .. }) || !ds.in_unit_cube() {
            ds.normalize();
        }
        Ok(ds)
    }
}

/// Architecture fields that do not follow from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub fiber_dim: usize,
    pub base_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub omega0: f64,
    pub decoder_output: Activation,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        let a = FaeArchitecture::new(1, 2, 2, 1);
        ArchitectureConfig {
            fiber_dim: a.fiber_dim,
            base_dim: a.base_dim,
            encoder_hidden: a.encoder_hidden,
            decoder_hidden: a.decoder_hidden,
            classifier_hidden: a.classifier_hidden,
            omega0: a.omega0,
            decoder_output: a.decoder_output,
        }
    }
}

impl ArchitectureConfig {
    pub fn build(&self, input_dim: usize, conditions: usize) -> FaeArchitecture {
        FaeArchitecture {
            input_dim,
            fiber_dim: self.fiber_dim,
            base_dim: self.base_dim,
            conditions,
            encoder_hidden: self.encoder_hidden.clone(),
            decoder_hidden: self.decoder_hidden.clone(),
            classifier_hidden: self.classifier_hidden.clone(),
            omega0: self.omega0,
            decoder_output: self.decoder_output,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: DataSource,
    #[serde(default)]
    pub architecture: ArchitectureConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("fibrae-out")
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.solver.validate()?;
        self.architecture.build(1, 1).validate()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
