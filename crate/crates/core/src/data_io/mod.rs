//! Dataset ingestion, normalization, model persistence and run
//! configuration.

mod archive;
mod config;
mod csv_io;
mod idx;
mod synthetic;

use std::io::Write;
use std::path::Path;

pub use archive::{load_model, read_model, save_model, write_model, ModelArchive, ARCHIVE_VERSION};
pub use config::{ArchitectureConfig, DataSource, RunConfig};
pub use csv_io::{load_csv, read_csv, read_numeric_table, NumericTable};
pub use idx::{load_idx, parse_idx};
pub use synthetic::{make_synthetic, SyntheticSpec};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Samples with their condition labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `N×D` feature matrix.
    pub x: Tensor,
    pub conditions: Vec<usize>,
    /// Number of conditions `K`.
    pub k: usize,
    /// Original label of each condition id, in id order.
    pub condition_names: Vec<String>,
    /// Per-feature `(min, max)` if the features were min-max normalized.
    pub ranges: Option<Vec<(f64, f64)>>,
}

impl Dataset {
    pub fn new(x: Tensor, conditions: Vec<usize>, k: usize, condition_names: Vec<String>) -> Result<Self> {
        if x.rank() != 2 {
            return Err(Error::shape("dataset", "features must be an N×D matrix"));
        }
        if conditions.len() != x.rows() {
            return Err(Error::shape(
                "dataset",
                format!("{} samples but {} condition labels", x.rows(), conditions.len()),
            ));
        }
        if let Some(bad) = conditions.iter().find(|&&c| c >= k) {
            return Err(Error::OutOfRange {
                what: "condition id",
                detail: format!("{bad} with K = {k}"),
            });
        }
        if condition_names.len() != k {
            return Err(Error::InvalidInput(format!(
                "{} condition names for K = {k}",
                condition_names.len()
            )));
        }
        Ok(Dataset {
            x,
            conditions,
            k,
            condition_names,
            ranges: None,
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn in_unit_cube(&self) -> bool {
        self.x.data().iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Min-max normalizes the features in place and records the ranges.
    pub fn normalize(&mut self) -> Vec<usize> {
        let (x, ranges, constant) = normalize_minmax(&self.x);
        if !constant.is_empty() {
            log::warn!("{} constant feature(s) normalized to 0: {constant:?}", constant.len());
        }
        self.x = x;
        self.ranges = Some(ranges);
        constant
    }

    /// Rows `indices` as a batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.x.row(i));
        }
        let x = Tensor::from_parts(vec![indices.len(), d], data);
        (x, indices.iter().map(|&i| self.conditions[i]).collect())
    }
}

/// Per-feature `(x - min) / (max - min)`.
///
/// Returns the normalized matrix, the `(min, max)` of every feature, and the
/// indices of constant features, which are mapped to 0.
pub fn normalize_minmax(x: &Tensor) -> (Tensor, Vec<(f64, f64)>, Vec<usize>) {
    let (rows, cols) = x.dims2();
    let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); cols];
    for r in 0..rows {
        for (c, v) in x.row(r).iter().enumerate() {
            ranges[c].0 = ranges[c].0.min(*v);
            ranges[c].1 = ranges[c].1.max(*v);
        }
    }
    let constant: Vec<usize> = ranges
        .iter()
        .enumerate()
        .filter(|(_, (lo, hi))| hi <= lo)
        .map(|(c, _)| c)
        .collect();
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for (c, v) in x.row(r).iter().enumerate() {
            let (lo, hi) = ranges[c];
            data.push(if hi > lo { (v - lo) / (hi - lo) } else { 0.0 });
        }
    }
    (Tensor::from_parts(x.shape().to_vec(), data), ranges, constant)
}

/// Inverse of [`normalize_minmax`] for non-constant features.
pub fn denormalize(x: &Tensor, ranges: &[(f64, f64)]) -> Result<Tensor> {
    if x.cols() != ranges.len() {
        return Err(Error::shape("denormalize", "one range per feature required"));
    }
    let c = ranges.len();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let (lo, hi) = ranges[i % c];
            lo + v * (hi - lo)
        })
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

/// Writes through a sibling temporary file and renames it into place, so
/// readers never observe a partially written artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut file = std::fs::File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}
