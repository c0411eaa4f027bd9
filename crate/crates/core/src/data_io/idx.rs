use std::path::Path;

use super::Dataset;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            format: "idx",
            detail: format!("{what}: truncated header"),
        })
}

/// Reads an image file and a label file in the big-endian IDX format.
/// Pixels are flattened row-major and scaled by `1/255`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    parse_idx(&images, &labels)
}

pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = be_u32(images, 0, "images")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format {
            format: "idx",
            detail: format!("image magic {magic}, expected {IMAGE_MAGIC}"),
        });
    }
    let magic = be_u32(labels, 0, "labels")?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format {
            format: "idx",
            detail: format!("label magic {magic}, expected {LABEL_MAGIC}"),
        });
    }
    let n = be_u32(images, 4, "images")? as usize;
    let rows = be_u32(images, 8, "images")? as usize;
    let cols = be_u32(images, 12, "images")? as usize;
    let n_labels = be_u32(labels, 4, "labels")? as usize;
    if n != n_labels {
        return Err(Error::Format {
            format: "idx",
            detail: format!("{n} images but {n_labels} labels"),
        });
    }
    let d = rows * cols;
    if n == 0 || d == 0 {
        return Err(Error::Format {
            format: "idx",
            detail: "empty image set".into(),
        });
    }
    let pixels = images.get(16..16 + n * d).ok_or_else(|| Error::Format {
        format: "idx",
        detail: format!("image payload shorter than {n}×{rows}×{cols}"),
    })?;
    let label_bytes = labels.get(8..8 + n).ok_or_else(|| Error::Format {
        format: "idx",
        detail: format!("label payload shorter than {n}"),
    })?;
    let x = Tensor::matrix(n, d, pixels.iter().map(|&p| p as f64 / 255.0).collect())?;
    let k = label_bytes.iter().copied().max().unwrap_or(0) as usize + 1;
    let conditions = label_bytes.iter().map(|&l| l as usize).collect();
    let names = (0..k).map(|c| c.to_string()).collect();
    Dataset::new(x, conditions, k, names)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn idx_images(n: u32, rows: u32, cols: u32, fill: u8) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IMAGE_MAGIC, n, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend(std::iter::repeat_n(fill, (n * rows * cols) as usize));
        b
    }

    pub fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn header_arithmetic_and_scaling() {
        let labels: Vec<u8> = (0..10).collect();
        let ds = parse_idx(&idx_images(10, 28, 28, 255), &idx_labels(&labels)).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.dim(), 784);
        assert!(ds.x.data().iter().all(|&v| v == 1.0));
        assert_eq!(ds.conditions[7], 7);
        assert_eq!(ds.k, 10);
    }

    #[test]
    fn count_mismatch_and_bad_magic() {
        let labels: Vec<u8> = vec![0; 9];
        assert!(parse_idx(&idx_images(10, 2, 2, 0), &idx_labels(&labels)).is_err());
        let mut bad = idx_images(1, 2, 2, 0);
        bad[3] = 0;
        assert!(parse_idx(&bad, &idx_labels(&[0])).is_err());
        let mut short = idx_images(2, 2, 2, 0);
        short.truncate(20);
        assert!(parse_idx(&short, &idx_labels(&[0, 1])).is_err());
    }
}
