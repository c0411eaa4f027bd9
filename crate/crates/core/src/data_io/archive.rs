//! Model persistence.
//!
//! Layout:
//!
//! ```text
//! bytes 0..3   b"FAE"
//! byte  3      format version (ASCII digit)
//! bytes 4..8   u32 little-endian length L of the JSON header
//! bytes 8..8+L JSON header: architecture, condition names, feature ranges
//! rest         parameters as little-endian f64, groups in order
//!              theta_e, theta_m, theta_d, theta_ac, theta_c, theta_delta;
//!              within a group every layer contributes its weights
//!              (row-major, out×in) followed by its bias
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::write_atomic;
use crate::error::{Error, Result};
use crate::nn::{init_model, FaeArchitecture, FaeModel, ParamGroup};

pub const ARCHIVE_VERSION: u8 = b'1';
const MAGIC: &[u8; 3] = b"FAE";

/// A model plus the metadata needed to interpret its inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelArchive {
    pub model: FaeModel,
    /// Original label of each condition id.
    pub condition_names: Vec<String>,
    /// Feature ranges used to normalize the training data, if any.
    pub ranges: Option<Vec<(f64, f64)>>,
}

impl ModelArchive {
    pub fn new(model: FaeModel) -> Self {
        let condition_names = (0..model.arch.conditions).map(|c| c.to_string()).collect();
        ModelArchive {
            model,
            condition_names,
            ranges: None,
        }
    }

    /// Resolves a condition given by name, falling back to a numeric id.
    pub fn condition_id(&self, key: &str) -> Result<usize> {
        if let Some(i) = self.condition_names.iter().position(|n| n == key) {
            return Ok(i);
        }
        match key.parse::<usize>() {
            Ok(i) if i < self.model.arch.conditions => Ok(i),
            _ => Err(Error::OutOfRange {
                what: "condition",
                detail: format!("'{key}' is not one of {:?}", self.condition_names),
            }),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    architecture: FaeArchitecture,
    condition_names: Vec<String>,
    #[serde(default)]
    ranges: Option<Vec<(f64, f64)>>,
}

pub fn write_model(archive: &ModelArchive) -> Result<Vec<u8>> {
    archive.model.validate()?;
    if archive.condition_names.len() != archive.model.arch.conditions {
        return Err(Error::InvalidInput(format!(
            "{} condition names for K = {}",
            archive.condition_names.len(),
            archive.model.arch.conditions
        )));
    }
    let header = serde_json::to_vec(&Header {
        architecture: archive.model.arch.clone(),
        condition_names: archive.condition_names.clone(),
        ranges: archive.ranges.clone(),
    })?;
    let mut out = Vec::with_capacity(8 + header.len());
    out.extend_from_slice(MAGIC);
    out.push(ARCHIVE_VERSION);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&archive.model.parameter_bytes());
    Ok(out)
}

pub fn read_model(bytes: &[u8]) -> Result<ModelArchive> {
    let bad = |detail: String| Error::Format {
        format: "model archive",
        detail,
    };
    if bytes.len() < 8 || &bytes[..3] != MAGIC {
        return Err(bad("missing FAE magic".into()));
    }
    if bytes[3] != ARCHIVE_VERSION {
        return Err(bad(format!(
            "unsupported version {:?}, this build reads version {:?}",
            bytes[3] as char, ARCHIVE_VERSION as char
        )));
    }
    let len = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    let header_bytes = bytes
        .get(8..8 + len)
        .ok_or_else(|| bad(format!("header length {len} exceeds file size")))?;
    let header: Header = serde_json::from_slice(header_bytes)?;
    // Build a correctly shaped model, then overwrite every parameter.
    let mut model = init_model(&header.architecture, 0)?;
    let payload = &bytes[8 + len..];
    let expected: usize = ParamGroup::ALL
        .iter()
        .flat_map(|&g| model.group(g))
        .map(|t| t.len() * 8)
        .sum();
    if payload.len() != expected {
        return Err(bad(format!(
            "parameter payload has {} bytes, architecture needs {expected}",
            payload.len()
        )));
    }
    let mut chunks = payload.chunks_exact(8);
    for tensor in model.groups_mut(&ParamGroup::ALL) {
        for v in tensor.data_mut() {
            let c = chunks.next().expect("length checked");
            *v = f64::from_le_bytes(c.try_into().expect("8-byte chunk"));
            if !v.is_finite() {
                return Err(bad("non-finite parameter".into()));
            }
        }
    }
    let archive = ModelArchive {
        model,
        condition_names: header.condition_names,
        ranges: header.ranges,
    };
    if archive.condition_names.len() != archive.model.arch.conditions {
        return Err(bad("condition names do not match K".into()));
    }
    Ok(archive)
}

pub fn save_model(archive: &ModelArchive, path: &Path) -> Result<()> {
    write_atomic(path, &write_model(archive)?)
}

pub fn load_model(path: &Path) -> Result<ModelArchive> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_model(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn archive() -> ModelArchive {
        let mut arch = FaeArchitecture::new(5, 2, 3, 4);
        arch.encoder_hidden = vec![7, 6];
        arch.decoder_hidden = vec![4];
        arch.omega0 = 3.0;
        let mut a = ModelArchive::new(init_model(&arch, 17).unwrap());
        a.condition_names = vec!["w".into(), "x".into(), "y".into(), "z".into()];
        a.ranges = Some(vec![(0.0, 1.0); 5]);
        a
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let a = archive();
        let bytes = write_model(&a).unwrap();
        assert_eq!(&bytes[..4], b"FAE1");
        let b = read_model(&bytes).unwrap();
        assert_eq!(a.model.parameter_bytes(), b.model.parameter_bytes());
        assert_eq!(a, b);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fae");
        save_model(&a, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), a);
    }

    #[test]
    fn corrupted_archives_are_rejected() {
        let bytes = write_model(&archive()).unwrap();
        let mut truncated = bytes.clone();
        truncated.pop();
        assert!(read_model(&truncated).unwrap_err().to_string().contains("payload"));

        let mut version = bytes.clone();
        version[3] = b'7';
        let msg = read_model(&version).unwrap_err().to_string();
        assert!(msg.contains('7') && msg.contains('1'), "{msg}");

        let mut len = bytes;
        len[4..8].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(read_model(&len).is_err());
        assert!(read_model(b"nope").is_err());
    }

    #[test]
    fn conditions_resolve_by_name_or_id() {
        let a = archive();
        assert_eq!(a.condition_id("y").unwrap(), 2);
        assert_eq!(a.condition_id("3").unwrap(), 3);
        assert!(a.condition_id("9").is_err());
        assert!(a.condition_id("q").is_err());
    }
}
