use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use super::Dataset;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Reads a comma-separated file with a header row. `condition_column` holds
/// categorical labels; every other column must be numeric and becomes a
/// feature. Labels are re-indexed densely in order of first appearance.
/// Features are not normalized.
pub fn load_csv(path: &Path, condition_column: &str) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, condition_column)
}

pub fn read_csv<R: Read>(reader: R, condition_column: &str) -> Result<Dataset> {
    let table = read_table(reader, &[condition_column])?;
    if table.rows.is_empty() {
        return Err(Error::Format {
            format: "csv",
            detail: "no data rows".into(),
        });
    }
    if table.feature_names.is_empty() {
        return Err(Error::Format {
            format: "csv",
            detail: "no feature columns besides the condition column".into(),
        });
    }
    let labels = &table.labels[0].1;
    let mut ids: HashMap<&str, usize> = HashMap::new();
    let mut names = Vec::new();
    let conditions = labels
        .iter()
        .map(|l| {
            *ids.entry(l.as_str()).or_insert_with(|| {
                names.push(l.clone());
                names.len() - 1
            })
        })
        .collect();
    let d = table.feature_names.len();
    let data: Vec<f64> = table.rows.iter().flatten().copied().collect();
    let x = Tensor::matrix(table.rows.len(), d, data)?;
    let k = names.len();
    Dataset::new(x, conditions, k, names)
}

/// Numeric columns plus any number of string label columns.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NumericTable {
    pub feature_names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    /// `(column name, value per row)` for each requested label column.
    pub labels: Vec<(String, Vec<String>)>,
}

pub fn read_numeric_table(path: &Path, label_columns: &[&str]) -> Result<NumericTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_table(file, label_columns)
}

fn read_table<R: Read>(reader: R, label_columns: &[&str]) -> Result<NumericTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::Format {
            format: "csv",
            detail: "empty file or missing header row".into(),
        });
    }
    let mut label_idx = Vec::new();
    for &name in label_columns {
        let idx = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidInput(format!("column '{name}' not found in csv header")))?;
        label_idx.push(idx);
    }
    let feature_idx: Vec<usize> = (0..headers.len()).filter(|i| !label_idx.contains(i)).collect();
    let mut table = NumericTable {
        feature_names: feature_idx.iter().map(|&i| headers[i].clone()).collect(),
        rows: Vec::new(),
        labels: label_columns.iter().map(|n| (n.to_string(), Vec::new())).collect(),
    };
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        let mut row = Vec::with_capacity(feature_idx.len());
        for &i in &feature_idx {
            let cell = record.get(i).unwrap_or("").trim();
            let v: f64 = cell.parse().map_err(|_| Error::Format {
                format: "csv",
                detail: format!(
                    "row {}: column '{}' has non-numeric value '{cell}'",
                    line + 1,
                    headers[i]
                ),
            })?;
            if !v.is_finite() {
                return Err(Error::Format {
                    format: "csv",
                    detail: format!("row {}: non-finite value in '{}'", line + 1, headers[i]),
                });
            }
            row.push(v);
        }
        for (slot, &i) in table.labels.iter_mut().zip(&label_idx) {
            slot.1.push(record.get(i).unwrap_or("").trim().to_string());
        }
        table.rows.push(row);
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reindexes_conditions_by_first_appearance() {
        let text = "x,cond,y\n1.0,a,2\n3,b,4\n5,a,6.5\n";
        let ds = read_csv(text.as_bytes(), "cond").unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.conditions, vec![0, 1, 0]);
        assert_eq!(ds.k, 2);
        assert_eq!(ds.condition_names, vec!["a", "b"]);
        assert_eq!(ds.x.row(2), &[5.0, 6.5]);
    }

    #[test]
    fn missing_condition_column_is_named() {
        let err = read_csv("x,y\n1,2\n".as_bytes(), "batch").unwrap_err();
        assert!(err.to_string().contains("batch"), "{err}");
    }

    #[test]
    fn rejects_non_numeric_and_empty_input() {
        assert!(read_csv("x,c\nfoo,a\n".as_bytes(), "c").is_err());
        assert!(read_csv("".as_bytes(), "c").is_err());
        assert!(read_csv("x,c\n".as_bytes(), "c").is_err());
    }
}
