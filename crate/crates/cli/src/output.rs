//! Result sinks and the long-form CSV schema shared by the point subcommands.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use reentrant_core::Estimate;
use serde::Serialize;

/// Failure to create or write an output; maps to exit code 3.
#[derive(Debug, thiserror::Error)]
#[error("cannot write {path}: {source}")]
pub struct OutputError {
    pub path: String,
    #[source]
    pub source: io::Error,
}

/// An enabled check did not pass; maps to exit code 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct CheckFailed(pub String);

/// One number with its uncertainty: `tag` is `exact` (half-width 0),
/// `ci99` (batch-means interval) or `ci99_bound` (conservative bound).
#[derive(Debug, Clone, Serialize)]
pub struct Row {
    pub quantity: String,
    pub r: Option<f64>,
    pub value: f64,
    pub half_width: f64,
    pub tag: &'static str,
    /// Closed-form counterpart of the quantity, when one exists.
    pub reference: Option<f64>,
}

impl Row {
    pub fn exact(quantity: impl Into<String>, r: Option<f64>, value: f64) -> Self {
        Row { quantity: quantity.into(), r, value, half_width: 0.0, tag: "exact", reference: None }
    }

    pub fn estimate(quantity: impl Into<String>, r: Option<f64>, e: Estimate) -> Self {
        Row { quantity: quantity.into(), r, value: e.value, half_width: e.half_width, tag: "ci99", reference: None }
    }

    pub fn with_reference(mut self, reference: f64) -> Self {
        self.reference = Some(reference);
        self
    }
}

pub fn create_file(path: &Path) -> Result<File, OutputError> {
    let wrap = |source| OutputError { path: path.display().to_string(), source };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(wrap)?;
    }
    File::create(path).map_err(wrap)
}

/// Writes `rows` as CSV to `path`, or to stdout when `path` is `None`.
pub fn write_rows(rows: &[Row], path: Option<&PathBuf>) -> Result<(), OutputError> {
    let name = path.map_or("<stdout>".to_string(), |p| p.display().to_string());
    let sink: Box<dyn Write> = match path {
        Some(p) => Box::new(BufWriter::new(create_file(p)?)),
        None => Box::new(io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    let wrap = |e: csv::Error| OutputError { path: name.clone(), source: e.into() };
    for row in rows {
        w.serialize(row).map_err(wrap)?;
    }
    w.flush().map_err(|source| OutputError { path: name.clone(), source })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/out.csv");
        let rows = [
            Row::exact("d1", None, 1.0),
            Row::estimate("mean_z1", Some(0.5), Estimate { value: 0.49, half_width: 0.01 }).with_reference(0.5),
        ];
        write_rows(&rows, Some(&path)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "quantity,r,value,half_width,tag,reference\nd1,,1.0,0.0,exact,\nmean_z1,0.5,0.49,0.01,ci99,0.5\n"
        );
    }

    #[test]
    fn unwritable_path() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, "x").unwrap();
        let err = write_rows(&[], Some(&blocker.join("out.csv"))).unwrap_err();
        assert!(err.path.ends_with("out.csv"));
    }
}
