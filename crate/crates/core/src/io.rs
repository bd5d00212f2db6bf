//! CSV data, JSON models, assignment tables and run manifests.
//!
//! Every file is written to a temporary sibling and renamed into place, so a
//! reader never sees a half-written output.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ecm::FitResult;
use crate::error::{Error, Result};
use crate::model::{Dataset, MixtureModel};

/// Writes `bytes` to `path` via a temporary file in the same directory.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().ok_or_else(|| Error::InvalidInput(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok(sha256_hex(&bytes))
}

/// Parses a headed CSV; `label_column` names an integer column kept out of the features.
pub fn parse_csv(text: &str, label_column: Option<&str>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(text.as_bytes());
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if headers.is_empty() || headers.iter().all(String::is_empty) {
        return Err(Error::Parse { row: 0, column: 0, message: "empty file".into() });
    }
    let label_idx = match label_column {
        Some(name) => Some(headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            row: 0,
            column: 0,
            message: format!("no column named {name:?}"),
        })?),
        None => None,
    };
    let width = headers.len();
    let p = width - usize::from(label_idx.is_some());
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut n = 0;
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 1;
        if record.len() != width {
            return Err(Error::Parse {
                row,
                column: record.len().min(width) + 1,
                message: format!("expected {width} fields, found {}", record.len()),
            });
        }
        for (c, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            if Some(c) == label_idx {
                let l = cell.parse::<usize>().map_err(|_| Error::Parse {
                    row,
                    column: c + 1,
                    message: format!("label {cell:?} is not a non-negative integer"),
                })?;
                labels.push(l);
                continue;
            }
            let v = cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                row,
                column: c + 1,
                message: format!("{:?} in column {:?} is not a finite number", cell, headers[c]),
            })?;
            values.push(v);
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Parse { row: 1, column: 1, message: "no data rows".into() });
    }
    let names: Vec<String> =
        headers.iter().enumerate().filter(|(c, _)| Some(*c) != label_idx).map(|(_, h)| h.clone()).collect();
    let mut data = Dataset::new(DMatrix::from_row_slice(n, p, &values))?.with_feature_names(names)?;
    if label_idx.is_some() {
        data = data.with_labels(labels)?;
    }
    Ok(data)
}

pub fn read_csv(path: &Path, label_column: Option<&str>) -> Result<Dataset> {
    parse_csv(&fs::read_to_string(path)?, label_column)
}

/// CSV with a header of feature names and, when present, a trailing `label` column.
pub fn dataset_to_csv(data: &Dataset) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = match data.feature_names() {
        Some(names) => names.to_vec(),
        None => (1..=data.p()).map(|j| format!("x{j}")).collect(),
    };
    if data.labels().is_some() {
        header.push("label".into());
    }
    w.write_record(&header)?;
    for i in 0..data.n() {
        let mut row: Vec<String> = data.y().row(i).iter().map(|v| v.to_string()).collect();
        if let Some(l) = data.labels() {
            row.push(l[i].to_string());
        }
        w.write_record(&row)?;
    }
    finish_csv(w)
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    atomic_write(path, dataset_to_csv(data)?.as_bytes())
}

pub fn write_model(path: &Path, model: &MixtureModel) -> Result<()> {
    let mut text = serde_json::to_string_pretty(model)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

pub fn read_model(path: &Path) -> Result<MixtureModel> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// `row, label, gamma_1 … gamma_K`, with 1-based rows and labels.
pub fn assignments_to_csv(result: &FitResult) -> Result<String> {
    let k = result.responsibilities.gamma.ncols();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["row".to_string(), "label".to_string()];
    header.extend((1..=k).map(|j| format!("gamma_{j}")));
    w.write_record(&header)?;
    for (i, &label) in result.hard_assignment.iter().enumerate() {
        let mut row = vec![(i + 1).to_string(), (label + 1).to_string()];
        row.extend(result.responsibilities.gamma.row(i).iter().map(|g| g.to_string()));
        w.write_record(&row)?;
    }
    finish_csv(w)
}

pub fn write_assignments(path: &Path, result: &FitResult) -> Result<()> {
    atomic_write(path, assignments_to_csv(result)?.as_bytes())
}

/// Reads the integer column `column` (default `label`) of a headed CSV.
pub fn read_labels(path: &Path, column: Option<&str>) -> Result<Vec<usize>> {
    let name = column.unwrap_or("label");
    let mut reader = csv::Reader::from_path(path)?;
    let idx = reader.headers()?.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Parse {
        row: 0,
        column: 0,
        message: format!("{} has no column named {name:?}", path.display()),
    })?;
    let mut out = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let cell = record.get(idx).unwrap_or("").trim();
        out.push(cell.parse().map_err(|_| Error::Parse {
            row: r + 1,
            column: idx + 1,
            message: format!("label {cell:?} is not a non-negative integer"),
        })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: PathBuf,
    pub sha256: String,
}

/// Provenance of one CLI run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<InputRecord>,
    pub outputs: Vec<PathBuf>,
    /// Wall-clock seconds per phase, in execution order.
    pub timings: Vec<(String, f64)>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: Vec::new(),
        }
    }

    /// Records `path` with the hash of its current bytes.
    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(InputRecord { path: path.to_path_buf(), sha256: sha256_file(path)? });
        Ok(())
    }

    /// Whether every recorded input still has its recorded hash.
    pub fn inputs_unchanged(&self) -> Result<bool> {
        for input in &self.inputs {
            if sha256_file(&input.path)? != input.sha256 {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        atomic_write(path, text.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}
