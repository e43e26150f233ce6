//! Artifact formats: `VBDS` binary matrices with a JSON sidecar, CSV
//! import/export, and hashing for manifests.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ensemble::{ColumnLayout, Dataset, RunSpan};

pub const DATASET_MAGIC: &[u8; 4] = b"VBDS";
pub const DATASET_VERSION: u16 = 1;
pub const SIDECAR_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a VBDS file (magic {0:?})")]
    Magic([u8; 4]),
    #[error("unsupported VBDS version {0}")]
    Version(u16),
    #[error("VBDS payload: {0}")]
    Payload(String),
    #[error("sidecar describes {sidecar:?}, matrix is {matrix:?}")]
    SidecarMismatch { sidecar: (usize, usize), matrix: (usize, usize) },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.display().to_string(), source }
}

/// Write a row-major matrix as `VBDS`.
pub fn write_matrix(mut out: impl Write, rows: usize, cols: usize, data: &[f64]) -> std::io::Result<()> {
    assert_eq!(data.len(), rows * cols, "matrix shape");
    let mut buf = Vec::with_capacity(22 + data.len() * 8);
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&(rows as u64).to_le_bytes());
    buf.extend_from_slice(&(cols as u64).to_le_bytes());
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)
}

/// Read a `VBDS` matrix, returning `(rows, cols, data)`.
pub fn read_matrix(mut input: impl Read) -> Result<(usize, usize, Vec<f64>), IoError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes).map_err(io_err(Path::new("<stream>")))?;
    if bytes.len() < 22 {
        return Err(IoError::Payload(format!("{} bytes is shorter than the header", bytes.len())));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if &magic != DATASET_MAGIC {
        return Err(IoError::Magic(magic));
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != DATASET_VERSION {
        return Err(IoError::Version(version));
    }
    let rows = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[14..22].try_into().unwrap()) as usize;
    let expected = rows.checked_mul(cols).and_then(|n| n.checked_mul(8));
    let body = &bytes[22..];
    if expected != Some(body.len()) {
        return Err(IoError::Payload(format!("{rows}x{cols} needs {expected:?} bytes, found {}", body.len())));
    }
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((rows, cols, data))
}

/// Dataset metadata stored beside the `VBDS` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSidecar {
    pub schema_version: u32,
    pub layout: ColumnLayout,
    pub rows: usize,
    pub cols: usize,
    pub runs: Vec<RunSpan>,
}

pub fn sidecar_path(matrix: &Path) -> PathBuf {
    matrix.with_extension("json")
}

/// Write `<path>` (`VBDS`) and its `.json` sidecar.
pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    write_matrix(&mut bytes, dataset.rows, dataset.cols, &dataset.data).map_err(io_err(path))?;
    std::fs::write(path, bytes).map_err(io_err(path))?;
    let side = DatasetSidecar {
        schema_version: SIDECAR_SCHEMA_VERSION,
        layout: dataset.layout,
        rows: dataset.rows,
        cols: dataset.cols,
        runs: dataset.runs.clone(),
    };
    write_json(sidecar_path(path), &side)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, IoError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let (rows, cols, data) = read_matrix(std::io::BufReader::new(file))?;
    let side: DatasetSidecar = read_json(sidecar_path(path))?;
    if (side.rows, side.cols) != (rows, cols) || side.layout.columns() != cols {
        return Err(IoError::SidecarMismatch { sidecar: (side.rows, side.cols), matrix: (rows, cols) });
    }
    Ok(Dataset { layout: side.layout, rows, cols, data, runs: side.runs })
}

/// Column names following the dataset layout.
pub fn column_names(layout: &ColumnLayout) -> Vec<String> {
    let n = layout.devices;
    (1..=n)
        .map(|i| format!("T{i}"))
        .chain((1..=n).map(|i| format!("Tset{i}")))
        .chain(["efficiency", "capacitance", "aggregate"].map(String::from))
        .collect()
}

/// Matrix as CSV with a header row. Floats are written in shortest
/// round-trip form.
pub fn write_matrix_csv(
    out: impl Write,
    header: &[String],
    rows: usize,
    cols: usize,
    data: &[f64],
) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for r in 0..rows {
        w.write_record(data[r * cols..(r + 1) * cols].iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(io_err(Path::new("<csv>")))?;
    Ok(())
}

/// CSV with a header row into `(header, rows, data)`.
pub fn read_matrix_csv(input: impl Read) -> Result<(Vec<String>, usize, Vec<f64>), IoError> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        for field in rec.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| IoError::Payload(format!("row {}: `{field}` is not a number", i + 1)))?;
            data.push(v);
        }
        rows += 1;
    }
    Ok((header, rows, data))
}

pub fn write_dataset_csv(dataset: &Dataset, out: impl Write) -> Result<(), IoError> {
    write_matrix_csv(out, &column_names(&dataset.layout), dataset.rows, dataset.cols, &dataset.data)
}

pub fn write_json(path: impl AsRef<Path>, value: &impl Serialize) -> Result<(), IoError> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T, IoError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String, IoError> {
    let path = path.as_ref();
    Ok(sha256_hex(&std::fs::read(path).map_err(io_err(path))?))
}
