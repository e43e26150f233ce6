use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Ensemble, Trajectory};
use crate::tcl::DeviceKind;

#[derive(Debug, Error, PartialEq)]
pub enum DatasetError {
    #[error("trajectory {index} has {found} devices, ensemble has {expected}")]
    DeviceCount { index: usize, expected: usize, found: usize },
    #[error("row {row} out of range ({rows} rows)")]
    RowOutOfRange { row: usize, rows: usize },
    #[error("data length {len} does not match {rows}x{cols}")]
    Shape { len: usize, rows: usize, cols: usize },
    #[error("stride must be at least 1")]
    ZeroStride,
}

/// Column layout `[T_1..T_N | Tset_1..Tset_N | efficiency | capacitance | aggregate]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnLayout {
    pub kind: DeviceKind,
    pub devices: usize,
}

impl ColumnLayout {
    pub const SHARED_COLUMNS: usize = 3;

    pub fn columns(&self) -> usize {
        2 * self.devices + Self::SHARED_COLUMNS
    }

    pub fn temperature(&self, device: usize) -> usize {
        device
    }

    pub fn setpoint(&self, device: usize) -> usize {
        self.devices + device
    }

    pub fn efficiency(&self) -> usize {
        2 * self.devices
    }

    pub fn capacitance(&self) -> usize {
        2 * self.devices + 1
    }

    pub fn aggregate(&self) -> usize {
        2 * self.devices + 2
    }

    pub fn temperature_block(&self) -> std::ops::Range<usize> {
        0..self.devices
    }
}

/// Contiguous block of dataset rows that came from one regulation signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpan {
    pub signal: String,
    pub start_row: usize,
    pub rows: usize,
    pub failure_step: Option<usize>,
    /// Regulation request aligned with each row (kW).
    pub regulation: Vec<f64>,
    /// Seconds between consecutive rows of this run.
    pub dt: f64,
}

/// Row-major matrix with a known column layout and per-signal provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub layout: ColumnLayout,
    pub rows: usize,
    pub cols: usize,
    #[serde(skip)]
    pub data: Vec<f64>,
    pub runs: Vec<RunSpan>,
}

impl Dataset {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.data[r * self.cols + c]).collect()
    }

    pub fn run_rows(&self, run: &RunSpan) -> std::ops::Range<usize> {
        run.start_row..run.start_row + run.rows
    }

    pub fn with_data(mut self, data: Vec<f64>) -> Result<Self, DatasetError> {
        if data.len() != self.rows * self.cols {
            return Err(DatasetError::Shape { len: data.len(), rows: self.rows, cols: self.cols });
        }
        self.data = data;
        Ok(self)
    }

    /// Keep every `stride`-th row of each run, starting at the run's first row.
    pub fn subsample(&self, stride: usize) -> Result<Dataset, DatasetError> {
        if stride == 0 {
            return Err(DatasetError::ZeroStride);
        }
        let mut data = Vec::new();
        let mut runs = Vec::with_capacity(self.runs.len());
        let mut rows = 0;
        for run in &self.runs {
            let start = rows;
            for r in self.run_rows(run).step_by(stride) {
                data.extend_from_slice(self.row(r));
                rows += 1;
            }
            runs.push(RunSpan {
                signal: run.signal.clone(),
                start_row: start,
                rows: rows - start,
                failure_step: run.failure_step,
                regulation: run.regulation.iter().step_by(stride).copied().collect(),
                dt: run.dt * stride as f64,
            });
        }
        Ok(Dataset { layout: self.layout, rows, cols: self.cols, data, runs })
    }
}

/// Stack trajectories row-wise in order, one column block per feature.
///
/// Device parameters enter as the shared efficiency and capacitance columns,
/// averaged over the ensemble (constant for identical devices).
pub fn build_dataset(trajectories: &[Trajectory], ensemble: &Ensemble) -> Result<Dataset, DatasetError> {
    let n = ensemble.len();
    let layout = ColumnLayout { kind: ensemble.kind(), devices: n };
    let cols = layout.columns();
    for (index, t) in trajectories.iter().enumerate() {
        if t.devices != n {
            return Err(DatasetError::DeviceCount { index, expected: n, found: t.devices });
        }
    }
    let setpoints: Vec<f64> = ensemble.params().iter().map(|p| p.setpoint()).collect();
    let efficiency = ensemble.params().iter().map(|p| p.efficiency()).sum::<f64>() / n as f64;
    let capacitance = ensemble.params().iter().map(|p| p.capacitance()).sum::<f64>() / n as f64;

    let rows: usize = trajectories.iter().map(Trajectory::steps).sum();
    let mut data = Vec::with_capacity(rows * cols);
    let mut runs = Vec::with_capacity(trajectories.len());
    let mut start_row = 0;
    for t in trajectories {
        for step in 0..t.steps() {
            data.extend_from_slice(t.temperatures_at(step));
            data.extend_from_slice(&setpoints);
            data.push(efficiency);
            data.push(capacitance);
            data.push(t.aggregate[step]);
        }
        runs.push(RunSpan {
            signal: t.signal_tag.clone(),
            start_row,
            rows: t.steps(),
            failure_step: t.failure_step,
            regulation: t.signal.clone(),
            dt: t.dt,
        });
        start_row += t.steps();
    }
    Ok(Dataset { layout, rows, cols, data, runs })
}
