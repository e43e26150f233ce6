//! Run configuration: one JSON document, validated before any stage runs.
//! Every stage seed is derived from the top-level `seed`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::{EnsembleSpec, LimitSearch};
use crate::forecaster::ForecastArch;
use crate::nn::TrainConfig;
use crate::tcl::{AcParams, DeviceKind, WhParams};
use crate::vb::IdentifyConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config field `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub ensemble: EnsembleSection,
    pub signals: SignalSection,
    pub simulation: SimulationSection,
    pub sae: SaeSection,
    #[serde(default)]
    pub transfer: Option<TransferSection>,
    pub forecaster: ForecasterSection,
    pub identify: IdentifySection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSection {
    pub kind: DeviceKind,
    pub count: usize,
    #[serde(default)]
    pub ac: AcParams,
    #[serde(default)]
    pub wh: WhParams,
    pub ambient_temperature: f64,
    #[serde(default)]
    pub flow_rate: Option<f64>,
    #[serde(default)]
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalSection {
    /// One-column CSV files, relative to the config file.
    #[serde(default)]
    pub files: Vec<PathBuf>,
    /// Sample interval of the files (s).
    #[serde(default = "one")]
    pub file_dt: f64,
    /// Number of generated signals.
    #[serde(default)]
    pub synthetic: usize,
    /// Generator bandwidth (Hz).
    #[serde(default = "default_bandwidth")]
    pub bandwidth: f64,
    /// Fraction of aggregate rated power a unit-amplitude signal maps to.
    pub scale_fraction: f64,
    /// Trailing signals kept out of forecaster training and used for validation.
    #[serde(default = "one_usize")]
    pub holdout: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    pub horizon_s: f64,
    pub dt_s: f64,
    /// Keep every `stride`-th simulated step in the dataset.
    #[serde(default = "one_usize")]
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaeSection {
    pub epochs: usize,
    /// Fixed step size. When absent, `lr_gain / mean ||x||^2` is used.
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default = "default_lr_gain")]
    pub lr_gain: f64,
    #[serde(default = "one_usize")]
    pub batch_size: usize,
    #[serde(default)]
    pub pretrain_fraction: f64,
    /// Reset biases to the data mean before training.
    #[serde(default = "yes")]
    pub center_biases: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSection {
    pub new_device_count: usize,
    /// Epoch cap when fine-tuning toward the source's final loss.
    pub max_epochs: usize,
    /// Also train a fresh SAE on the grown ensemble and record its epochs.
    #[serde(default)]
    pub compare_scratch: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecasterSection {
    pub window: usize,
    #[serde(default)]
    pub arch: ForecastArch,
    /// Additional subsampling of the encoded series.
    #[serde(default = "one_usize")]
    pub stride: usize,
    pub stage1: StageSection,
    pub stage2: StageSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentifySection {
    #[serde(default = "default_precision")]
    pub precision: f64,
    #[serde(default = "default_alpha_tolerance")]
    pub alpha_tolerance: f64,
    /// Bisection tolerance for the power limits (kW).
    pub limit_tolerance: f64,
    /// Length of the constant request used for the power limits (s).
    pub limit_horizon_s: f64,
}

fn one() -> f64 {
    1.0
}
fn one_usize() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn default_bandwidth() -> f64 {
    0.002
}
fn default_lr_gain() -> f64 {
    0.5
}
fn default_precision() -> f64 {
    IdentifyConfig::default().precision
}
fn default_alpha_tolerance() -> f64 {
    IdentifyConfig::default().alpha_tolerance
}

/// Independent seed streams per stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Ensemble = 1,
    Signals = 2,
    Sae = 3,
    Transfer = 4,
    Scratch = 5,
    Forecaster = 6,
}

/// SplitMix64 finalizer over `seed` and the stream tag.
pub fn derive_seed(seed: u64, stream: Stream) -> u64 {
    let mut z = seed ^ (stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load and validate; relative signal paths are resolved against the
    /// config's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for f in &mut cfg.signals.files {
            if f.is_relative() {
                *f = base.join(&*f);
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |field: &'static str, reason: &str| Err(ConfigError::Invalid { field, reason: reason.to_string() });
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return bad("schema_version", &format!("expected {CONFIG_SCHEMA_VERSION}"));
        }
        if self.ensemble.count == 0 {
            return bad("ensemble.count", "must be at least 1");
        }
        if !(0.0..1.0).contains(&self.ensemble.spread) {
            return bad("ensemble.spread", "must be in [0, 1)");
        }
        match self.ensemble.kind {
            DeviceKind::Ac => self.ensemble.ac.validate(),
            DeviceKind::Wh => self.ensemble.wh.validate(),
        }
        .or_else(|e| bad("ensemble", &e.to_string()))?;
        let s = &self.signals;
        if s.files.is_empty() && s.synthetic == 0 {
            return bad("signals", "need files or a synthetic count");
        }
        if !(s.scale_fraction > 0.0 && s.scale_fraction <= 1.0) {
            return bad("signals.scale_fraction", "must be in (0, 1]");
        }
        if !(s.bandwidth > 0.0) || !(s.file_dt > 0.0) {
            return bad("signals", "bandwidth and file_dt must be positive");
        }
        if s.holdout >= s.files.len() + s.synthetic {
            return bad("signals.holdout", "must leave at least one training signal");
        }
        let sim = &self.simulation;
        if !(sim.dt_s > 0.0) || !(sim.horizon_s >= sim.dt_s) || sim.stride == 0 {
            return bad("simulation", "need dt_s > 0, horizon_s >= dt_s and stride >= 1");
        }
        if self.sae.learning_rate.is_some_and(|lr| !(lr > 0.0)) || !(self.sae.lr_gain > 0.0) || self.sae.batch_size == 0
        {
            return bad("sae", "learning rate, lr_gain and batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.sae.pretrain_fraction) {
            return bad("sae.pretrain_fraction", "must be in [0, 1]");
        }
        if let Some(t) = &self.transfer {
            if t.new_device_count <= self.ensemble.count {
                return bad("transfer.new_device_count", "must exceed ensemble.count");
            }
        }
        let f = &self.forecaster;
        if f.stride == 0 {
            return bad("forecaster.stride", "must be at least 1");
        }
        for (name, st) in [("forecaster.stage1", &f.stage1), ("forecaster.stage2", &f.stage2)] {
            if st.batch_size == 0 || !(st.learning_rate > 0.0) {
                return bad(name, "batch_size and learning_rate must be positive");
            }
        }
        let d = f.window;
        let conv = crate::nn::conv_output_len(2 * d + 2, f.arch.extent, f.arch.stride, f.arch.padding)
            .and_then(|len| crate::nn::pool_output_len(len, f.arch.pool_extent, f.arch.pool_stride));
        if let Err(e) = conv {
            return bad("forecaster.arch", &e.to_string());
        }
        if f.arch.filters == 0 || f.arch.lstm_units == 0 {
            return bad("forecaster.arch", "filters and lstm_units must be positive");
        }
        let id = &self.identify;
        if !(id.limit_tolerance > 0.0)
            || !(id.limit_horizon_s >= sim.dt_s)
            || !(id.precision >= 0.0)
            || !(id.alpha_tolerance >= 0.0)
        {
            return bad("identify", "limit_tolerance > 0, limit_horizon_s >= dt_s, precision and alpha_tolerance >= 0");
        }
        Ok(())
    }

    /// Ensemble the run starts from.
    pub fn ensemble_spec(&self) -> EnsembleSpec {
        let e = &self.ensemble;
        EnsembleSpec {
            kind: e.kind,
            count: e.count,
            ac: e.ac,
            wh: e.wh,
            ambient_temperature: e.ambient_temperature,
            flow_rate: e.flow_rate,
            spread: e.spread,
            seed: derive_seed(self.seed, Stream::Ensemble),
        }
    }

    /// Ensemble whose battery is identified: the grown one when a transfer
    /// is configured. Its first `count` devices equal the source ensemble.
    pub fn target_spec(&self) -> EnsembleSpec {
        match &self.transfer {
            Some(t) => self.ensemble_spec().with_count(t.new_device_count),
            None => self.ensemble_spec(),
        }
    }

    pub fn identify_config(&self) -> IdentifyConfig {
        IdentifyConfig { precision: self.identify.precision, alpha_tolerance: self.identify.alpha_tolerance }
    }

    pub fn limit_search(&self) -> LimitSearch {
        LimitSearch { tolerance: self.identify.limit_tolerance, ..LimitSearch::default() }
    }

    pub fn stage_train(&self, stage: &StageSection, stream: Stream, salt: u64) -> TrainConfig {
        TrainConfig {
            epochs: stage.epochs,
            batch_size: stage.batch_size,
            learning_rate: stage.learning_rate,
            seed: derive_seed(self.seed, stream).wrapping_add(salt),
            target_loss: None,
            shuffle: true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample() -> RunConfig {
        RunConfig::from_json(include_str!("../../../configs/desk.json")).unwrap()
    }

    #[test]
    fn desk_config_is_valid_and_round_trips() {
        let cfg = sample();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v: serde_json::Value = serde_json::to_value(sample()).unwrap();
        v["sae"]["momentum"] = 0.9.into();
        assert!(matches!(RunConfig::from_json(&v.to_string()), Err(ConfigError::Parse(_))));
        let mut v: serde_json::Value = serde_json::to_value(sample()).unwrap();
        v["extra"] = 1.into();
        assert!(RunConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut c = sample();
        c.ensemble.count = 0;
        assert!(c.validate().is_err());
        let mut c = sample();
        c.forecaster.arch.padding = 0;
        c.forecaster.arch.extent = 4;
        c.forecaster.window = 2;
        assert!(c.validate().is_err(), "pool over 3 samples with stride 2");
        let mut c = sample();
        c.transfer =
            Some(TransferSection { new_device_count: c.ensemble.count, max_epochs: 1, compare_scratch: false });
        assert!(c.validate().is_err());
    }

    #[test]
    fn seeds_are_distinct_per_stream() {
        let s: std::collections::BTreeSet<u64> =
            [Stream::Ensemble, Stream::Signals, Stream::Sae, Stream::Transfer, Stream::Scratch, Stream::Forecaster]
                .into_iter()
                .map(|k| derive_seed(7, k))
                .collect();
        assert_eq!(s.len(), 6);
        assert_ne!(derive_seed(7, Stream::Sae), derive_seed(8, Stream::Sae));
    }
}
