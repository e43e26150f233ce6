//! Regulation signals: CSV ingestion, scaling to an ensemble, and a seeded
//! band-limited generator standing in for market data.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fraction of aggregate rated power a unit-amplitude signal maps to.
pub const DEFAULT_SCALE_FRACTION: f64 = 0.2;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("row {row}: cannot parse `{text}` as a number")]
    Parse { row: usize, text: String },
    #[error("row {row}: normalized sample {value} outside [-1, 1]")]
    OutOfRange { row: usize, value: f64 },
    #[error("no samples")]
    Empty,
    #[error("time step must be positive and finite, got {0}")]
    BadTimeStep(f64),
    #[error("signal is not normalized")]
    NotNormalized,
    #[error("signal carries no scaling metadata")]
    NotScaled,
    #[error("scale fraction must be in (0, 1], got {0}")]
    BadFraction(f64),
    #[error("rated power must be positive, got {0}")]
    BadRatedPower(f64),
    #[error("duration {duration} s shorter than one step of {dt} s")]
    TooShort { duration: f64, dt: f64 },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalSource {
    File(String),
    Synthetic { seed: u64 },
    Constant,
}

/// Uniformly sampled power-deviation request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegulationSignal {
    /// Sample interval in seconds.
    pub dt: f64,
    pub samples: Vec<f64>,
    pub source: SignalSource,
    /// Samples are dimensionless in [-1, 1] rather than kW.
    pub normalized: bool,
    /// kW per normalized unit when the signal was produced by [`scale_signal`].
    pub scale: Option<f64>,
}

impl RegulationSignal {
    pub fn constant(value: f64, len: usize, dt: f64) -> Self {
        Self {
            dt,
            samples: vec![value; len],
            source: SignalSource::Constant,
            normalized: value.abs() <= 1.0,
            scale: None,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.dt * self.samples.len() as f64
    }

    pub fn mean(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().sum::<f64>() / self.samples.len() as f64
    }

    pub fn tag(&self) -> String {
        match &self.source {
            SignalSource::File(p) => format!("file:{p}"),
            SignalSource::Synthetic { seed } => format!("synthetic:{seed}"),
            SignalSource::Constant => "constant".to_string(),
        }
    }
}

/// Read a one-column CSV of samples.
///
/// A leading comment line `# normalized=true` marks the values as
/// dimensionless; otherwise they are taken as kW. A non-numeric first row is
/// treated as a header.
pub fn load_signal(path: impl AsRef<Path>, dt: f64) -> Result<RegulationSignal, SignalError> {
    let path = path.as_ref();
    if !(dt.is_finite() && dt > 0.0) {
        return Err(SignalError::BadTimeStep(dt));
    }
    let text =
        std::fs::read_to_string(path).map_err(|source| SignalError::Io { path: path.display().to_string(), source })?;
    let mut signal = parse_signal(&text, dt)?;
    signal.source = SignalSource::File(path.display().to_string());
    Ok(signal)
}

pub fn parse_signal(text: &str, dt: f64) -> Result<RegulationSignal, SignalError> {
    let normalized = text
        .lines()
        .map(str::trim)
        .take_while(|l| l.is_empty() || l.starts_with('#'))
        .any(|l| header_flag(l) == Some(true));

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let mut samples = Vec::new();
    for (index, record) in reader.records().enumerate() {
        let record = record?;
        let row = record.position().map(|p| p.line() as usize).unwrap_or(index + 1);
        let field = record.get(0).unwrap_or("");
        if field.is_empty() {
            continue;
        }
        // Files exported by spreadsheets use U+2212 for negatives.
        let cleaned = field.replace('\u{2212}', "-");
        match cleaned.parse::<f64>() {
            Ok(v) if v.is_finite() => {
                if normalized && v.abs() > 1.0 {
                    return Err(SignalError::OutOfRange { row, value: v });
                }
                samples.push(v);
            }
            _ if index == 0 && samples.is_empty() => continue,
            _ => return Err(SignalError::Parse { row, text: field.to_string() }),
        }
    }
    if samples.is_empty() {
        return Err(SignalError::Empty);
    }
    Ok(RegulationSignal { dt, samples, source: SignalSource::File(String::new()), normalized, scale: None })
}

fn header_flag(line: &str) -> Option<bool> {
    let body = line.trim_start_matches('#').trim();
    let (key, value) = body.split_once('=')?;
    if key.trim() != "normalized" {
        return None;
    }
    value.trim().parse().ok()
}

pub fn write_signal_csv(signal: &RegulationSignal, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "# normalized={}", signal.normalized)?;
    for v in &signal.samples {
        writeln!(out, "{v}")?;
    }
    Ok(())
}

/// Map a normalized signal to kW: `u * fraction * ensemble_rated_power`.
pub fn scale_signal(
    signal: &RegulationSignal,
    ensemble_rated_power: f64,
    fraction: f64,
) -> Result<RegulationSignal, SignalError> {
    if !signal.normalized {
        return Err(SignalError::NotNormalized);
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(SignalError::BadFraction(fraction));
    }
    if !(ensemble_rated_power.is_finite() && ensemble_rated_power > 0.0) {
        return Err(SignalError::BadRatedPower(ensemble_rated_power));
    }
    let gain = fraction * ensemble_rated_power;
    Ok(RegulationSignal {
        dt: signal.dt,
        samples: signal.samples.iter().map(|u| u * gain).collect(),
        source: signal.source.clone(),
        normalized: false,
        scale: Some(gain),
    })
}

/// Inverse of [`scale_signal`].
pub fn unscale_signal(signal: &RegulationSignal) -> Result<RegulationSignal, SignalError> {
    let gain = signal.scale.ok_or(SignalError::NotScaled)?;
    Ok(RegulationSignal {
        dt: signal.dt,
        samples: signal.samples.iter().map(|u| u / gain).collect(),
        source: signal.source.clone(),
        normalized: true,
        scale: None,
    })
}

const SYNTH_TONES: usize = 8;

/// Seeded, zero-mean, band-limited signal with peak magnitude one.
///
/// Sum of low-frequency tones (random frequency up to `bandwidth` Hz, random
/// phase and amplitude) plus white noise passed through a first-order filter
/// with cutoff `bandwidth`. The sample mean is removed and the series is
/// divided by its peak magnitude.
pub fn synth_signal(seed: u64, duration: f64, dt: f64, bandwidth: f64) -> Result<RegulationSignal, SignalError> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(SignalError::BadTimeStep(dt));
    }
    if !(duration >= dt) {
        return Err(SignalError::TooShort { duration, dt });
    }
    let len = (duration / dt).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tones: Vec<(f64, f64, f64)> = (0..SYNTH_TONES)
        .map(|_| {
            let freq = rng.gen_range(0.05..1.0) * bandwidth;
            let phase = rng.gen_range(0.0..2.0 * PI);
            let amp = rng.gen_range(0.2..1.0);
            (freq, phase, amp)
        })
        .collect();
    let smoothing = (-2.0 * PI * bandwidth * dt).exp();
    let mut noise = 0.0;
    let mut samples: Vec<f64> = (0..len)
        .map(|k| {
            let t = k as f64 * dt;
            let tonal: f64 = tones.iter().map(|(f, ph, a)| a * (2.0 * PI * f * t + ph).sin()).sum();
            noise = smoothing * noise + (1.0 - smoothing) * rng.gen_range(-1.0..1.0);
            tonal / SYNTH_TONES as f64 + 4.0 * noise
        })
        .collect();

    let mean = samples.iter().sum::<f64>() / len as f64;
    samples.iter_mut().for_each(|v| *v -= mean);
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        samples.iter_mut().for_each(|v| *v = (*v / peak).clamp(-1.0, 1.0));
    }
    Ok(RegulationSignal { dt, samples, source: SignalSource::Synthetic { seed }, normalized: true, scale: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_simple_column() {
        let s = parse_signal("0.0\n0.5\n\u{2212}0.5\n", 1.0).unwrap();
        assert_eq!(s.samples, vec![0.0, 0.5, -0.5]);
        assert!(!s.normalized);
    }

    #[test]
    fn header_comment_and_header_row() {
        let s = parse_signal("# normalized=true\nu\n0.25\n-1.0\n", 2.0).unwrap();
        assert!(s.normalized);
        assert_eq!(s.samples, vec![0.25, -1.0]);
        assert_eq!(s.dt, 2.0);
    }

    #[test]
    fn empty_file_is_an_error() {
        let err = parse_signal("", 1.0).unwrap_err();
        assert_eq!(err.to_string(), "no samples");
        assert!(matches!(parse_signal("# normalized=false\n", 1.0), Err(SignalError::Empty)));
    }

    #[test]
    fn parse_error_names_row() {
        match parse_signal("0.1\n0.2\nabc\n", 1.0) {
            Err(SignalError::Parse { row, text }) => {
                assert_eq!(row, 3);
                assert_eq!(text, "abc");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_signal("# normalized=true\n0.1\n1.5\n", 1.0),
            Err(SignalError::OutOfRange { row: 3, .. })
        ));
    }

    #[test]
    fn two_hour_file_at_one_second() {
        let mut text = String::from("# normalized=true\n");
        for k in 0..7200 {
            text.push_str(&format!("{}\n", ((k as f64) / 600.0).sin()));
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sig.csv");
        std::fs::write(&path, text).unwrap();
        let s = load_signal(&path, 1.0).unwrap();
        assert_eq!(s.len(), 7200);
        assert_eq!(s.duration_s(), 7200.0);
        assert!(matches!(s.source, SignalSource::File(_)));
    }

    #[test]
    fn scaling_examples() {
        let zero = RegulationSignal::constant(0.0, 10, 1.0);
        assert!(scale_signal(&zero, 500.0, 0.3).unwrap().samples.iter().all(|&v| v == 0.0));
        let one = RegulationSignal::constant(1.0, 10, 1.0);
        let scaled = scale_signal(&one, 500.0, 0.2).unwrap();
        assert!(scaled.samples.iter().all(|&v| v == 100.0));
        assert!(matches!(scale_signal(&scaled, 500.0, 0.2), Err(SignalError::NotNormalized)));
        assert!(matches!(scale_signal(&one, 500.0, 0.0), Err(SignalError::BadFraction(_))));
    }

    #[test]
    fn synth_is_deterministic_and_bounded() {
        let a = synth_signal(7, 7200.0, 1.0, 1.0 / 300.0).unwrap();
        let b = synth_signal(7, 7200.0, 1.0, 1.0 / 300.0).unwrap();
        let c = synth_signal(8, 7200.0, 1.0, 1.0 / 300.0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.samples, c.samples);
        assert_eq!(a.len(), 7200);
        assert!(a.samples.iter().all(|v| v.abs() <= 1.0));
        assert!(a.mean().abs() < 0.05);
        assert!(synth_signal(1, 0.5, 1.0, 0.01).is_err());
    }

    proptest! {
        #[test]
        fn scale_round_trip(values in prop::collection::vec(-1.0f64..1.0, 1..50),
                            rated in 1.0f64..1000.0, fraction in 0.01f64..1.0) {
            let s = RegulationSignal { dt: 1.0, samples: values.clone(), source: SignalSource::Constant,
                                       normalized: true, scale: None };
            let back = unscale_signal(&scale_signal(&s, rated, fraction).unwrap()).unwrap();
            for (a, b) in back.samples.iter().zip(&values) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn synth_mean_and_peak(seed in any::<u64>()) {
            let s = synth_signal(seed, 3600.0, 1.0, 1.0 / 200.0).unwrap();
            prop_assert!(s.mean().abs() < 0.05);
            prop_assert!(s.samples.iter().all(|v| v.abs() <= 1.0));
        }
    }
}
