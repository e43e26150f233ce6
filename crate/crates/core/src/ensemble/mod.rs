//! Closed-loop simulation of a homogeneous device ensemble tracking a
//! regulation signal.

mod dataset;
mod dispatch;
mod limits;

pub use dataset::{build_dataset, ColumnLayout, Dataset, DatasetError, RunSpan};
pub use dispatch::{dispatch, dispatch_step, Dispatch};
pub use limits::{one_sided_search, power_limits, LimitSearch, PowerLimits};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signals::RegulationSignal;
use crate::tcl::{AcParams, Ambient, DeviceKind, DeviceParams, DeviceState, TclError, WhParams};

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("ensemble must contain at least one device")]
    Empty,
    #[error("ensemble mixes device kinds")]
    Heterogeneous,
    #[error("horizon must cover at least one step")]
    EmptyHorizon,
    #[error("spread must be in [0, 1), got {0}")]
    BadSpread(f64),
    #[error("signal must be expressed in kW, not normalized units")]
    NormalizedSignal,
    #[error("signal shape must be normalized")]
    UnnormalizedShape,
    #[error("search tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error(transparent)]
    Device(#[from] TclError),
    #[error("worker pool: {0}")]
    Pool(String),
}

/// How to construct an ensemble: a base parameter set, an optional uniform
/// relative perturbation of the thermal parameters, and a seed that also
/// scatters the initial temperatures across the deadband.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub kind: DeviceKind,
    pub count: usize,
    #[serde(default)]
    pub ac: AcParams,
    #[serde(default)]
    pub wh: WhParams,
    /// Outdoor (AC) or room (WH) air temperature, °F.
    pub ambient_temperature: f64,
    /// WH draw-off flow in gal/h. Unset means the flow that gives a 50% duty
    /// cycle at setpoint.
    #[serde(default)]
    pub flow_rate: Option<f64>,
    /// Relative half-width of the uniform perturbation applied per device to
    /// the capacitance and the resistance (AC) or conductance (WH).
    #[serde(default)]
    pub spread: f64,
    pub seed: u64,
}

impl EnsembleSpec {
    pub fn ac(count: usize, seed: u64) -> Self {
        Self {
            kind: DeviceKind::Ac,
            count,
            ac: AcParams::default(),
            wh: WhParams::default(),
            ambient_temperature: 97.0,
            flow_rate: None,
            spread: 0.0,
            seed,
        }
    }

    pub fn wh(count: usize, seed: u64) -> Self {
        Self { kind: DeviceKind::Wh, ambient_temperature: 70.0, ..Self::ac(count, seed) }
    }

    pub fn with_count(&self, count: usize) -> Self {
        Self { count, ..self.clone() }
    }

    pub fn flow(&self) -> f64 {
        match self.kind {
            DeviceKind::Ac => 0.0,
            DeviceKind::Wh => self.flow_rate.unwrap_or_else(|| self.wh.flow_for_duty(self.ambient_temperature, 0.5)),
        }
    }

    pub fn build(&self) -> Result<Ensemble, EnsembleError> {
        if self.count == 0 {
            return Err(EnsembleError::Empty);
        }
        if !(0.0..1.0).contains(&self.spread) {
            return Err(EnsembleError::BadSpread(self.spread));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let jitter = |rng: &mut ChaCha8Rng| {
            if self.spread > 0.0 {
                1.0 + rng.gen_range(-self.spread..self.spread)
            } else {
                1.0
            }
        };
        let mut params = Vec::with_capacity(self.count);
        let mut states = Vec::with_capacity(self.count);
        for _ in 0..self.count {
            let p = match self.kind {
                DeviceKind::Ac => DeviceParams::Ac(AcParams {
                    thermal_capacitance: self.ac.thermal_capacitance * jitter(&mut rng),
                    thermal_resistance: self.ac.thermal_resistance * jitter(&mut rng),
                    ..self.ac
                }),
                DeviceKind::Wh => DeviceParams::Wh(WhParams {
                    tank_capacitance: self.wh.tank_capacitance * jitter(&mut rng),
                    thermal_conductance: self.wh.thermal_conductance * jitter(&mut rng),
                    ..self.wh
                }),
            };
            p.validate()?;
            let half = p.deadband() / 2.0;
            let temperature = p.setpoint() + rng.gen_range(-half..half);
            let power_draw = if rng.gen_bool(0.5) { p.rated_power() } else { 0.0 };
            params.push(p);
            states.push(DeviceState { temperature, power_draw });
        }
        Ensemble::new(params, states, Ambient { temperature: self.ambient_temperature, flow_rate: self.flow() })
    }
}

/// Homogeneous set of devices with their current hybrid states.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    kind: DeviceKind,
    params: Vec<DeviceParams>,
    states: Vec<DeviceState>,
    ambient: Ambient,
}

impl Ensemble {
    pub fn new(params: Vec<DeviceParams>, states: Vec<DeviceState>, ambient: Ambient) -> Result<Self, EnsembleError> {
        let first = params.first().ok_or(EnsembleError::Empty)?;
        let kind = first.kind();
        if params.iter().any(|p| p.kind() != kind) {
            return Err(EnsembleError::Heterogeneous);
        }
        assert_eq!(params.len(), states.len(), "one state per device");
        Ok(Self { kind, params, states, ambient })
    }

    pub fn kind(&self) -> DeviceKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[DeviceParams] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [DeviceParams] {
        &mut self.params
    }

    pub fn states(&self) -> &[DeviceState] {
        &self.states
    }

    pub fn ambient(&self) -> Ambient {
        self.ambient
    }

    pub fn aggregate_power(&self) -> f64 {
        self.states.iter().map(|s| s.power_draw).sum()
    }

    pub fn total_rated_power(&self) -> f64 {
        self.params.iter().map(DeviceParams::rated_power).sum()
    }

    /// Largest single-device rated power: the tracking failure threshold.
    pub fn max_rated_power(&self) -> f64 {
        self.params.iter().map(DeviceParams::rated_power).fold(0.0, f64::max)
    }

    /// Apply on/off decisions, then advance every device by `dt_s`.
    pub fn advance(&mut self, on: &[bool], dt_s: f64) -> Result<(), EnsembleError> {
        for ((p, s), &is_on) in self.params.iter().zip(self.states.iter_mut()).zip(on) {
            s.power_draw = if is_on { p.rated_power() } else { 0.0 };
            *s = p.step(*s, &self.ambient, dt_s)?;
        }
        Ok(())
    }

    /// Advance every device under its own thermostat only.
    pub fn advance_uncontrolled(&mut self, dt_s: f64) -> Result<(), EnsembleError> {
        for (p, s) in self.params.iter().zip(self.states.iter_mut()) {
            *s = p.step(*s, &self.ambient, dt_s)?;
        }
        Ok(())
    }
}

/// Mean aggregate power over a thermostat-only run of `horizon` steps.
pub fn baseline_power(ensemble: &Ensemble, horizon: usize, dt_s: f64) -> Result<f64, EnsembleError> {
    if horizon == 0 {
        return Err(EnsembleError::EmptyHorizon);
    }
    let mut e = ensemble.clone();
    let mut total = 0.0;
    for _ in 0..horizon {
        total += e.aggregate_power();
        e.advance_uncontrolled(dt_s)?;
    }
    Ok(total / horizon as f64)
}

/// Per-step record of a tracking run. Matrices are step-major with one
/// column per device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub devices: usize,
    pub dt: f64,
    pub temperatures: Vec<f64>,
    pub powers: Vec<f64>,
    pub aggregate: Vec<f64>,
    /// Requested deviation u_t (kW).
    pub signal: Vec<f64>,
    pub errors: Vec<f64>,
    pub baseline: f64,
    pub failure_step: Option<usize>,
    pub signal_tag: String,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.aggregate.len()
    }

    pub fn temperatures_at(&self, step: usize) -> &[f64] {
        &self.temperatures[step * self.devices..(step + 1) * self.devices]
    }

    pub fn powers_at(&self, step: usize) -> &[f64] {
        &self.powers[step * self.devices..(step + 1) * self.devices]
    }
}

/// Track `baseline + u_t` step by step. The run stops at the first step whose
/// dispatch error exceeds one device's rated power; that step is recorded as
/// the failure step and is not part of the trajectory.
pub fn simulate_tracking(
    ensemble: &Ensemble,
    signal: &RegulationSignal,
    baseline: f64,
) -> Result<Trajectory, EnsembleError> {
    if signal.normalized && signal.scale.is_none() && signal.samples.iter().any(|&u| u != 0.0) {
        return Err(EnsembleError::NormalizedSignal);
    }
    track(ensemble, &signal.samples, signal.dt, baseline, signal.tag())
}

pub(crate) fn track(
    ensemble: &Ensemble,
    samples: &[f64],
    dt: f64,
    baseline: f64,
    signal_tag: String,
) -> Result<Trajectory, EnsembleError> {
    let n = ensemble.len();
    let threshold = ensemble.max_rated_power();
    let mut e = ensemble.clone();
    let mut traj = Trajectory {
        devices: n,
        dt,
        temperatures: Vec::with_capacity(samples.len() * n),
        powers: Vec::with_capacity(samples.len() * n),
        aggregate: Vec::with_capacity(samples.len()),
        signal: Vec::with_capacity(samples.len()),
        errors: Vec::with_capacity(samples.len()),
        baseline,
        failure_step: None,
        signal_tag,
    };
    for (step, &u) in samples.iter().enumerate() {
        let target = (baseline + u).max(0.0);
        let decision = dispatch_step(&e, target);
        if decision.error > threshold {
            traj.failure_step = Some(step);
            break;
        }
        traj.temperatures.extend(e.states().iter().map(|s| s.temperature));
        let mut agg = 0.0;
        for (p, &on) in e.params().iter().zip(&decision.on) {
            let draw = if on { p.rated_power() } else { 0.0 };
            agg += draw;
            traj.powers.push(draw);
        }
        traj.aggregate.push(agg);
        traj.signal.push(u);
        traj.errors.push(decision.error);
        e.advance(&decision.on, dt)?;
    }
    Ok(traj)
}

/// Run one tracking simulation per signal on a pool of `workers` threads.
/// Output order follows `signals`, independent of the worker count.
pub fn simulate_many(
    ensemble: &Ensemble,
    signals: &[RegulationSignal],
    baseline: f64,
    workers: usize,
) -> Result<Vec<Trajectory>, EnsembleError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| EnsembleError::Pool(e.to_string()))?;
    pool.install(|| signals.par_iter().map(|s| simulate_tracking(ensemble, s, baseline)).collect())
}
