//! First-order virtual battery `dx/dt = -a x - u` with energy limits
//! `[C1, C2]` and power limits `[P-, P+]`, and its identification from
//! encoded ensemble trajectories.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::PowerLimits;
use crate::sae::VbStateSeries;

pub const PHI_SCHEMA_VERSION: u32 = 1;
const SECONDS_PER_HOUR: f64 = 3600.0;

#[derive(Debug, Error)]
pub enum VbError {
    #[error("need at least {need} samples, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("state and regulation series differ in length ({x} vs {u})")]
    Misaligned { x: usize, u: usize },
    #[error("time step must be positive, got {0}")]
    BadTimeStep(f64),
    #[error("non-physical fit: alpha = {alpha}, beta = {beta}, residual rmse = {rmse}")]
    NonPhysical { alpha: f64, beta: f64, rmse: f64 },
    #[error("fit has no regulation sensitivity (beta = {0}); state scale is undetermined")]
    NoInputGain(f64),
    #[error("no feasible trajectories")]
    NoTrajectories,
    #[error("identified parameters violate {0}")]
    Invariant(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("phi json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Exact zero-order-hold step of `dx/dt = -a x - u` over `dt` hours.
pub fn vb_step(x: f64, a: f64, u: f64, dt: f64) -> f64 {
    let (alpha, gain) = discretize(a, dt);
    alpha * x - gain * u
}

/// `(e^{-a dt}, (1 - e^{-a dt}) / a)`, the latter tending to `dt` as `a -> 0`.
pub fn discretize(a: f64, dt: f64) -> (f64, f64) {
    let m = (-a * dt).exp_m1();
    let gain = if a == 0.0 { dt } else { -m / a };
    (1.0 + m, gain)
}

/// Least-squares fit of `x_{t+1} = alpha x_t + beta u_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DissipationFit {
    /// Dissipation rate (1/h).
    pub a: f64,
    pub alpha: f64,
    pub beta: f64,
    /// `-(1 - alpha) / a`, the input gain implied by `a` in kWh per kW.
    pub beta_expected: f64,
    pub residual_rmse: f64,
    /// Residual RMSE over the standard deviation of `x_{t+1}`.
    pub relative_residual: f64,
    pub samples: usize,
}

impl DissipationFit {
    /// Whether the residual exceeds `threshold` relative to the signal spread.
    pub fn is_poor(&self, threshold: f64) -> bool {
        !(self.relative_residual <= threshold)
    }
}

/// Fit over one series sampled every `dt` hours.
pub fn fit_dissipation(x: &[f64], u: &[f64], dt: f64) -> Result<DissipationFit, VbError> {
    fit_dissipation_many(&[(x, u)], dt)
}

/// Pooled fit over several series that share `dt` (hours). Transitions never
/// cross series boundaries.
pub fn fit_dissipation_many(series: &[(&[f64], &[f64])], dt: f64) -> Result<DissipationFit, VbError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(VbError::BadTimeStep(dt));
    }
    let (mut sxx, mut sxu, mut suu, mut sxy, mut suy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut ys = Vec::new();
    for &(x, u) in series {
        if u.len() < x.len().saturating_sub(1) {
            return Err(VbError::Misaligned { x: x.len(), u: u.len() });
        }
        for t in 0..x.len().saturating_sub(1) {
            let (xt, ut, y) = (x[t], u[t], x[t + 1]);
            sxx += xt * xt;
            sxu += xt * ut;
            suu += ut * ut;
            sxy += xt * y;
            suy += ut * y;
            ys.push(y);
        }
    }
    let samples = ys.len();
    if samples < 2 {
        return Err(VbError::TooShort { need: 3, got: samples + 1 });
    }
    let det = sxx * suu - sxu * sxu;
    let (alpha, beta) = if det > 1e-12 * sxx * suu && det > 0.0 {
        ((sxy * suu - suy * sxu) / det, (suy * sxx - sxy * sxu) / det)
    } else if sxx > 0.0 {
        (sxy / sxx, 0.0)
    } else if suu > 0.0 {
        (0.0, suy / suu)
    } else {
        (1.0, 0.0)
    };

    let mut sse = 0.0;
    let mut k = 0;
    for &(x, u) in series {
        for t in 0..x.len().saturating_sub(1) {
            let r = x[t + 1] - alpha * x[t] - beta * u[t];
            sse += r * r;
            k += 1;
        }
    }
    let rmse = (sse / k as f64).sqrt();
    let mean = ys.iter().sum::<f64>() / samples as f64;
    let spread = (ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / samples as f64).sqrt();
    let relative_residual = if spread > 0.0 {
        rmse / spread
    } else if rmse == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };

    if !(alpha > 0.0) {
        return Err(VbError::NonPhysical { alpha, beta, rmse });
    }
    let a = if alpha == 1.0 { 0.0 } else { -alpha.ln() / dt };
    let beta_expected = -discretize(a, dt).1;
    Ok(DissipationFit { a, alpha, beta, beta_expected, residual_rmse: rmse, relative_residual, samples })
}

/// Envelope `[min, max]` over all trajectories, rounded outward to a
/// multiple of `precision` (no rounding when `precision <= 0`).
pub fn energy_limits<'a>(
    trajectories: impl IntoIterator<Item = &'a [f64]>,
    precision: f64,
) -> Result<(f64, f64), VbError> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for t in trajectories {
        for &v in t {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if lo > hi {
        return Err(VbError::NoTrajectories);
    }
    if precision > 0.0 {
        lo = (lo / precision).floor() * precision;
        hi = (hi / precision).ceil() * precision;
    }
    Ok((lo, hi))
}

/// `phi = [a, C1, C2, x0, P-, P+]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VbParams {
    pub a: f64,
    #[serde(rename = "C1")]
    pub c1: f64,
    #[serde(rename = "C2")]
    pub c2: f64,
    pub x0: f64,
    #[serde(rename = "P_minus")]
    pub p_minus: f64,
    #[serde(rename = "P_plus")]
    pub p_plus: f64,
}

impl VbParams {
    pub fn check(&self) -> Result<(), VbError> {
        let fail = |what: &str| Err(VbError::Invariant(what.to_string()));
        if ![self.a, self.c1, self.c2, self.x0, self.p_minus, self.p_plus].iter().all(|v| v.is_finite()) {
            return fail("finiteness");
        }
        if !(self.c1 <= self.x0 && self.x0 <= self.c2) {
            return fail("C1 <= x0 <= C2");
        }
        if !(self.p_minus <= 0.0 && 0.0 <= self.p_plus) {
            return fail("P- <= 0 <= P+");
        }
        if !(self.a >= 0.0) {
            return fail("a >= 0");
        }
        Ok(())
    }
}

/// The identified parameters as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhiFile {
    pub schema_version: u32,
    pub a: f64,
    #[serde(rename = "C1")]
    pub c1: f64,
    #[serde(rename = "C2")]
    pub c2: f64,
    pub x0: f64,
    #[serde(rename = "P_minus")]
    pub p_minus: f64,
    #[serde(rename = "P_plus")]
    pub p_plus: f64,
    pub units: BTreeMap<String, String>,
    pub provenance: BTreeMap<String, String>,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Diagnostics {
    /// Fit on the forecaster's closed-loop rollouts.
    pub rollout_fit: Option<DissipationFit>,
    /// Fit on the encoded trajectories themselves.
    pub direct_fit: DissipationFit,
    /// kWh per unit of the raw bottleneck code.
    pub state_scale: f64,
    pub baseline_kw: f64,
    pub feasible_runs: usize,
}

impl PhiFile {
    pub fn params(&self) -> VbParams {
        VbParams { a: self.a, c1: self.c1, c2: self.c2, x0: self.x0, p_minus: self.p_minus, p_plus: self.p_plus }
    }

    pub fn to_json(&self) -> Result<String, VbError> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self, VbError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn store(&self, path: impl AsRef<Path>) -> Result<(), VbError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|source| VbError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, VbError> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|source| VbError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentifyConfig {
    /// Outward rounding step for `C1`, `C2` (kWh).
    pub precision: f64,
    /// A fitted `alpha` in `(1, 1 + tolerance]` is read as `a = 0`.
    pub alpha_tolerance: f64,
}

impl Default for IdentifyConfig {
    fn default() -> Self {
        Self { precision: 0.01, alpha_tolerance: 1e-3 }
    }
}

/// Inputs to [`identify`]. Every series has `x` as raw bottleneck codes,
/// `u` in kW and `dt` in seconds.
#[derive(Debug, Clone, Copy)]
pub struct Evidence<'a> {
    pub encoded: &'a [VbStateSeries],
    /// Closed-loop forecaster outputs, `x[0]` the true initial code followed by
    /// the predictions.
    pub rollouts: &'a [VbStateSeries],
    pub power: PowerLimits,
}

fn pooled_fit(series: &[VbStateSeries]) -> Result<DissipationFit, VbError> {
    let dt = series.first().ok_or(VbError::NoTrajectories)?.dt;
    if series.iter().any(|s| s.dt != dt) {
        return Err(VbError::BadTimeStep(f64::NAN));
    }
    let parts: Vec<(&[f64], &[f64])> = series.iter().map(|s| (s.x.as_slice(), s.u.as_slice())).collect();
    fit_dissipation_many(&parts, dt / SECONDS_PER_HOUR)
}

/// Snap `alpha` slightly above one to a pure integrator.
fn tolerate(mut fit: DissipationFit, cfg: &IdentifyConfig, dt_h: f64) -> DissipationFit {
    if fit.alpha > 1.0 && fit.alpha <= 1.0 + cfg.alpha_tolerance {
        fit.a = 0.0;
        fit.beta_expected = -dt_h;
    }
    fit
}

/// Derive `phi` from encoded trajectories, forecaster rollouts and power limits.
///
/// The bottleneck code is defined only up to an affine map, so it is first
/// calibrated to kWh: the fitted input gain `beta` is matched to the gain
/// `-(1 - alpha)/a` that the model implies for a state measured in kWh and a
/// regulation in kW. `a` comes from the rollout fit when rollouts are given.
pub fn identify(evidence: &Evidence, cfg: &IdentifyConfig) -> Result<PhiFile, VbError> {
    let feasible: Vec<&VbStateSeries> =
        evidence.encoded.iter().filter(|s| s.failure_step.is_none() && s.x.len() >= 2).collect();
    if feasible.is_empty() {
        return Err(VbError::NoTrajectories);
    }
    let dt_h = feasible[0].dt / SECONDS_PER_HOUR;
    let direct = tolerate(pooled_fit(evidence.encoded)?, cfg, dt_h);
    let rollout = if evidence.rollouts.is_empty() {
        None
    } else {
        let dt_r = evidence.rollouts[0].dt / SECONDS_PER_HOUR;
        Some(tolerate(pooled_fit(evidence.rollouts)?, cfg, dt_r))
    };
    let chosen = rollout.unwrap_or(direct);
    if chosen.beta == 0.0 || !chosen.beta.is_finite() {
        return Err(VbError::NoInputGain(chosen.beta));
    }
    let scale = chosen.beta_expected / chosen.beta;

    let calibrated: Vec<Vec<f64>> = feasible.iter().map(|s| s.x.iter().map(|v| v * scale).collect()).collect();
    let (c1, c2) = energy_limits(calibrated.iter().map(Vec::as_slice), cfg.precision)?;
    let x0 = evidence.encoded.first().and_then(|s| s.x.first()).ok_or(VbError::NoTrajectories)? * scale;

    let p = VbParams { a: chosen.a, c1, c2, x0, p_minus: evidence.power.p_minus, p_plus: evidence.power.p_plus };
    p.check()?;

    let units = [("a", "1/h"), ("C1", "kWh"), ("C2", "kWh"), ("x0", "kWh"), ("P_minus", "kW"), ("P_plus", "kW")];
    let a_source = if rollout.is_some() {
        "least squares on forecaster closed-loop rollouts"
    } else {
        "least squares on encoded trajectories"
    };
    let provenance = [
        ("a", a_source),
        ("C1", "minimum of calibrated encoded states over feasible runs, rounded outward"),
        ("C2", "maximum of calibrated encoded states over feasible runs, rounded outward"),
        ("x0", "calibrated encoding of the first dataset row"),
        ("P_minus", "bisection on tracking feasibility, downward direction"),
        ("P_plus", "bisection on tracking feasibility, upward direction"),
    ];
    let map = |v: &[(&str, &str)]| v.iter().map(|(k, s)| (k.to_string(), s.to_string())).collect();
    Ok(PhiFile {
        schema_version: PHI_SCHEMA_VERSION,
        a: p.a,
        c1: p.c1,
        c2: p.c2,
        x0: p.x0,
        p_minus: p.p_minus,
        p_plus: p.p_plus,
        units: map(&units),
        provenance: map(&provenance),
        diagnostics: Diagnostics {
            rollout_fit: rollout,
            direct_fit: direct,
            state_scale: scale,
            baseline_kw: evidence.power.baseline,
            feasible_runs: feasible.len(),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub steps: usize,
    /// State RMSE of the model rollout against the truth (kWh).
    pub rmse: f64,
    /// Fraction of truth samples outside `[C1, C2]`.
    pub violation_fraction: f64,
}

/// Roll the model from `truth[0]` under `u` (kW, every `dt` seconds) and
/// compare with `truth`.
pub fn validate(phi: &VbParams, u: &[f64], dt: f64, truth: &[f64]) -> Result<ValidationReport, VbError> {
    if truth.is_empty() {
        return Err(VbError::TooShort { need: 1, got: 0 });
    }
    if u.len() + 1 < truth.len() {
        return Err(VbError::Misaligned { x: truth.len(), u: u.len() });
    }
    let dt_h = dt / SECONDS_PER_HOUR;
    let mut x = truth[0];
    let mut sse = 0.0;
    for (t, &y) in truth.iter().enumerate() {
        if t > 0 {
            x = vb_step(x, phi.a, u[t - 1], dt_h);
        }
        sse += (x - y) * (x - y);
    }
    let outside = truth.iter().filter(|&&y| y < phi.c1 || y > phi.c2).count();
    Ok(ValidationReport {
        steps: truth.len(),
        rmse: (sse / truth.len() as f64).sqrt(),
        violation_fraction: outside as f64 / truth.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn generate(a: f64, x0: f64, u: &[f64], dt: f64) -> Vec<f64> {
        let mut x = vec![x0];
        for &ut in u {
            x.push(vb_step(*x.last().unwrap(), a, ut, dt));
        }
        x
    }

    #[test]
    fn step_examples() {
        assert_eq!(vb_step(3.5, 0.0, 0.0, 1.0), 3.5);
        assert_eq!(vb_step(3.5, 0.0, 2.0, 0.25), 3.0);
        let x = vb_step(-128.81, 2.348, 0.0, 1.0);
        assert!((x - (-128.81 * (-2.348f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn step_matches_analytic_solution() {
        // x(t) = -u/a + (x0 + u/a) e^{-a t}
        for &(a, u, x0, t) in &[(0.7f64, 1.3, 4.0, 0.5), (2.0, -0.4, -1.0, 0.1), (1e-9, 2.0, 1.0, 1.0)] {
            let exact = -u / a + (x0 + u / a) * (-a * t).exp();
            assert!((vb_step(x0, a, u, t) - exact).abs() < 1e-6_f64.max(1e-12 * exact.abs()), "a={a}");
        }
        let exact = -1.3 / 0.7 + (4.0 + 1.3 / 0.7) * (-0.35f64).exp();
        assert!((vb_step(4.0, 0.7, 1.3, 0.5) - exact).abs() < 1e-12);
    }

    #[test]
    fn fit_inverts_generation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let a = rng.gen_range(0.1..5.0);
            let u: Vec<f64> = (0..400).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let x = generate(a, 1.0, &u, 0.05);
            let fit = fit_dissipation(&x, &u, 0.05).unwrap();
            assert!((fit.a - a).abs() <= 0.01 * a, "a={a} fit={}", fit.a);
            assert!((fit.beta / fit.beta_expected - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_series_has_no_dissipation() {
        let fit = fit_dissipation(&[5.0; 10], &[0.0; 10], 1.0).unwrap();
        assert_eq!(fit.a, 0.0);
        assert!(matches!(fit_dissipation(&[1.0, 2.0], &[0.0, 0.0], 1.0), Err(VbError::TooShort { .. })));
    }

    #[test]
    fn white_noise_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..500).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let u: Vec<f64> = (0..500).map(|_| rng.gen_range(-1.0..1.0)).collect();
        match fit_dissipation(&x, &u, 1.0) {
            Err(VbError::NonPhysical { .. }) => {}
            Ok(fit) => assert!(fit.is_poor(0.5), "{fit:?}"),
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn limits_examples() {
        let c = [2.5; 4];
        assert_eq!(energy_limits([&c[..]], 0.0).unwrap(), (2.5, 2.5));
        let a = [-140.0, 0.0];
        let b = [10.0, 48.0];
        assert_eq!(energy_limits([&a[..], &b[..]], 1.0).unwrap(), (-140.0, 48.0));
        let narrow = energy_limits([&b[..]], 0.01).unwrap();
        let wide = energy_limits([&b[..], &[60.0][..]], 0.01).unwrap();
        assert!(wide.0 <= narrow.0 && wide.1 >= narrow.1);
        assert_eq!(
            energy_limits([&[-1.234][..], &[5.678][..]], 0.1).unwrap(),
            ((-1.234f64 / 0.1).floor() * 0.1, (5.678f64 / 0.1).ceil() * 0.1)
        );
        assert!(energy_limits(std::iter::empty::<&[f64]>(), 0.1).is_err());
    }

    fn synthetic_evidence(code_gain: f64) -> (Vec<VbStateSeries>, PowerLimits) {
        // x(t) = 10 sin(w t) under a = 1.5, u chosen to make each step exact
        let a = 1.5;
        let dt_s = 60.0;
        let (alpha, gain) = discretize(a, dt_s / 3600.0);
        let series = (0..3)
            .map(|k| {
                let phase = k as f64 * 0.7;
                let x: Vec<f64> = (0..721).map(|t| 10.0 * (t as f64 * 0.02 + phase).sin()).collect();
                let u: Vec<f64> =
                    (0..721).map(|t| if t + 1 < x.len() { (alpha * x[t] - x[t + 1]) / gain } else { 0.0 }).collect();
                VbStateSeries {
                    dt: dt_s,
                    x: x.iter().map(|v| v * code_gain).collect(),
                    u,
                    signal: format!("s{k}"),
                    start_row: 0,
                    failure_step: None,
                }
            })
            .collect();
        (series, PowerLimits { p_minus: -20.0, p_plus: 25.0, baseline: 100.0 })
    }

    #[test]
    fn recovers_synthetic_battery() {
        for gain in [1.0, -3.0] {
            let (series, power) = synthetic_evidence(gain);
            let phi =
                identify(&Evidence { encoded: &series, rollouts: &[], power }, &IdentifyConfig::default()).unwrap();
            let p = phi.params();
            assert!((p.a - 1.5).abs() <= 0.075, "{p:?}");
            assert!((p.c1 + 10.0).abs() <= 0.5 && (p.c2 - 10.0).abs() <= 0.5, "{p:?}");
            assert!((p.x0 - 0.0).abs() <= 0.5);
            assert_eq!((p.p_minus, p.p_plus), (-20.0, 25.0));
            p.check().unwrap();
        }
    }

    #[test]
    fn invariant_gate() {
        let (series, _) = synthetic_evidence(1.0);
        let bad = PowerLimits { p_minus: 1.0, p_plus: 2.0, baseline: 0.0 };
        assert!(matches!(
            identify(&Evidence { encoded: &series, rollouts: &[], power: bad }, &IdentifyConfig::default()),
            Err(VbError::Invariant(_))
        ));
        let p = VbParams { a: -0.1, c1: 0.0, c2: 1.0, x0: 0.5, p_minus: 0.0, p_plus: 0.0 };
        assert!(p.check().is_err());
    }

    #[test]
    fn phi_json_round_trips_bit_exactly() {
        let (series, power) = synthetic_evidence(0.37);
        let phi =
            identify(&Evidence { encoded: &series, rollouts: &series, power }, &IdentifyConfig::default()).unwrap();
        let text = phi.to_json().unwrap();
        let back = PhiFile::from_json(&text).unwrap();
        assert_eq!(back, phi);
        assert_eq!(back.to_json().unwrap(), text);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in ["a", "C1", "C2", "x0", "P_minus", "P_plus", "units", "provenance"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn validation_examples() {
        let phi = VbParams { a: 0.8, c1: -5.0, c2: 5.0, x0: 1.0, p_minus: -1.0, p_plus: 1.0 };
        let u: Vec<f64> = (0..200).map(|t| (t as f64 * 0.1).sin()).collect();
        let truth = generate(phi.a, phi.x0, &u, 0.1);
        let r = validate(&phi, &u, 360.0, &truth).unwrap();
        assert_eq!(r.steps, 201);
        assert!(r.rmse < 1e-12);
        let (lo, hi) = energy_limits([truth.as_slice()], 0.01).unwrap();
        let tight = VbParams { c1: lo, c2: hi, ..phi };
        assert_eq!(validate(&tight, &u, 360.0, &truth).unwrap().violation_fraction, 0.0);
        let v = serde_json::to_value(r).unwrap();
        assert!(v.get("rmse").is_some() && v.get("violation_fraction").is_some());
    }
}
