use serde::{Deserialize, Serialize};

use super::{baseline_power, track, Ensemble, EnsembleError};
use crate::signals::RegulationSignal;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitSearch {
    /// Bisection stops once the bracket is narrower than this (kW).
    pub tolerance: f64,
    /// Safety cap on bracket doublings.
    #[serde(default = "default_doublings")]
    pub max_doublings: u32,
}

fn default_doublings() -> u32 {
    40
}

impl Default for LimitSearch {
    fn default() -> Self {
        Self { tolerance: 0.5, max_doublings: default_doublings() }
    }
}

/// Largest sustainable regulation in each direction (kW). `p_minus <= 0 <= p_plus`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLimits {
    pub p_minus: f64,
    pub p_plus: f64,
    pub baseline: f64,
}

/// One-sided binary search for the largest `c >= 0` with `feasible(c)`.
///
/// Assumes feasibility is monotone (feasible at `c` implies feasible below
/// it). Doubles from `start` to bracket the boundary, then bisects until the
/// bracket is narrower than `tolerance`. Returns 0 if `c = 0` is infeasible.
pub fn one_sided_search(start: f64, tolerance: f64, max_doublings: u32, mut feasible: impl FnMut(f64) -> bool) -> f64 {
    if !feasible(0.0) {
        return 0.0;
    }
    let mut lo = 0.0;
    let mut hi = start.max(tolerance);
    let mut doublings = 0;
    while feasible(hi) {
        lo = hi;
        hi *= 2.0;
        doublings += 1;
        if doublings >= max_doublings {
            return lo;
        }
    }
    while hi - lo > tolerance {
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Power limits of `ensemble` against scaled copies of `shape`.
///
/// `P+` is the largest `c` for which tracking `baseline + c * shape` survives
/// the whole shape horizon; `P-` is the negated counterpart for `-c * shape`.
/// The baseline comes from a thermostat-only run over the same horizon.
pub fn power_limits(
    ensemble: &Ensemble,
    shape: &RegulationSignal,
    search: &LimitSearch,
) -> Result<PowerLimits, EnsembleError> {
    if shape.is_empty() {
        return Err(EnsembleError::EmptyHorizon);
    }
    if !shape.normalized {
        return Err(EnsembleError::UnnormalizedShape);
    }
    if !(search.tolerance > 0.0) {
        return Err(EnsembleError::BadTolerance(search.tolerance));
    }
    let baseline = baseline_power(ensemble, shape.len(), shape.dt)?;
    let start = ensemble.max_rated_power();

    let survives = |c: f64| -> bool {
        let samples: Vec<f64> = shape.samples.iter().map(|s| c * s).collect();
        track(ensemble, &samples, shape.dt, baseline, String::new()).map(|t| t.failure_step.is_none()).unwrap_or(false)
    };
    let (p_plus, p_minus) = rayon::join(
        || one_sided_search(start, search.tolerance, search.max_doublings, survives),
        || one_sided_search(start, search.tolerance, search.max_doublings, |c| survives(-c)),
    );
    Ok(PowerLimits { p_minus: if p_minus == 0.0 { 0.0 } else { -p_minus }, p_plus, baseline })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::EnsembleSpec;

    #[test]
    fn search_finds_threshold() {
        let c = one_sided_search(1.0, 1e-3, 40, |c| c <= 13.37);
        assert!(c <= 13.37 && 13.37 - c <= 1e-3);
        assert_eq!(one_sided_search(1.0, 1e-3, 40, |_| false), 0.0);
    }

    #[test]
    fn bisection_postcondition_on_toy() {
        let e = EnsembleSpec::ac(5, 21).build().unwrap();
        let shape = RegulationSignal::constant(1.0, 1800, 1.0);
        let search = LimitSearch { tolerance: 0.25, ..LimitSearch::default() };
        let lim = power_limits(&e, &shape, &search).unwrap();
        assert!(lim.p_minus <= 0.0 && lim.p_plus >= 0.0);
        let run = |c: f64| {
            let samples: Vec<f64> = shape.samples.iter().map(|s| c * s).collect();
            track(&e, &samples, 1.0, lim.baseline, String::new()).unwrap().failure_step.is_none()
        };
        assert!(run(lim.p_plus));
        assert!(!run(lim.p_plus + search.tolerance));
        assert!(run(lim.p_minus));
        assert!(!run(lim.p_minus - search.tolerance));
    }

    #[test]
    fn vanishing_deadband_has_no_flexibility() {
        let mut spec = EnsembleSpec::ac(6, 2);
        spec.ac.deadband = 1e-6;
        let e = spec.build().unwrap();
        let shape = RegulationSignal::constant(1.0, 1200, 1.0);
        let lim = power_limits(&e, &shape, &LimitSearch { tolerance: 0.1, ..Default::default() }).unwrap();
        assert!(lim.p_plus <= e.max_rated_power(), "{lim:?}");
        assert!(lim.p_minus >= -e.max_rated_power(), "{lim:?}");
    }

    #[test]
    fn rejects_bad_shapes() {
        let e = EnsembleSpec::ac(2, 2).build().unwrap();
        let empty = RegulationSignal::constant(1.0, 0, 1.0);
        assert!(matches!(power_limits(&e, &empty, &LimitSearch::default()), Err(EnsembleError::EmptyHorizon)));
        let kw = RegulationSignal::constant(3.0, 10, 1.0);
        assert!(matches!(power_limits(&e, &kw, &LimitSearch::default()), Err(EnsembleError::UnnormalizedShape)));
    }
}
