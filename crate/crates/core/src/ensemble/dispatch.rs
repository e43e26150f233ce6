use std::cmp::Ordering;

use crate::tcl::{mandatory_state, DeviceParams, DeviceState};

use super::Ensemble;

/// Outcome of one switching decision.
#[derive(Debug, Clone, PartialEq)]
pub struct Dispatch {
    pub on: Vec<bool>,
    pub aggregate: f64,
    /// |aggregate - target| after switching.
    pub error: f64,
    pub switches: usize,
}

pub fn dispatch_step(ensemble: &Ensemble, target: f64) -> Dispatch {
    dispatch(ensemble.params(), ensemble.states(), target)
}

/// Greedy priority-stack dispatch.
///
/// Devices at a hard deadband edge take their mandatory state. If the
/// aggregate is then below `target`, free devices that are off are turned on
/// in order of decreasing urgency (closest to their forced-on edge first);
/// if above, free devices that are on are turned off starting from the one
/// closest to its forced-off edge. A toggle is kept only if it strictly
/// reduces the tracking error.
pub fn dispatch(params: &[DeviceParams], states: &[DeviceState], target: f64) -> Dispatch {
    let n = params.len();
    let mut on = Vec::with_capacity(n);
    let mut free = Vec::new();
    let mut switches = 0;
    let mut aggregate = 0.0;
    for (i, (p, s)) in params.iter().zip(states).enumerate() {
        let current = s.is_on();
        let next = match mandatory_state(s.temperature, p.setpoint(), p.deadband(), p.mode()) {
            Some(forced) => forced,
            None => {
                free.push(i);
                current
            }
        };
        if next != current {
            switches += 1;
        }
        if next {
            aggregate += p.rated_power();
        }
        on.push(next);
    }

    let raise = aggregate < target;
    let mut candidates: Vec<(usize, f64)> =
        free.into_iter().filter(|&i| on[i] != raise).map(|i| (i, params[i].urgency(states[i].temperature))).collect();
    candidates.sort_by(|a, b| {
        let ord = a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal);
        let ord = if raise { ord.reverse() } else { ord };
        ord.then(a.0.cmp(&b.0))
    });

    for (i, _) in candidates {
        let delta = if raise { params[i].rated_power() } else { -params[i].rated_power() };
        if (aggregate + delta - target).abs() < (aggregate - target).abs() {
            aggregate += delta;
            on[i] = raise;
            switches += 1;
        }
    }

    Dispatch { error: (aggregate - target).abs(), on, aggregate, switches }
}
