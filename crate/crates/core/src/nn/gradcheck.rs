use serde::Serialize;

use super::{Network, NnError};

/// Gradients smaller than this are compared in absolute terms.
const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// `(layer, param, element)` of the worst entry.
    pub worst: (usize, usize, usize),
    pub checked: usize,
}

/// Compare analytic gradients of the batch MSE against central differences
/// with the given step, over every parameter.
pub fn grad_check(net: &Network, inputs: &[f64], targets: &[f64], step: f64) -> Result<GradCheckReport, NnError> {
    if !(step > 0.0) {
        return Err(NnError::InvalidSpec(format!("finite-difference step {step}")));
    }
    let n = inputs.len() / net.input_len();
    let idx: Vec<usize> = (0..n).collect();
    let (_, analytic) = net.gradients(inputs, targets, &idx)?;
    let mut probe = net.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0, 0), checked: 0 };
    for (l, layer) in analytic.layers.iter().enumerate() {
        for (p, g) in layer.iter().enumerate() {
            for (e, &a) in g.iter().enumerate() {
                let orig = probe.param_mut(l, p)[e];
                probe.param_mut(l, p)[e] = orig + step;
                let up = probe.loss(inputs, targets)?;
                probe.param_mut(l, p)[e] = orig - step;
                let down = probe.loss(inputs, targets)?;
                probe.param_mut(l, p)[e] = orig;
                let num = (up - down) / (2.0 * step);
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(REL_FLOOR);
                if rel > report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst = (l, p, e);
                }
                report.checked += 1;
            }
        }
    }
    Ok(report)
}
