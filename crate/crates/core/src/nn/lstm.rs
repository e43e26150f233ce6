use super::layer::{dot, sigmoid};
use super::Tensor;

/// Borrowed view of an LSTM layer's parameters. Gate rows are stacked in the
/// order input, forget, candidate, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmWeights<'a> {
    pub inputs: usize,
    pub units: usize,
    /// `[4N, inputs]`
    pub w_x: &'a [f64],
    /// `[4N, N]`
    pub w_h: &'a [f64],
    /// Peepholes `[3N]` for the input, forget and output gates.
    pub w_peep: &'a [f64],
    /// `[4N]`
    pub bias: &'a [f64],
}

impl<'a> LstmWeights<'a> {
    pub fn from_params(params: &'a [Tensor], inputs: usize, units: usize) -> Self {
        Self {
            inputs,
            units,
            w_x: params[0].data(),
            w_h: params[1].data(),
            w_peep: params[2].data(),
            bias: params[3].data(),
        }
    }
}

/// Gate activations and new state of one cell update.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmStep {
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub z: Vec<f64>,
    pub o: Vec<f64>,
    pub c: Vec<f64>,
    pub h: Vec<f64>,
}

/// One peephole LSTM update.
///
/// ```text
/// i = σ(Wxi x + Whi h' + wci ⊙ c' + bi)
/// f = σ(Wxf x + Whf h' + wcf ⊙ c' + bf)
/// z = tanh(Wxz x + Whz h' + bz)
/// c = f ⊙ c' + i ⊙ z
/// o = σ(Wxo x + Who h' + wco ⊙ c' + bo)
/// h = o ⊙ tanh(c)
/// ```
pub fn lstm_step(w: &LstmWeights<'_>, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> LstmStep {
    let n = w.units;
    let pre = |g: usize, k: usize| {
        let row = g * n + k;
        w.bias[row] + dot(&w.w_x[row * w.inputs..(row + 1) * w.inputs], x) + dot(&w.w_h[row * n..(row + 1) * n], h_prev)
    };
    let mut s = LstmStep {
        i: vec![0.0; n],
        f: vec![0.0; n],
        z: vec![0.0; n],
        o: vec![0.0; n],
        c: vec![0.0; n],
        h: vec![0.0; n],
    };
    for k in 0..n {
        s.i[k] = sigmoid(pre(0, k) + w.w_peep[k] * c_prev[k]);
        s.f[k] = sigmoid(pre(1, k) + w.w_peep[n + k] * c_prev[k]);
        s.z[k] = pre(2, k).tanh();
        s.c[k] = s.f[k] * c_prev[k] + s.i[k] * s.z[k];
        s.o[k] = sigmoid(pre(3, k) + w.w_peep[2 * n + k] * c_prev[k]);
        s.h[k] = s.o[k] * s.c[k].tanh();
    }
    s
}

/// Inputs and per-step activations of one sequence, kept for backprop.
#[derive(Debug, Clone)]
pub(crate) struct LstmTrace {
    inputs: Vec<f64>,
    steps: Vec<LstmStep>,
}

impl LstmTrace {
    pub(crate) fn last_hidden(&self) -> &[f64] {
        &self.steps.last().expect("non-empty sequence").h
    }
}

/// Run the cell over `x` (`[steps, inputs]`, row-major) from zero state.
pub(crate) fn forward_sequence(w: &LstmWeights<'_>, x: &[f64], steps: usize) -> LstmTrace {
    let zero = vec![0.0; w.units];
    let mut trace = Vec::with_capacity(steps);
    for t in 0..steps {
        let (h, c) = match trace.last() {
            Some(LstmStep { h, c, .. }) => (h.as_slice(), c.as_slice()),
            None => (zero.as_slice(), zero.as_slice()),
        };
        let s = lstm_step(w, &x[t * w.inputs..(t + 1) * w.inputs], h, c);
        trace.push(s);
    }
    LstmTrace { inputs: x.to_vec(), steps: trace }
}

/// Backprop through time from a gradient on the last hidden state.
/// `grads` is ordered like the layer parameters: `w_x, w_h, w_peep, bias`.
pub(crate) fn backward_sequence(
    w: &LstmWeights<'_>,
    trace: &LstmTrace,
    grad_h_last: &[f64],
    grads: &mut [Vec<f64>],
) -> Vec<f64> {
    let n = w.units;
    let m = w.inputs;
    let zero = vec![0.0; n];
    let mut dx = vec![0.0; trace.inputs.len()];
    let mut dh = grad_h_last.to_vec();
    let mut dc_next = vec![0.0; n];
    let mut da = vec![0.0; 4 * n];

    for t in (0..trace.steps.len()).rev() {
        let s = &trace.steps[t];
        let (h_prev, c_prev) = if t > 0 {
            (trace.steps[t - 1].h.as_slice(), trace.steps[t - 1].c.as_slice())
        } else {
            (zero.as_slice(), zero.as_slice())
        };
        let mut dc_prev = vec![0.0; n];
        for k in 0..n {
            let tc = s.c[k].tanh();
            let d_o = dh[k] * tc;
            let dc = dh[k] * s.o[k] * (1.0 - tc * tc) + dc_next[k];
            let a_i = dc * s.z[k] * s.i[k] * (1.0 - s.i[k]);
            let a_f = dc * c_prev[k] * s.f[k] * (1.0 - s.f[k]);
            let a_z = dc * s.i[k] * (1.0 - s.z[k] * s.z[k]);
            let a_o = d_o * s.o[k] * (1.0 - s.o[k]);
            da[k] = a_i;
            da[n + k] = a_f;
            da[2 * n + k] = a_z;
            da[3 * n + k] = a_o;
            dc_prev[k] = dc * s.f[k] + w.w_peep[k] * a_i + w.w_peep[n + k] * a_f + w.w_peep[2 * n + k] * a_o;
            grads[2][k] += a_i * c_prev[k];
            grads[2][n + k] += a_f * c_prev[k];
            grads[2][2 * n + k] += a_o * c_prev[k];
        }

        let x_t = &trace.inputs[t * m..(t + 1) * m];
        let dx_t = &mut dx[t * m..(t + 1) * m];
        let mut dh_prev = vec![0.0; n];
        for (row, &a) in da.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            grads[3][row] += a;
            let gx = &mut grads[0][row * m..(row + 1) * m];
            for (g, xv) in gx.iter_mut().zip(x_t) {
                *g += a * xv;
            }
            for (d, wv) in dx_t.iter_mut().zip(&w.w_x[row * m..(row + 1) * m]) {
                *d += a * wv;
            }
            if t > 0 {
                let gh = &mut grads[1][row * n..(row + 1) * n];
                for (g, hv) in gh.iter_mut().zip(h_prev) {
                    *g += a * hv;
                }
                for (d, wv) in dh_prev.iter_mut().zip(&w.w_h[row * n..(row + 1) * n]) {
                    *d += a * wv;
                }
            }
        }
        dh = dh_prev;
        dc_next = dc_prev;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensors(inputs: usize, units: usize, f: impl Fn(usize) -> f64) -> Vec<Tensor> {
        let shapes = [vec![4 * units, inputs], vec![4 * units, units], vec![3 * units], vec![4 * units]];
        let mut k = 0;
        shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let data = (0..n).map(|_| {
                    k += 1;
                    f(k)
                });
                Tensor::from_vec(s, data.collect()).unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_weights_zero_state() {
        let p = tensors(3, 2, |_| 0.0);
        let w = LstmWeights::from_params(&p, 3, 2);
        let s = lstm_step(&w, &[1.0, -2.0, 0.5], &[0.0; 2], &[0.0; 2]);
        assert_eq!(s.c, vec![0.0; 2]);
        assert_eq!(s.h, vec![0.0; 2]);
        assert_eq!(s.i, vec![0.5; 2]);
    }

    #[test]
    fn saturated_gates_hold_memory() {
        let mut p = tensors(1, 1, |_| 0.0);
        p[3].data_mut().copy_from_slice(&[-50.0, 50.0, 0.3, 0.0]);
        let w = LstmWeights::from_params(&p, 1, 1);
        let s = lstm_step(&w, &[0.7], &[0.2], &[1.25]);
        assert!((s.c[0] - 1.25).abs() < 1e-15);
    }

    #[test]
    fn two_unit_cell_matches_scalar_evaluation() {
        let p = tensors(2, 2, |k| ((k * 37 % 23) as f64 - 11.0) / 13.0);
        let w = LstmWeights::from_params(&p, 2, 2);
        let x = [0.4, -0.9];
        let h0 = [0.1, -0.3];
        let c0 = [0.5, -0.2];
        let s = lstm_step(&w, &x, &h0, &c0);

        let (wx, wh, wp, b) = (p[0].data(), p[1].data(), p[2].data(), p[3].data());
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for k in 0..2 {
            let a = |g: usize| {
                let r = g * 2 + k;
                b[r] + wx[r * 2] * x[0] + wx[r * 2 + 1] * x[1] + wh[r * 2] * h0[0] + wh[r * 2 + 1] * h0[1]
            };
            let i = sig(a(0) + wp[k] * c0[k]);
            let f = sig(a(1) + wp[2 + k] * c0[k]);
            let z = a(2).tanh();
            let c = f * c0[k] + i * z;
            let o = sig(a(3) + wp[4 + k] * c0[k]);
            let h = o * c.tanh();
            assert!((s.c[k] - c).abs() < 1e-14);
            assert!((s.h[k] - h).abs() < 1e-14);
        }
    }
}
