use rand::Rng;
use serde::{Deserialize, Serialize};

use super::lstm::{self, LstmTrace};
use super::{NnError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Linear => v,
            Activation::Sigmoid => sigmoid(v),
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Whether `s(s(v)) == s(v)` for every `v`, i.e. an identity layer can be
    /// inserted after this activation without changing the function.
    pub fn is_idempotent(self) -> bool {
        matches!(self, Activation::Linear | Activation::Relu)
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Linear => 0,
            Activation::Sigmoid => 1,
            Activation::Tanh => 2,
            Activation::Relu => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Activation::Linear,
            1 => Activation::Sigmoid,
            2 => Activation::Tanh,
            3 => Activation::Relu,
            _ => return None,
        })
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Output length of a 1-D convolution, `(len - extent + 2*padding) / stride + 1`.
/// Configurations whose numerator is not divisible by the stride are rejected.
pub fn conv_output_len(len: usize, extent: usize, stride: usize, padding: usize) -> Result<usize, NnError> {
    let padded = len + 2 * padding;
    if stride == 0 || extent == 0 || padded < extent {
        return Err(NnError::InvalidSpec(format!(
            "conv extent {extent}, stride {stride} on length {len} with padding {padding}"
        )));
    }
    if !(padded - extent).is_multiple_of(stride) {
        return Err(NnError::IndivisibleStride { len, extent, padding, stride });
    }
    Ok((padded - extent) / stride + 1)
}

/// Output length of pooling, `(len - extent) / stride + 1`, divisibility required.
pub fn pool_output_len(len: usize, extent: usize, stride: usize) -> Result<usize, NnError> {
    conv_output_len(len, extent, stride, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    /// `s(W x + b)` with `W` of shape `[outputs, inputs]`. Accepts any input
    /// tensor whose element count is `inputs`.
    Dense { inputs: usize, outputs: usize, activation: Activation },
    /// 1-D convolution over `[length, in_channels]` producing
    /// `[length', filters]`, weights `[filters, extent, in_channels]`.
    Conv1d { in_channels: usize, filters: usize, extent: usize, stride: usize, padding: usize, activation: Activation },
    /// Max pooling along the length axis, channel-wise.
    MaxPool1d { extent: usize, stride: usize },
    /// Peephole LSTM over `[steps, inputs]`, emitting the last hidden state.
    Lstm { inputs: usize, units: usize },
}

impl LayerSpec {
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, NnError> {
        match *self {
            LayerSpec::Dense { inputs, outputs, .. } => {
                let n: usize = input.iter().product();
                if n != inputs {
                    return Err(NnError::ShapeMismatch { expected: vec![inputs], found: input.to_vec() });
                }
                if outputs == 0 {
                    return Err(NnError::InvalidSpec("dense layer with zero outputs".into()));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv1d { in_channels, filters, extent, stride, padding, .. } => {
                let [len, channels] = two_d(input)?;
                if channels != in_channels {
                    return Err(NnError::ShapeMismatch { expected: vec![len, in_channels], found: input.to_vec() });
                }
                if filters == 0 {
                    return Err(NnError::InvalidSpec("conv layer with zero filters".into()));
                }
                Ok(vec![conv_output_len(len, extent, stride, padding)?, filters])
            }
            LayerSpec::MaxPool1d { extent, stride } => {
                let [len, channels] = two_d(input)?;
                Ok(vec![pool_output_len(len, extent, stride)?, channels])
            }
            LayerSpec::Lstm { inputs, units } => {
                let [steps, features] = two_d(input)?;
                if features != inputs || steps == 0 {
                    return Err(NnError::ShapeMismatch { expected: vec![steps.max(1), inputs], found: input.to_vec() });
                }
                if units == 0 {
                    return Err(NnError::InvalidSpec("lstm with zero units".into()));
                }
                Ok(vec![units])
            }
        }
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            LayerSpec::Dense { .. } | LayerSpec::Conv1d { .. } => &["weight", "bias"],
            LayerSpec::MaxPool1d { .. } => &[],
            LayerSpec::Lstm { .. } => &["w_x", "w_h", "w_peep", "bias"],
        }
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Dense { inputs, outputs, .. } => vec![vec![outputs, inputs], vec![outputs]],
            LayerSpec::Conv1d { in_channels, filters, extent, .. } => {
                vec![vec![filters, extent, in_channels], vec![filters]]
            }
            LayerSpec::MaxPool1d { .. } => vec![],
            LayerSpec::Lstm { inputs, units } => {
                vec![vec![4 * units, inputs], vec![4 * units, units], vec![3 * units], vec![4 * units]]
            }
        }
    }

    /// Dense `m -> n`: `mn + n`. Conv: `extent * in_channels * filters + filters`.
    /// Pooling: 0.
    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    pub fn activation(&self) -> Option<Activation> {
        match *self {
            LayerSpec::Dense { activation, .. } | LayerSpec::Conv1d { activation, .. } => Some(activation),
            _ => None,
        }
    }

    pub(crate) fn init_params(&self, rng: &mut impl Rng) -> Vec<Tensor> {
        let glorot = |fan_in: usize, fan_out: usize, shape: &[usize], rng: &mut dyn rand::RngCore| {
            let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-r..r)).collect();
            Tensor::from_vec(shape, data).expect("init shape")
        };
        let shapes = self.param_shapes();
        match *self {
            LayerSpec::Dense { inputs, outputs, .. } => {
                vec![glorot(inputs, outputs, &shapes[0], rng), Tensor::zeros(&shapes[1])]
            }
            LayerSpec::Conv1d { in_channels, filters, extent, .. } => {
                vec![glorot(extent * in_channels, extent * filters, &shapes[0], rng), Tensor::zeros(&shapes[1])]
            }
            LayerSpec::MaxPool1d { .. } => vec![],
            LayerSpec::Lstm { inputs, units } => {
                let mut bias = Tensor::zeros(&shapes[3]);
                // forget gate starts open
                bias.data_mut()[units..2 * units].iter_mut().for_each(|b| *b = 1.0);
                vec![
                    glorot(inputs, units, &shapes[0], rng),
                    glorot(units, units, &shapes[1], rng),
                    Tensor::zeros(&shapes[2]),
                    bias,
                ]
            }
        }
    }
}

fn two_d(input: &[usize]) -> Result<[usize; 2], NnError> {
    match input {
        [a, b] => Ok([*a, *b]),
        _ => Err(NnError::ShapeMismatch { expected: vec![0, 0], found: input.to_vec() }),
    }
}

/// A layer specification with its trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: Vec<Tensor>,
    /// Shape of the per-sample input this layer receives.
    pub(crate) input_shape: Vec<usize>,
    pub(crate) output_shape: Vec<usize>,
}

#[derive(Debug, Clone)]
pub(crate) enum LayerCache {
    Dense { input: Vec<f64>, output: Vec<f64> },
    Conv { input: Vec<f64>, output: Vec<f64> },
    Pool { argmax: Vec<usize>, input_len: usize },
    Lstm(LstmTrace),
}

impl Layer {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn weight(&self) -> &Tensor {
        &self.params[0]
    }

    pub fn bias(&self) -> &Tensor {
        &self.params[1]
    }

    pub(crate) fn forward(&self, x: &[f64]) -> (Vec<f64>, LayerCache) {
        match self.spec {
            LayerSpec::Dense { inputs, outputs, activation } => {
                let w = self.params[0].data();
                let b = self.params[1].data();
                let y: Vec<f64> = (0..outputs)
                    .map(|o| {
                        let row = &w[o * inputs..(o + 1) * inputs];
                        activation.apply(b[o] + dot(row, x))
                    })
                    .collect();
                (y.clone(), LayerCache::Dense { input: x.to_vec(), output: y })
            }
            LayerSpec::Conv1d { in_channels, filters, extent, stride, padding, activation } => {
                let len = self.input_shape[0];
                let out_len = self.output_shape[0];
                let w = self.params[0].data();
                let b = self.params[1].data();
                let mut y = vec![0.0; out_len * filters];
                for h in 0..out_len {
                    for k in 0..filters {
                        let mut acc = b[k];
                        for f in 0..extent {
                            let Some(pos) = (h * stride + f).checked_sub(padding).filter(|&p| p < len) else {
                                continue;
                            };
                            let wk = &w[(k * extent + f) * in_channels..(k * extent + f + 1) * in_channels];
                            acc += dot(wk, &x[pos * in_channels..(pos + 1) * in_channels]);
                        }
                        y[h * filters + k] = activation.apply(acc);
                    }
                }
                (y.clone(), LayerCache::Conv { input: x.to_vec(), output: y })
            }
            LayerSpec::MaxPool1d { extent, stride } => {
                let channels = self.input_shape[1];
                let out_len = self.output_shape[0];
                let mut y = vec![0.0; out_len * channels];
                let mut argmax = vec![0; out_len * channels];
                for h in 0..out_len {
                    for c in 0..channels {
                        let mut best = (h * stride) * channels + c;
                        for f in 1..extent {
                            let idx = (h * stride + f) * channels + c;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                        y[h * channels + c] = x[best];
                        argmax[h * channels + c] = best;
                    }
                }
                (y, LayerCache::Pool { argmax, input_len: x.len() })
            }
            LayerSpec::Lstm { inputs, units } => {
                let weights = lstm::LstmWeights::from_params(&self.params, inputs, units);
                let trace = lstm::forward_sequence(&weights, x, self.input_shape[0]);
                (trace.last_hidden().to_vec(), LayerCache::Lstm(trace))
            }
        }
    }

    /// Accumulate parameter gradients into `grads` and return the gradient
    /// with respect to the layer input.
    pub(crate) fn backward(&self, cache: &LayerCache, grad_out: &[f64], grads: &mut [Vec<f64>]) -> Vec<f64> {
        match (self.spec, cache) {
            (LayerSpec::Dense { inputs, outputs, activation }, LayerCache::Dense { input, output }) => {
                let w = self.params[0].data();
                let mut dx = vec![0.0; inputs];
                let (gw, rest) = grads.split_at_mut(1);
                let gw = &mut gw[0];
                let gb = &mut rest[0];
                for o in 0..outputs {
                    let delta = grad_out[o] * activation.derivative_from_output(output[o]);
                    if delta == 0.0 {
                        continue;
                    }
                    gb[o] += delta;
                    let grow = &mut gw[o * inputs..(o + 1) * inputs];
                    for (g, xi) in grow.iter_mut().zip(input) {
                        *g += delta * xi;
                    }
                    let wrow = &w[o * inputs..(o + 1) * inputs];
                    for (d, wi) in dx.iter_mut().zip(wrow) {
                        *d += delta * wi;
                    }
                }
                dx
            }
            (
                LayerSpec::Conv1d { in_channels, filters, extent, stride, padding, activation },
                LayerCache::Conv { input, output },
            ) => {
                let len = self.input_shape[0];
                let out_len = self.output_shape[0];
                let w = self.params[0].data();
                let mut dx = vec![0.0; input.len()];
                let (gw, rest) = grads.split_at_mut(1);
                let gw = &mut gw[0];
                let gb = &mut rest[0];
                for h in 0..out_len {
                    for k in 0..filters {
                        let idx = h * filters + k;
                        let delta = grad_out[idx] * activation.derivative_from_output(output[idx]);
                        if delta == 0.0 {
                            continue;
                        }
                        gb[k] += delta;
                        for f in 0..extent {
                            let Some(pos) = (h * stride + f).checked_sub(padding).filter(|&p| p < len) else {
                                continue;
                            };
                            let base = (k * extent + f) * in_channels;
                            for c in 0..in_channels {
                                gw[base + c] += delta * input[pos * in_channels + c];
                                dx[pos * in_channels + c] += delta * w[base + c];
                            }
                        }
                    }
                }
                dx
            }
            (LayerSpec::MaxPool1d { .. }, LayerCache::Pool { argmax, input_len }) => {
                let mut dx = vec![0.0; *input_len];
                for (g, &src) in grad_out.iter().zip(argmax) {
                    dx[src] += g;
                }
                dx
            }
            (LayerSpec::Lstm { inputs, units }, LayerCache::Lstm(trace)) => {
                let weights = lstm::LstmWeights::from_params(&self.params, inputs, units);
                lstm::backward_sequence(&weights, trace, grad_out, grads)
            }
            _ => unreachable!("cache does not belong to this layer"),
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
