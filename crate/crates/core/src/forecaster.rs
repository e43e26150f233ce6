//! Convolution + LSTM forecaster of the VB state, trained in two steps:
//! teacher-forced on ground-truth windows, then fine-tuned on closed-loop
//! windows that carry the model's own predictions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{train, Activation, Extras, LayerSpec, Network, NnError, TrainConfig, TrainOutcome};
use crate::sae::VbStateSeries;

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("series of length {len} is too short for window {d}")]
    TooShort { len: usize, d: usize },
    #[error("state and regulation series differ in length ({x} vs {u})")]
    Misaligned { x: usize, u: usize },
    #[error("regulation covers {have} samples, need {need}")]
    ShortRegulation { have: usize, need: usize },
    #[error("window {found} does not match model window {expected}")]
    Window { expected: usize, found: usize },
    #[error("model file lacks `{0}`")]
    MissingExtra(&'static str),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Supervised windows. Row `i` is `[x_{i-d}..x_i | u_{i-d}..u_i]` (`2d + 2`
/// values, left-padded with `x_0`, `u_0`) and its target is `x_{i+1}`.
/// Windows never straddle two source series; `segments` records the
/// `(first row, rows)` of each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisedSet {
    pub d: usize,
    pub dt: f64,
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
    pub segments: Vec<(usize, usize)>,
}

impl SupervisedSet {
    pub fn width(&self) -> usize {
        2 * self.d + 2
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.inputs[i * w..(i + 1) * w]
    }

    /// Append another set built with the same window.
    pub fn extend(&mut self, other: &SupervisedSet) -> Result<(), ForecastError> {
        if other.d != self.d {
            return Err(ForecastError::Window { expected: self.d, found: other.d });
        }
        let offset = self.len();
        self.inputs.extend_from_slice(&other.inputs);
        self.targets.extend_from_slice(&other.targets);
        self.segments.extend(other.segments.iter().map(|&(s, n)| (s + offset, n)));
        Ok(())
    }
}

/// Windows over one aligned `(x, u)` series of length `N + 1`, giving `N` rows.
pub fn make_supervised(x: &[f64], u: &[f64], d: usize, dt: f64) -> Result<SupervisedSet, ForecastError> {
    if x.len() != u.len() {
        return Err(ForecastError::Misaligned { x: x.len(), u: u.len() });
    }
    if x.len() <= d || x.len() < 2 {
        return Err(ForecastError::TooShort { len: x.len(), d });
    }
    let n = x.len() - 1;
    let mut inputs = Vec::with_capacity(n * (2 * d + 2));
    for i in 0..n {
        let idx = |k: usize| (i + k).saturating_sub(d);
        inputs.extend((0..=d).map(|k| x[idx(k)]));
        inputs.extend((0..=d).map(|k| u[idx(k)]));
    }
    Ok(SupervisedSet { d, dt, inputs, targets: x[1..].to_vec(), segments: vec![(0, n)] })
}

/// Windows for every series, concatenated.
pub fn supervised_from_series(series: &[VbStateSeries], d: usize) -> Result<SupervisedSet, ForecastError> {
    let mut set: Option<SupervisedSet> = None;
    for s in series {
        if s.x.len() <= d.max(1) {
            log::debug!("skipping run `{}`: {} samples", s.signal, s.x.len());
            continue;
        }
        let part = make_supervised(&s.x, &s.u[..s.x.len()], d, s.dt)?;
        match set.as_mut() {
            Some(acc) => acc.extend(&part)?,
            None => set = Some(part),
        }
    }
    set.ok_or(ForecastError::TooShort { len: 0, d })
}

/// Keep every `stride`-th state sample and average the regulation over each
/// interval, so `u[k]` is the mean request applied between `x[k]` and `x[k+1]`.
pub fn downsample(series: &VbStateSeries, stride: usize) -> VbStateSeries {
    let stride = stride.max(1);
    let x: Vec<f64> = series.x.iter().step_by(stride).copied().collect();
    let u: Vec<f64> =
        series.u[..series.x.len()].chunks(stride).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    VbStateSeries { dt: series.dt * stride as f64, x, u, ..series.clone() }
}

/// Layer sizes of the forecaster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastArch {
    pub filters: usize,
    pub extent: usize,
    pub stride: usize,
    pub padding: usize,
    pub pool_extent: usize,
    pub pool_stride: usize,
    pub lstm_units: usize,
}

impl Default for ForecastArch {
    fn default() -> Self {
        Self { filters: 8, extent: 3, stride: 1, padding: 1, pool_extent: 2, pool_stride: 2, lstm_units: 32 }
    }
}

impl ForecastArch {
    /// CONV → RELU → POOL → LSTM → dense(1) over one channel of `2d + 2` values.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        vec![
            LayerSpec::Conv1d {
                in_channels: 1,
                filters: self.filters,
                extent: self.extent,
                stride: self.stride,
                padding: self.padding,
                activation: Activation::Relu,
            },
            LayerSpec::MaxPool1d { extent: self.pool_extent, stride: self.pool_stride },
            LayerSpec::Lstm { inputs: self.filters, units: self.lstm_units },
            LayerSpec::Dense { inputs: self.lstm_units, outputs: 1, activation: Activation::Linear },
        ]
    }
}

/// Affine standardization `(v - mean) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardize {
    pub mean: f64,
    pub scale: f64,
}

impl Standardize {
    pub fn fit(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        Self { mean, scale }
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.scale
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * self.scale + self.mean
    }
}

/// Forecasting network plus its window and input scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastModel {
    pub net: Network,
    pub d: usize,
    pub x_norm: Standardize,
    pub u_norm: Standardize,
}

impl ForecastModel {
    /// Fresh model with scaling fitted to `set`.
    pub fn new(set: &SupervisedSet, arch: &ForecastArch, seed: u64) -> Result<Self, ForecastError> {
        let d = set.d;
        let w = set.width();
        let (xs, us): (Vec<f64>, Vec<f64>) =
            set.inputs.chunks(w).flat_map(|r| (0..=d).map(move |k| (r[k], r[d + 1 + k]))).unzip();
        let net = Network::new(&[w, 1], &arch.layer_specs(), seed)?;
        Ok(Self { net, d, x_norm: Standardize::fit(&xs), u_norm: Standardize::fit(&us) })
    }

    /// Standardized, interleaved `[x, u, x, u, ...]` network input for one
    /// block-layout window; state values sit at even positions.
    pub fn encode_window(&self, row: &[f64]) -> Vec<f64> {
        let d = self.d;
        (0..=d).flat_map(|k| [self.x_norm.apply(row[k]), self.u_norm.apply(row[d + 1 + k])]).collect()
    }

    fn encode_set(&self, set: &SupervisedSet) -> Result<(Vec<f64>, Vec<f64>), ForecastError> {
        if set.d != self.d {
            return Err(ForecastError::Window { expected: self.d, found: set.d });
        }
        let inputs = set.inputs.chunks(set.width()).flat_map(|r| self.encode_window(r)).collect();
        let targets = set.targets.iter().map(|&y| self.x_norm.apply(y)).collect();
        Ok((inputs, targets))
    }

    /// Next state for one block-layout window.
    pub fn predict(&self, row: &[f64]) -> Result<f64, ForecastError> {
        let y = self.net.forward(&self.encode_window(row))?;
        Ok(self.x_norm.invert(y[0]))
    }

    /// One-step predictions for every row of `set`, in parallel.
    pub fn predict_set(&self, set: &SupervisedSet) -> Result<Vec<f64>, ForecastError> {
        let (inputs, _) = self.encode_set(set)?;
        Ok(self.net.predict(&inputs)?.into_iter().map(|y| self.x_norm.invert(y)).collect())
    }

    pub fn extras(&self) -> Extras {
        let mut e = Extras::new();
        e.insert("window".into(), vec![self.d as f64]);
        e.insert("x_norm".into(), vec![self.x_norm.mean, self.x_norm.scale]);
        e.insert("u_norm".into(), vec![self.u_norm.mean, self.u_norm.scale]);
        e
    }

    pub fn from_parts(net: Network, extras: &Extras) -> Result<Self, ForecastError> {
        let pair = |key: &'static str| -> Result<Standardize, ForecastError> {
            match extras.get(key).map(Vec::as_slice) {
                Some(&[mean, scale]) => Ok(Standardize { mean, scale }),
                _ => Err(ForecastError::MissingExtra(key)),
            }
        };
        let d = match extras.get("window").map(Vec::as_slice) {
            Some(&[d]) if d >= 0.0 && d.fract() == 0.0 => d as usize,
            _ => return Err(ForecastError::MissingExtra("window")),
        };
        if net.input_shape() != [2 * d + 2, 1] {
            return Err(ForecastError::Window { expected: d, found: net.input_len().saturating_sub(2) / 2 });
        }
        Ok(Self { net, d, x_norm: pair("x_norm")?, u_norm: pair("u_norm")? })
    }
}

/// Teacher-forced training on ground-truth windows.
pub fn train_stage1(
    model: &mut ForecastModel,
    set: &SupervisedSet,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, ForecastError> {
    let (inputs, targets) = model.encode_set(set)?;
    Ok(train(&mut model.net, &inputs, &targets, cfg)?)
}

/// Windows assembled from the model's own predictions, and those predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    /// Closed-loop windows, same layout as the supervised inputs.
    pub gamma: SupervisedSet,
    /// `beta[i]` predicts `targets[i]`.
    pub beta: Vec<f64>,
}

/// Closed-loop rollout over every segment of `set`.
///
/// For `i < d` the output is the ground truth `Y(i)`. For `i >= d` the state
/// slot holding `x_j` (`j >= 1`) is replaced by the earlier prediction
/// `beta[j - 1]` while regulation entries stay ground truth, and
/// `beta[i] = F(window)`.
pub fn closed_loop_rollout(model: &ForecastModel, set: &SupervisedSet) -> Result<Rollout, ForecastError> {
    if set.d != model.d {
        return Err(ForecastError::Window { expected: model.d, found: set.d });
    }
    let d = set.d;
    let w = set.width();
    let mut gamma = set.clone();
    let mut beta = vec![0.0; set.len()];
    for &(start, rows) in &set.segments {
        for i in 0..rows {
            let r = start + i;
            if i < d {
                beta[r] = set.targets[r];
                continue;
            }
            let window = &mut gamma.inputs[r * w..(r + 1) * w];
            for k in 0..=d {
                // slot k holds x_{i-d+k}
                let j = i + k - d;
                if j >= 1 {
                    window[k] = beta[start + j - 1];
                }
            }
            beta[r] = model.predict(window)?;
        }
    }
    Ok(Rollout { gamma, beta })
}

/// Fine-tune on closed-loop windows against the true targets.
pub fn train_stage2(
    model: &mut ForecastModel,
    rollout: &Rollout,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, ForecastError> {
    train_stage1(model, &rollout.gamma, cfg)
}

/// Root-mean-square error between a rollout and the set's targets.
pub fn rollout_rmse(rollout: &Rollout, set: &SupervisedSet) -> f64 {
    let n = set.len().max(1) as f64;
    (rollout.beta.iter().zip(&set.targets).map(|(b, y)| (b - y) * (b - y)).sum::<f64>() / n).sqrt()
}

/// Autoregressive point forecast of the `steps` states following
/// `x_history`. `u` is aligned with the history and must extend at least
/// `steps` samples past it.
pub fn forecast(model: &ForecastModel, x_history: &[f64], u: &[f64], steps: usize) -> Result<Vec<f64>, ForecastError> {
    let h = x_history.len();
    if h == 0 || h < model.d {
        return Err(ForecastError::TooShort { len: h, d: model.d });
    }
    if steps == 0 {
        return Ok(Vec::new());
    }
    if u.len() < h + steps {
        return Err(ForecastError::ShortRegulation { have: u.len(), need: h + steps });
    }
    let d = model.d;
    let mut xs = x_history.to_vec();
    let mut row = vec![0.0; 2 * d + 2];
    for _ in 0..steps {
        let i = xs.len() - 1;
        for k in 0..=d {
            let idx = (i + k).saturating_sub(d);
            row[k] = xs[idx];
            row[d + 1 + k] = u[idx];
        }
        xs.push(model.predict(&row)?);
    }
    Ok(xs.split_off(h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check, Tensor};

    fn linear_series(len: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let u: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut x = vec![0.5];
        for t in 0..len - 1 {
            x.push(0.9 * x[t] - 0.1 * u[t]);
        }
        (x, u)
    }

    #[test]
    fn window_indexing() {
        let set = make_supervised(&[10.0, 11.0, 12.0], &[0.1, 0.2, 0.3], 1, 1.0).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.row(0), &[10.0, 10.0, 0.1, 0.1]);
        assert_eq!(set.row(1), &[10.0, 11.0, 0.1, 0.2]);
        assert_eq!(set.targets, vec![11.0, 12.0]);

        let c = make_supervised(&[4.0; 6], &[0.0; 6], 2, 1.0).unwrap();
        assert!(c.inputs.chunks(6).all(|r| r == [4.0, 4.0, 4.0, 0.0, 0.0, 0.0]));
        assert!(c.targets.iter().all(|&y| y == 4.0));
        assert!(make_supervised(&[1.0, 2.0], &[0.0, 0.0], 2, 1.0).is_err());
    }

    #[test]
    fn default_arch_shapes() {
        let (x, u) = linear_series(40, 1);
        for d in [1, 4, 7, 12] {
            let set = make_supervised(&x, &u, d, 1.0).unwrap();
            let m = ForecastModel::new(&set, &ForecastArch::default(), 3).unwrap();
            let shapes: Vec<_> = m.net.layers().iter().map(|l| l.output_shape().to_vec()).collect();
            assert_eq!(shapes[0], vec![2 * d + 2, 8]);
            assert_eq!(shapes[1], vec![d + 1, 8]);
            assert_eq!(shapes[3], vec![1]);
        }
    }

    /// A dense model whose output equals `x_{i+1}` for the linear system,
    /// standing in for a perfectly trained forecaster.
    fn oracle(set: &SupervisedSet) -> ForecastModel {
        let d = set.d;
        let w = 2 * d + 2;
        let mut weights = vec![0.0; w];
        weights[2 * d] = 0.9;
        weights[2 * d + 1] = -0.1;
        let spec = LayerSpec::Dense { inputs: w, outputs: 1, activation: Activation::Linear };
        let net = Network::from_parts(
            &[w, 1],
            vec![(spec, vec![Tensor::from_vec(&[1, w], weights).unwrap(), Tensor::zeros(&[1])])],
            0,
        )
        .unwrap();
        let id = Standardize { mean: 0.0, scale: 1.0 };
        ForecastModel { net, d, x_norm: id, u_norm: id }
    }

    #[test]
    fn perfect_model_rollout_matches_truth_and_prefix_is_exact() {
        let (x, u) = linear_series(60, 2);
        let set = make_supervised(&x, &u, 3, 1.0).unwrap();
        let r = closed_loop_rollout(&oracle(&set), &set).unwrap();
        assert_eq!(&r.beta[..3], &set.targets[..3]);
        assert!(rollout_rmse(&r, &set) < 1e-12);
    }

    #[test]
    fn hand_traced_rollout_d1() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let u = [0.5, 0.6, 0.7, 0.8];
        let set = make_supervised(&x, &u, 1, 1.0).unwrap();
        // F(window) = 10 * newest state + newest regulation
        let spec = LayerSpec::Dense { inputs: 4, outputs: 1, activation: Activation::Linear };
        let net = Network::from_parts(
            &[4, 1],
            vec![(spec, vec![Tensor::from_vec(&[1, 4], vec![0.0, 0.0, 10.0, 1.0]).unwrap(), Tensor::zeros(&[1])])],
            0,
        )
        .unwrap();
        let id = Standardize { mean: 0.0, scale: 1.0 };
        let model = ForecastModel { net, d: 1, x_norm: id, u_norm: id };
        let r = closed_loop_rollout(&model, &set).unwrap();
        // i=0: beta0 = Y0 = x1 = 2
        // i=1: window [x0, beta0 | u0, u1] = [1, 2 | .5, .6] -> 20.6
        // i=2: window [beta0, beta1 | u1, u2] = [2, 20.6 | .6, .7] -> 206.7
        assert_eq!(r.beta, vec![2.0, 20.6, 206.7]);
        assert_eq!(r.gamma.row(1), &[1.0, 2.0, 0.5, 0.6]);
        assert_eq!(r.gamma.row(2), &[2.0, 20.6, 0.6, 0.7]);
    }

    #[test]
    fn forecast_lengths_and_dissipation() {
        let (x, u) = linear_series(30, 3);
        let set = make_supervised(&x, &u, 2, 1.0).unwrap();
        let m = oracle(&set);
        assert!(forecast(&m, &[1.0, 2.0, 3.0], &[0.0; 3], 0).unwrap().is_empty());
        let f = forecast(&m, &[4.0, 3.0, 2.0], &[0.0; 20], 15).unwrap();
        assert_eq!(f.len(), 15);
        assert!(f.windows(2).all(|p| p[1].abs() <= p[0].abs()));
        assert!(forecast(&m, &[4.0, 3.0, 2.0], &[0.0; 5], 15).is_err());
    }

    #[test]
    fn stage_one_learns_linear_system() {
        let (x, u) = linear_series(1200, 4);
        let train_set = make_supervised(&x[..1000], &u[..1000], 3, 1.0).unwrap();
        let test_set = make_supervised(&x[1000..], &u[1000..], 3, 1.0).unwrap();
        let mut m = ForecastModel::new(&train_set, &ForecastArch::default(), 5).unwrap();
        let cfg = TrainConfig { epochs: 100, batch_size: 4, learning_rate: 0.01, seed: 1, ..Default::default() };
        let out = train_stage1(&mut m, &train_set, &cfg).unwrap();
        assert!(out.history[9] < out.initial_loss);
        let pred = m.predict_set(&test_set).unwrap();
        let mse = crate::nn::mse(&pred, &test_set.targets);
        assert!(mse <= 1e-4, "held-out mse {mse}");
    }

    #[test]
    fn composite_gradient_check() {
        let (x, u) = linear_series(20, 6);
        let set = make_supervised(&x, &u, 3, 1.0).unwrap();
        let m = ForecastModel::new(&set, &ForecastArch { filters: 3, lstm_units: 4, ..Default::default() }, 7).unwrap();
        let (inputs, targets) = m.encode_set(&set).unwrap();
        let r = grad_check(&m.net, &inputs[..10 * 8], &targets[..10], 1e-6).unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn extras_round_trip() {
        let (x, u) = linear_series(20, 6);
        let set = make_supervised(&x, &u, 2, 1.0).unwrap();
        let m = ForecastModel::new(&set, &ForecastArch::default(), 1).unwrap();
        let back = ForecastModel::from_parts(m.net.clone(), &m.extras()).unwrap();
        assert_eq!(back, m);
        assert!(ForecastModel::from_parts(m.net.clone(), &Extras::new()).is_err());
    }

    #[test]
    fn downsample_averages_regulation() {
        let s = VbStateSeries {
            dt: 1.0,
            x: (0..10).map(f64::from).collect(),
            u: (0..10).map(|v| f64::from(v) * 2.0).collect(),
            signal: "s".into(),
            start_row: 0,
            failure_step: None,
        };
        let d = downsample(&s, 4);
        assert_eq!(d.x, vec![0.0, 4.0, 8.0]);
        assert_eq!(d.u, vec![3.0, 11.0, 17.0]);
        assert_eq!(d.dt, 4.0);
    }
}
