//! Stacked linear autoencoder whose width-1 code is the virtual-battery state.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::Dataset;
use crate::nn::{train, Activation, LayerSpec, Network, NnError, TrainConfig, TrainOutcome};

/// Hidden widths of the reference schedule for 203 inputs.
const REFERENCE_INPUT: usize = 203;
const REFERENCE_HIDDEN: [usize; 4] = [150, 100, 50, 20];

#[derive(Debug, Error)]
pub enum SaeError {
    #[error("input dimension {0} is too small (need at least 2)")]
    InputTooSmall(usize),
    #[error("network has no width-1 bottleneck layer")]
    NoBottleneck,
    #[error("data has {found} columns, network expects {expected}")]
    Columns { expected: usize, found: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Layer widths, symmetric about the bottleneck of width 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaeSchedule {
    pub widths: Vec<usize>,
    pub linear: bool,
}

impl SaeSchedule {
    /// Scale the reference hidden widths to `input_dim`, keeping them strictly
    /// decreasing toward the bottleneck.
    pub fn for_input(input_dim: usize) -> Result<Self, SaeError> {
        if input_dim < 2 {
            return Err(SaeError::InputTooSmall(input_dim));
        }
        let mut encoder = vec![input_dim];
        for h in REFERENCE_HIDDEN {
            let w = ((h * input_dim) as f64 / REFERENCE_INPUT as f64).round() as usize;
            let prev = *encoder.last().unwrap();
            let w = w.min(prev - 1);
            if w > 1 {
                encoder.push(w);
            }
        }
        let mut widths = encoder.clone();
        widths.push(1);
        widths.extend(encoder.iter().rev());
        Ok(Self { widths, linear: true })
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let activation = if self.linear { Activation::Linear } else { Activation::Relu };
        self.widths.windows(2).map(|w| LayerSpec::Dense { inputs: w[0], outputs: w[1], activation }).collect()
    }
}

/// Fresh seeded SAE for `input_dim` columns.
pub fn build_sae(input_dim: usize, seed: u64) -> Result<Network, SaeError> {
    let schedule = SaeSchedule::for_input(input_dim)?;
    Ok(Network::new(&[input_dim], &schedule.layer_specs(), seed)?)
}

/// Reset the biases around the column means `mu` of `data`: the first layer
/// subtracts `W1 mu`, interior biases are zeroed and the last layer adds `mu`,
/// so a linear network becomes `f(x) = mu + A (x - mu)` with its weight
/// product `A` unchanged. For a linear SAE this is the least-squares optimal
/// intercept given the weights. Inputs stay unnormalized; only biases change.
pub fn center_biases(net: &mut Network, data: &[f64]) -> Result<(), SaeError> {
    let d = net.input_len();
    if data.is_empty() || !data.len().is_multiple_of(d) {
        return Err(SaeError::Columns { expected: d, found: data.len() });
    }
    let rows = (data.len() / d) as f64;
    let mut mu = vec![0.0; d];
    for row in data.chunks(d) {
        mu.iter_mut().zip(row).for_each(|(m, v)| *m += v / rows);
    }
    let last = net.layers().len() - 1;
    if net.output_len() != d || last == 0 {
        return Err(SaeError::Columns { expected: d, found: net.output_len() });
    }
    let w1 = net.layers()[0].weight().clone();
    let h = w1.shape()[0];
    let b1: Vec<f64> = (0..h).map(|r| -(0..d).map(|c| w1.at(r, c) * mu[c]).sum::<f64>()).collect();
    net.param_mut(0, 1).copy_from_slice(&b1);
    for k in 1..last {
        net.param_mut(k, 1).iter_mut().for_each(|b| *b = 0.0);
    }
    net.param_mut(last, 1).copy_from_slice(&mu);
    Ok(())
}

/// Index of the layer that emits the width-1 code.
pub fn bottleneck_index(net: &Network) -> Result<usize, SaeError> {
    net.layers()
        .iter()
        .position(|l| l.output_shape() == [1])
        .filter(|&i| i + 1 < net.layers().len())
        .ok_or(SaeError::NoBottleneck)
}

pub fn encode(net: &Network, row: &[f64]) -> Result<f64, SaeError> {
    let b = bottleneck_index(net)?;
    Ok(net.forward_range(row, 0, b + 1)?[0])
}

pub fn decode(net: &Network, x: f64) -> Result<Vec<f64>, SaeError> {
    let b = bottleneck_index(net)?;
    Ok(net.forward_range(&[x], b + 1, net.layers().len())?)
}

/// Greedy layer-wise pretraining followed by end-to-end fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaeTraining {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of `epochs` spent pretraining each encoder/decoder pair.
    #[serde(default = "default_pretrain")]
    pub pretrain_fraction: f64,
    #[serde(default)]
    pub target_loss: Option<f64>,
}

fn default_pretrain() -> f64 {
    0.1
}

impl Default for SaeTraining {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 1e-6,
            batch_size: 32,
            seed: 0,
            pretrain_fraction: default_pretrain(),
            target_loss: None,
        }
    }
}

impl SaeTraining {
    /// `gain / mean ||x||^2` over the rows of `data`: a step size that stays
    /// below the stability bound of per-sample SGD on unnormalized rows.
    pub fn scaled_learning_rate(data: &[f64], cols: usize, gain: f64) -> f64 {
        let rows = (data.len() / cols.max(1)).max(1) as f64;
        let energy: f64 = data.iter().map(|v| v * v).sum::<f64>() / rows;
        if energy > 0.0 {
            gain / energy
        } else {
            gain
        }
    }

    pub fn pretrain_epochs(&self) -> usize {
        (self.epochs as f64 * self.pretrain_fraction).round() as usize
    }

    fn fine_tune(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.seed,
            target_loss: self.target_loss,
            shuffle: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeOutcome {
    /// Loss history of each pretrained pair, outermost first.
    pub pretrain: Vec<Vec<f64>>,
    pub fine_tune: TrainOutcome,
}

/// Train `net` to reconstruct the row-major `data`.
pub fn train_sae(net: &mut Network, data: &[f64], cfg: &SaeTraining) -> Result<SaeOutcome, SaeError> {
    let d = net.input_len();
    if !data.len().is_multiple_of(d) {
        return Err(SaeError::Columns { expected: d, found: data.len() });
    }
    let pre = cfg.pretrain_epochs();
    let pretrain = if pre > 0 { pretrain_pairs(net, data, pre, cfg)? } else { Vec::new() };
    let fine_tune = train(net, data, data, &cfg.fine_tune())?;
    Ok(SaeOutcome { pretrain, fine_tune })
}

/// Train each `(encoder k, decoder L-1-k)` pair as a shallow autoencoder on
/// the codes produced by the already-trained outer encoders.
fn pretrain_pairs(
    net: &mut Network,
    data: &[f64],
    epochs: usize,
    cfg: &SaeTraining,
) -> Result<Vec<Vec<f64>>, SaeError> {
    let depth = net.layers().len();
    let mut parts = net.clone().into_parts();
    let mut codes = data.to_vec();
    let mut histories = Vec::with_capacity(depth / 2);
    for k in 0..depth / 2 {
        let (enc, dec) = (parts[k].clone(), parts[depth - 1 - k].clone());
        let width = match enc.0 {
            LayerSpec::Dense { inputs, .. } => inputs,
            _ => unreachable!("sae layers are dense"),
        };
        let mut pair = Network::from_parts(&[width], vec![enc, dec], net.seed())?;
        let tc = TrainConfig {
            epochs,
            batch_size: cfg.batch_size,
            learning_rate: cfg.learning_rate,
            seed: cfg.seed.wrapping_add(k as u64 + 1),
            target_loss: None,
            shuffle: true,
        };
        histories.push(train(&mut pair, &codes, &codes, &tc)?.history);
        codes = pair.predict_range(&codes, 0, 1)?;
        let mut trained = pair.into_parts().into_iter();
        parts[k] = trained.next().unwrap();
        parts[depth - 1 - k] = trained.next().unwrap();
    }
    *net = Network::from_parts(net.input_shape(), parts, net.seed())?;
    Ok(histories)
}

/// Encoded state of one simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VbStateSeries {
    /// Seconds between samples.
    pub dt: f64,
    pub x: Vec<f64>,
    /// Regulation request aligned with `x` (kW).
    pub u: Vec<f64>,
    pub signal: String,
    pub start_row: usize,
    /// Set when the run stopped early because tracking failed.
    pub failure_step: Option<usize>,
}

/// Encode every run of `dataset`.
pub fn encode_dataset(net: &Network, dataset: &Dataset) -> Result<Vec<VbStateSeries>, SaeError> {
    if dataset.cols != net.input_len() {
        return Err(SaeError::Columns { expected: net.input_len(), found: dataset.cols });
    }
    let b = bottleneck_index(net)?;
    let codes = net.predict_range(&dataset.data, 0, b + 1)?;
    Ok(dataset
        .runs
        .iter()
        .map(|run| VbStateSeries {
            dt: run.dt,
            x: codes[dataset.run_rows(run)].to_vec(),
            u: run.regulation.clone(),
            signal: run.signal.clone(),
            start_row: run.start_row,
            failure_step: run.failure_step,
        })
        .collect())
}

/// Signed per-device temperature reconstruction errors (reconstructed − true, °F).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionErrors {
    /// `[device][sampled row]`
    pub per_device: Vec<Vec<f64>>,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    /// `[device][bin]`
    pub counts: Vec<Vec<usize>>,
}

impl ReconstructionErrors {
    /// Equal-width histogram over `[min, max]`; values on the upper edge land
    /// in the last bin.
    pub fn histogram(&self, bins: usize) -> Histogram {
        let bins = bins.max(1);
        let (lo, hi) = if self.max > self.min { (self.min, self.max) } else { (self.min - 0.5, self.min + 0.5) };
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
        let counts = self
            .per_device
            .iter()
            .map(|errs| {
                let mut c = vec![0; bins];
                for e in errs {
                    let b = (((e - lo) / width) as usize).min(bins - 1);
                    c[b] += 1;
                }
                c
            })
            .collect();
        Histogram { edges, counts }
    }
}

/// Reconstruction errors on the temperature block of every `stride`-th row.
pub fn reconstruction_errors(
    net: &Network,
    dataset: &Dataset,
    stride: usize,
) -> Result<ReconstructionErrors, SaeError> {
    if dataset.cols != net.input_len() {
        return Err(SaeError::Columns { expected: net.input_len(), found: dataset.cols });
    }
    let rows: Vec<usize> = (0..dataset.rows).step_by(stride.max(1)).collect();
    let block = dataset.layout.temperature_block();
    let mut per_device = vec![Vec::with_capacity(rows.len()); block.len()];
    let input: Vec<f64> = rows.iter().flat_map(|&r| dataset.row(r).iter().copied()).collect();
    let recon = net.predict(&input)?;
    for (k, &r) in rows.iter().enumerate() {
        let truth = dataset.row(r);
        let out = &recon[k * dataset.cols..(k + 1) * dataset.cols];
        for (dev, c) in block.clone().enumerate() {
            per_device[dev].push(out[c] - truth[c]);
        }
    }
    let all = per_device.iter().flatten();
    let min = all.clone().copied().fold(f64::INFINITY, f64::min);
    let max = all.copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(ReconstructionErrors { per_device, min, max })
}
