use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Gradients, Network, NnError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Stop once the full-dataset loss at the end of an epoch is at or below this.
    #[serde(default)]
    pub target_loss: Option<f64>,
    #[serde(default = "yes")]
    pub shuffle: bool,
}

fn yes() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 32, learning_rate: 1e-3, seed: 0, target_loss: None, shuffle: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Full-dataset loss before the first epoch.
    pub initial_loss: f64,
    /// Full-dataset loss after each completed epoch.
    pub history: Vec<f64>,
    /// Epoch (1-based) at which `target_loss` was first met.
    pub reached_target: Option<usize>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        self.history.last().copied().unwrap_or(self.initial_loss)
    }
}

/// `θ ← θ − lr · grads`.
pub fn sgd_step(net: &mut Network, grads: &Gradients, lr: f64) -> Result<(), NnError> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(NnError::InvalidSpec(format!("learning rate {lr}")));
    }
    net.apply_gradients(grads, lr);
    Ok(())
}

/// Seeded mini-batch SGD on the mean squared error.
///
/// `inputs` and `targets` are row-major with one sample per row. Each epoch
/// visits every sample once in a seeded permutation.
pub fn train(net: &mut Network, inputs: &[f64], targets: &[f64], cfg: &TrainConfig) -> Result<TrainOutcome, NnError> {
    if cfg.batch_size == 0 {
        return Err(NnError::InvalidSpec("batch size 0".into()));
    }
    if !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
        return Err(NnError::InvalidSpec(format!("learning rate {}", cfg.learning_rate)));
    }
    let m = net.input_len();
    let k = net.output_len();
    let n = inputs.len() / m;
    if inputs.len() != n * m || targets.len() != n * k || n == 0 {
        return Err(NnError::ShapeMismatch { expected: vec![n, m, k], found: vec![inputs.len(), targets.len()] });
    }
    let diverged = |epoch: usize, loss: f64| NnError::Diverged { epoch, loss };
    let initial_loss = match net.loss(inputs, targets) {
        Ok(l) if l.is_finite() => l,
        Ok(l) => return Err(diverged(0, l)),
        Err(NnError::NonFinite { .. }) => return Err(diverged(0, f64::NAN)),
        Err(e) => return Err(e),
    };
    let mut outcome = TrainOutcome { initial_loss, history: Vec::with_capacity(cfg.epochs), reached_target: None };
    if cfg.target_loss.is_some_and(|t| initial_loss <= t) {
        outcome.reached_target = Some(0);
        return Ok(outcome);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        for batch in order.chunks(cfg.batch_size) {
            let (_, grads) = match net.gradients(inputs, targets, batch) {
                Ok(r) => r,
                Err(NnError::NonFinite { .. }) => return Err(diverged(epoch, f64::NAN)),
                Err(e) => return Err(e),
            };
            if grads.values().any(|g| !g.is_finite()) {
                return Err(diverged(epoch, f64::NAN));
            }
            net.apply_gradients(&grads, cfg.learning_rate);
        }
        let loss = match net.loss(inputs, targets) {
            Ok(l) => l,
            Err(NnError::NonFinite { .. }) => f64::NAN,
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(diverged(epoch, loss));
        }
        outcome.history.push(loss);
        log::debug!("epoch {epoch}: loss {loss:.6e}");
        if cfg.target_loss.is_some_and(|t| loss <= t) {
            outcome.reached_target = Some(epoch);
            break;
        }
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, LayerSpec, Tensor};

    fn scalar_net(w: f64) -> Network {
        let spec = LayerSpec::Dense { inputs: 1, outputs: 1, activation: Activation::Linear };
        Network::from_parts(
            &[1],
            vec![(spec, vec![Tensor::from_vec(&[1, 1], vec![w]).unwrap(), Tensor::zeros(&[1])])],
            0,
        )
        .unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut net = scalar_net(0.7);
        let before = net.clone();
        let g = Gradients::zeros(&net);
        sgd_step(&mut net, &g, 0.1).unwrap();
        assert_eq!(net, before);
        assert!(sgd_step(&mut net, &g, 0.0).is_err());
    }

    #[test]
    fn one_step_on_quadratic_reduces_loss() {
        let mut net = scalar_net(3.0);
        let x = [1.0];
        let t = [0.0];
        let (l0, g) = net.gradients(&x, &t, &[0]).unwrap();
        sgd_step(&mut net, &g, 0.1).unwrap();
        assert!(net.loss(&x, &t).unwrap() < l0);
    }

    #[test]
    fn zero_epochs_is_identity() {
        let mut net = scalar_net(0.5);
        let before = net.clone();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let out = train(&mut net, &[1.0, 2.0], &[1.0, 2.0], &cfg).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(net, before);
    }

    #[test]
    fn divergence_reports_epoch() {
        let mut net = scalar_net(1.0);
        let x: Vec<f64> = (0..8).map(|i| 10.0 + i as f64).collect();
        let cfg = TrainConfig { epochs: 500, batch_size: 8, learning_rate: 10.0, ..Default::default() };
        match train(&mut net, &x, &[0.0; 8], &cfg) {
            Err(NnError::Diverged { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn same_seed_same_trajectory() {
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let t: Vec<f64> = x.iter().map(|v| 0.3 * v - 0.1).collect();
        let cfg = TrainConfig { epochs: 5, batch_size: 4, learning_rate: 0.05, seed: 9, ..Default::default() };
        let mut a = scalar_net(0.2);
        let mut b = scalar_net(0.2);
        let ha = train(&mut a, &x, &t, &cfg).unwrap();
        let hb = train(&mut b, &x, &t, &cfg).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a, b);
    }
}
