use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::layer::{Layer, LayerCache, LayerSpec};
use super::{NnError, Tensor};

/// Samples per deterministic reduction chunk. Chunk boundaries depend only on
/// the batch, never on the thread count.
const CHUNK: usize = 16;

/// Mean squared error over all elements.
pub fn mse(pred: &[f64], target: &[f64]) -> f64 {
    assert_eq!(pred.len(), target.len());
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64
}

/// Sequential network: ordered layers with named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    seed: u64,
}

/// Gradients laid out like the network parameters: `[layer][param][element]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Vec<Vec<f64>>>,
}

impl Gradients {
    pub fn zeros(net: &Network) -> Self {
        Self { layers: net.layers.iter().map(|l| l.params.iter().map(|p| vec![0.0; p.len()]).collect()).collect() }
    }

    pub fn scale(&mut self, factor: f64) {
        self.values_mut().for_each(|v| *v *= factor);
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += b;
        }
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flatten().flatten()
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flatten().flatten()
    }

    pub fn max_abs(&self) -> f64 {
        self.values().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl Network {
    /// Build from specs with seeded Glorot-uniform weights and zero biases.
    pub fn new(input_shape: &[usize], specs: &[LayerSpec], seed: u64) -> Result<Self, NnError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let parts = specs.iter().map(|s| (*s, s.init_params(&mut rng))).collect();
        Self::from_parts(input_shape, parts, seed)
    }

    /// Assemble from explicit parameters, checking every shape.
    pub fn from_parts(input_shape: &[usize], parts: Vec<(LayerSpec, Vec<Tensor>)>, seed: u64) -> Result<Self, NnError> {
        if parts.is_empty() {
            return Err(NnError::InvalidSpec("network has no layers".into()));
        }
        if input_shape.is_empty() || input_shape.len() > 3 || input_shape.contains(&0) {
            return Err(NnError::InvalidSpec(format!("input shape {input_shape:?}")));
        }
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(parts.len());
        for (spec, params) in parts {
            let out = spec.output_shape(&shape)?;
            let expected = spec.param_shapes();
            if params.len() != expected.len() {
                return Err(NnError::InvalidSpec(format!(
                    "{} parameter tensors for a layer that needs {}",
                    params.len(),
                    expected.len()
                )));
            }
            for (p, e) in params.iter().zip(&expected) {
                if p.shape() != e.as_slice() {
                    return Err(NnError::ShapeMismatch { expected: e.clone(), found: p.shape().to_vec() });
                }
            }
            layers.push(Layer { spec, params, input_shape: shape, output_shape: out.clone() });
            shape = out;
        }
        Ok(Self { input_shape: input_shape.to_vec(), layers, seed })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output_shape.iter().product())
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    /// Decompose into `(spec, params)` pairs, the inverse of [`Network::from_parts`].
    pub fn into_parts(self) -> Vec<(LayerSpec, Vec<Tensor>)> {
        self.layers.into_iter().map(|l| (l.spec, l.params)).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.spec.param_count()).sum()
    }

    /// Flattened copy of every parameter, layer by layer.
    pub fn flat_params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.params.iter().flat_map(|p| p.data().iter().copied())).collect()
    }

    /// Mutable view of parameter `param` of layer `layer`.
    pub fn param_mut(&mut self, layer: usize, param: usize) -> &mut [f64] {
        self.layers[layer].params[param].data_mut()
    }

    fn check_input(&self, x: &[f64]) -> Result<(), NnError> {
        if x.len() != self.input_len() {
            return Err(NnError::ShapeMismatch { expected: self.input_shape.clone(), found: vec![x.len()] });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        self.forward_range(x, 0, self.layers.len())
    }

    /// Apply layers `start..end` to `x`, which must match layer `start`'s input.
    pub fn forward_range(&self, x: &[f64], start: usize, end: usize) -> Result<Vec<f64>, NnError> {
        assert!(start < end && end <= self.layers.len(), "layer range {start}..{end}");
        let want: usize = self.layers[start].input_shape.iter().product();
        if x.len() != want {
            return Err(NnError::ShapeMismatch {
                expected: self.layers[start].input_shape.clone(),
                found: vec![x.len()],
            });
        }
        let mut a = x.to_vec();
        for (k, layer) in self.layers[start..end].iter().enumerate() {
            a = layer.forward(&a).0;
            if a.iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFinite { layer: start + k });
            }
        }
        Ok(a)
    }

    /// Forward every row of a row-major input matrix, in parallel.
    pub fn predict(&self, inputs: &[f64]) -> Result<Vec<f64>, NnError> {
        let m = self.input_len();
        if !inputs.len().is_multiple_of(m) {
            return Err(NnError::ShapeMismatch { expected: self.input_shape.clone(), found: vec![inputs.len()] });
        }
        let rows: Vec<Vec<f64>> = inputs.par_chunks(m).map(|x| self.forward(x)).collect::<Result<_, _>>()?;
        Ok(rows.concat())
    }

    /// [`Network::forward_range`] over every row of a row-major matrix.
    pub fn predict_range(&self, inputs: &[f64], start: usize, end: usize) -> Result<Vec<f64>, NnError> {
        let m: usize = self.layers[start].input_shape.iter().product();
        if !inputs.len().is_multiple_of(m) {
            return Err(NnError::ShapeMismatch {
                expected: self.layers[start].input_shape.clone(),
                found: vec![inputs.len()],
            });
        }
        let rows: Vec<Vec<f64>> =
            inputs.par_chunks(m).map(|x| self.forward_range(x, start, end)).collect::<Result<_, _>>()?;
        Ok(rows.concat())
    }

    /// Mean squared error of the network over a row-major dataset.
    pub fn loss(&self, inputs: &[f64], targets: &[f64]) -> Result<f64, NnError> {
        let pred = self.predict(inputs)?;
        if pred.len() != targets.len() {
            return Err(NnError::ShapeMismatch { expected: vec![pred.len()], found: vec![targets.len()] });
        }
        Ok(mse(&pred, targets))
    }

    fn sample_gradients(&self, x: &[f64], target: &[f64], scale: f64, grads: &mut Gradients) -> Result<f64, NnError> {
        self.check_input(x)?;
        let mut caches: Vec<LayerCache> = Vec::with_capacity(self.layers.len());
        let mut a = x.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let (out, cache) = layer.forward(&a);
            if out.iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFinite { layer: k });
            }
            caches.push(cache);
            a = out;
        }
        if a.len() != target.len() {
            return Err(NnError::ShapeMismatch { expected: vec![a.len()], found: vec![target.len()] });
        }
        let mut sq = 0.0;
        let mut g: Vec<f64> = a
            .iter()
            .zip(target)
            .map(|(y, t)| {
                sq += (y - t) * (y - t);
                2.0 * (y - t) * scale
            })
            .collect();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            g = layer.backward(&caches[k], &g, &mut grads.layers[k]);
        }
        Ok(sq)
    }

    /// Loss and exact gradients of the batch mean squared error over the
    /// samples `indices` of row-major `inputs`/`targets`.
    ///
    /// The batch is split into fixed-size chunks evaluated in parallel and
    /// summed in chunk order, so the result does not depend on thread count.
    pub fn gradients(&self, inputs: &[f64], targets: &[f64], indices: &[usize]) -> Result<(f64, Gradients), NnError> {
        let m = self.input_len();
        let k = self.output_len();
        if indices.is_empty() {
            return Ok((0.0, Gradients::zeros(self)));
        }
        let scale = 1.0 / (indices.len() * k) as f64;
        let partials: Vec<(f64, Gradients)> = indices
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut g = Gradients::zeros(self);
                let mut sq = 0.0;
                for &i in chunk {
                    let x = inputs
                        .get(i * m..(i + 1) * m)
                        .ok_or(NnError::ShapeMismatch { expected: vec![i + 1, m], found: vec![inputs.len()] })?;
                    let t = targets
                        .get(i * k..(i + 1) * k)
                        .ok_or(NnError::ShapeMismatch { expected: vec![i + 1, k], found: vec![targets.len()] })?;
                    sq += self.sample_gradients(x, t, scale, &mut g)?;
                }
                Ok((sq, g))
            })
            .collect::<Result<_, NnError>>()?;
        let mut iter = partials.into_iter();
        let (mut sq, mut total) = iter.next().expect("non-empty batch");
        for (s, g) in iter {
            sq += s;
            total.add(&g);
        }
        Ok((sq * scale, total))
    }

    /// `θ ← θ − lr · grads`.
    pub fn apply_gradients(&mut self, grads: &Gradients, lr: f64) {
        for (layer, gl) in self.layers.iter_mut().zip(&grads.layers) {
            for (p, g) in layer.params.iter_mut().zip(gl) {
                for (w, d) in p.data_mut().iter_mut().zip(g) {
                    *w -= lr * d;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;

    fn tiny() -> Network {
        Network::new(
            &[3],
            &[
                LayerSpec::Dense { inputs: 3, outputs: 4, activation: Activation::Tanh },
                LayerSpec::Dense { inputs: 4, outputs: 2, activation: Activation::Linear },
            ],
            5,
        )
        .unwrap()
    }

    #[test]
    fn zero_gradient_at_target() {
        let net = tiny();
        let x = [0.3, -0.2, 0.9, 1.0, 0.5, -0.5];
        let y = net.predict(&x).unwrap();
        let (loss, g) = net.gradients(&x, &y, &[0, 1]).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn batch_loss_matches_mse() {
        let net = tiny();
        let x = [0.3, -0.2, 0.9, 1.0, 0.5, -0.5];
        let t = [0.1, 0.2, -0.3, 0.4];
        let (loss, _) = net.gradients(&x, &t, &[0, 1]).unwrap();
        assert!((loss - net.loss(&x, &t).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn shape_errors() {
        let net = tiny();
        assert!(matches!(net.forward(&[1.0]), Err(NnError::ShapeMismatch { .. })));
        let bad = Network::new(
            &[3],
            &[
                LayerSpec::Dense { inputs: 3, outputs: 4, activation: Activation::Tanh },
                LayerSpec::Dense { inputs: 5, outputs: 2, activation: Activation::Linear },
            ],
            0,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn chunked_reduction_is_deterministic() {
        let net = tiny();
        let x: Vec<f64> = (0..300).map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0).collect();
        let t: Vec<f64> = (0..200).map(|i| ((i * 31) % 17) as f64 / 8.0 - 1.0).collect();
        let idx: Vec<usize> = (0..100).collect();
        let a = net.gradients(&x, &t, &idx).unwrap();
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| net.gradients(&x, &t, &idx).unwrap());
        assert_eq!(a, b);
    }
}
