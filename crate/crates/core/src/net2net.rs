//! Function-preserving growth of dense networks (wider and deeper), and the
//! input/output expansion used when an ensemble gains devices.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::ColumnLayout;
use crate::nn::{Activation, LayerSpec, Network, NnError, Tensor};

#[derive(Debug, Error)]
pub enum Net2NetError {
    #[error("layer {0} does not exist or has no dense successor")]
    NoSuchLayer(usize),
    #[error("layer {0} is not dense")]
    NotDense(usize),
    #[error("new width {new} must exceed current width {old}")]
    NotWider { old: usize, new: usize },
    #[error("activation {0:?} is not idempotent; an identity layer would change the function")]
    NonIdempotent(Activation),
    #[error("input dimension {0} is not of the form 2N+3")]
    NotEnsembleLayout(usize),
    #[error("target has {new} devices, source has {old}; only growth is supported")]
    Shrink { old: usize, new: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Replication map `g` for one widening: `g(j) = j` below the old width,
/// uniform with replacement above it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WidenPlan {
    pub layer: usize,
    pub old_width: usize,
    pub new_width: usize,
    pub mapping: Vec<usize>,
    pub seed: u64,
}

impl WidenPlan {
    pub fn new(layer: usize, old_width: usize, new_width: usize, seed: u64) -> Result<Self, Net2NetError> {
        Ok(Self { layer, old_width, new_width, mapping: replication_map(old_width, new_width, seed)?, seed })
    }

    /// `|{x : g(x) = k}|` for each old unit `k`.
    pub fn counts(&self) -> Vec<usize> {
        replication_counts(&self.mapping, self.old_width)
    }
}

pub fn replication_map(old: usize, new: usize, seed: u64) -> Result<Vec<usize>, Net2NetError> {
    if new <= old || old == 0 {
        return Err(Net2NetError::NotWider { old, new });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..new).map(|j| if j < old { j } else { rng.gen_range(0..old) }).collect())
}

fn replication_counts(mapping: &[usize], old: usize) -> Vec<usize> {
    let mut c = vec![0; old];
    mapping.iter().for_each(|&g| c[g] += 1);
    c
}

fn dense(net: &Network, i: usize) -> Result<(usize, usize, Activation), Net2NetError> {
    match net.layers().get(i).map(|l| l.spec) {
        Some(LayerSpec::Dense { inputs, outputs, activation }) => Ok((inputs, outputs, activation)),
        Some(_) => Err(Net2NetError::NotDense(i)),
        None => Err(Net2NetError::NoSuchLayer(i)),
    }
}

/// Widen the output of dense layer `i` to `new_width` units, rescaling the
/// incoming weights of dense layer `i + 1` so the function is unchanged.
pub fn widen(net: &Network, i: usize, new_width: usize, seed: u64) -> Result<(Network, WidenPlan), Net2NetError> {
    if i + 1 >= net.layers().len() {
        return Err(Net2NetError::NoSuchLayer(i));
    }
    let (inputs, old, act) = dense(net, i)?;
    let (_, next_out, next_act) = dense(net, i + 1)?;
    let plan = WidenPlan::new(i, old, new_width, seed)?;
    let counts = plan.counts();
    let mut parts = net.clone().into_parts();

    let (w, b) = (parts[i].1[0].data(), parts[i].1[1].data());
    let mut uw = Vec::with_capacity(new_width * inputs);
    let mut ub = Vec::with_capacity(new_width);
    for &g in &plan.mapping {
        uw.extend_from_slice(&w[g * inputs..(g + 1) * inputs]);
        ub.push(b[g]);
    }
    parts[i] = (
        LayerSpec::Dense { inputs, outputs: new_width, activation: act },
        vec![Tensor::from_vec(&[new_width, inputs], uw)?, Tensor::from_vec(&[new_width], ub)?],
    );

    let w2 = parts[i + 1].1[0].data();
    let mut u2 = vec![0.0; next_out * new_width];
    for r in 0..next_out {
        for (j, &g) in plan.mapping.iter().enumerate() {
            u2[r * new_width + j] = w2[r * old + g] / counts[g] as f64;
        }
    }
    let b2 = parts[i + 1].1[1].clone();
    parts[i + 1] = (
        LayerSpec::Dense { inputs: new_width, outputs: next_out, activation: next_act },
        vec![Tensor::from_vec(&[next_out, new_width], u2)?, b2],
    );
    Ok((Network::from_parts(net.input_shape(), parts, net.seed())?, plan))
}

/// Insert an identity dense layer (zero bias, same activation) after layer `i`.
pub fn deepen(net: &Network, i: usize) -> Result<Network, Net2NetError> {
    let (_, width, act) = dense(net, i)?;
    if !act.is_idempotent() {
        return Err(Net2NetError::NonIdempotent(act));
    }
    let mut eye = Tensor::zeros(&[width, width]);
    (0..width).for_each(|k| eye.set(k, k, 1.0));
    let mut parts = net.clone().into_parts();
    parts.insert(
        i + 1,
        (LayerSpec::Dense { inputs: width, outputs: width, activation: act }, vec![eye, Tensor::zeros(&[width])]),
    );
    Ok(Network::from_parts(net.input_shape(), parts, net.seed())?)
}

/// Parameter split of a transferred network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferReport {
    pub source_devices: usize,
    pub target_devices: usize,
    pub source_columns: usize,
    pub target_columns: usize,
    /// Parameters carried over from the source network.
    pub pretrained_parameters: usize,
    /// Parameters added by the expansion.
    pub untrained_parameters: usize,
    /// Source device reused for each target device.
    pub device_map: Vec<usize>,
}

/// Source column feeding each target column: new devices reuse the temperature
/// and setpoint columns of their mapped device; shared columns map to themselves.
pub fn column_map(source: ColumnLayout, target: ColumnLayout, device_map: &[usize]) -> Vec<usize> {
    let mut map = vec![0; target.columns()];
    for (j, &g) in device_map.iter().enumerate() {
        map[target.temperature(j)] = source.temperature(g);
        map[target.setpoint(j)] = source.setpoint(g);
    }
    map[target.efficiency()] = source.efficiency();
    map[target.capacitance()] = source.capacitance();
    map[target.aggregate()] = source.aggregate();
    map
}

fn devices_for(cols: usize) -> Result<usize, Net2NetError> {
    if cols < ColumnLayout::SHARED_COLUMNS + 2 || !(cols - ColumnLayout::SHARED_COLUMNS).is_multiple_of(2) {
        return Err(Net2NetError::NotEnsembleLayout(cols));
    }
    Ok((cols - ColumnLayout::SHARED_COLUMNS) / 2)
}

/// Expand the first and last dense layers of an SAE so it reads and
/// reconstructs `new_input_dim = 2M + 3` columns; interior layers are copied.
///
/// Input weights of a column shared by `k` target columns are divided by `k`,
/// so rows whose new-device columns duplicate their mapped devices produce
/// the same code and the same reconstruction of the original columns.
pub fn transfer(source: &Network, new_input_dim: usize, seed: u64) -> Result<(Network, TransferReport), Net2NetError> {
    let old_cols = source.input_len();
    let n = devices_for(old_cols)?;
    let m = devices_for(new_input_dim)?;
    if m <= n {
        return Err(Net2NetError::Shrink { old: n, new: m });
    }
    let last = source.layers().len() - 1;
    if last == 0 {
        return Err(Net2NetError::NoSuchLayer(0));
    }
    let (_, h_in, act_in) = dense(source, 0)?;
    let (h_out, out_cols, act_out) = dense(source, last)?;
    if out_cols != old_cols {
        return Err(Net2NetError::NotEnsembleLayout(out_cols));
    }
    let device_map = replication_map(n, m, seed)?;
    // any kind works: only the block indices matter
    let kind = crate::tcl::DeviceKind::Ac;
    let map = column_map(ColumnLayout { kind, devices: n }, ColumnLayout { kind, devices: m }, &device_map);
    let counts = replication_counts(&map, old_cols);

    let mut parts = source.clone().into_parts();
    let w = parts[0].1[0].data();
    let mut u = vec![0.0; h_in * new_input_dim];
    for r in 0..h_in {
        for (c, &g) in map.iter().enumerate() {
            u[r * new_input_dim + c] = w[r * old_cols + g] / counts[g] as f64;
        }
    }
    let b0 = parts[0].1[1].clone();
    parts[0] = (
        LayerSpec::Dense { inputs: new_input_dim, outputs: h_in, activation: act_in },
        vec![Tensor::from_vec(&[h_in, new_input_dim], u)?, b0],
    );

    let (w, b) = (parts[last].1[0].data(), parts[last].1[1].data());
    let mut u = Vec::with_capacity(new_input_dim * h_out);
    let mut ub = Vec::with_capacity(new_input_dim);
    for &g in &map {
        u.extend_from_slice(&w[g * h_out..(g + 1) * h_out]);
        ub.push(b[g]);
    }
    parts[last] = (
        LayerSpec::Dense { inputs: h_out, outputs: new_input_dim, activation: act_out },
        vec![Tensor::from_vec(&[new_input_dim, h_out], u)?, Tensor::from_vec(&[new_input_dim], ub)?],
    );

    let target = Network::from_parts(&[new_input_dim], parts, source.seed())?;
    let report = TransferReport {
        source_devices: n,
        target_devices: m,
        source_columns: old_cols,
        target_columns: new_input_dim,
        pretrained_parameters: source.param_count(),
        untrained_parameters: target.param_count() - source.param_count(),
        device_map,
    };
    Ok((target, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sae::build_sae;

    fn random_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect()
    }

    fn max_dev(a: &Network, b: &Network, rows: &[Vec<f64>]) -> f64 {
        rows.iter()
            .flat_map(|x| {
                let ya = a.forward(x).unwrap();
                let yb = b.forward(x).unwrap();
                ya.into_iter().zip(yb).map(|(p, q)| (p - q).abs()).collect::<Vec<_>>()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn two_to_three_example() {
        let c1 = [1.0, 2.0];
        let c2 = [-3.0, 0.5];
        let l0 = (
            LayerSpec::Dense { inputs: 2, outputs: 2, activation: Activation::Linear },
            vec![
                Tensor::from_vec(&[2, 2], [c1, c2].concat()).unwrap(),
                Tensor::from_vec(&[2], vec![0.1, 0.2]).unwrap(),
            ],
        );
        let l1 = (
            LayerSpec::Dense { inputs: 2, outputs: 2, activation: Activation::Linear },
            vec![Tensor::from_vec(&[2, 2], vec![4.0, 6.0, -2.0, 8.0]).unwrap(), Tensor::zeros(&[2])],
        );
        let net = Network::from_parts(&[2], vec![l0, l1], 0).unwrap();
        // find a seed whose extra unit copies unit 0
        let seed = (0..).find(|&s| replication_map(2, 3, s).unwrap()[2] == 0).unwrap();
        let (wide, plan) = widen(&net, 0, 3, seed).unwrap();
        assert_eq!(plan.mapping, vec![0, 1, 0]);
        assert_eq!(wide.layers()[0].weight().data(), &[1.0, 2.0, -3.0, 0.5, 1.0, 2.0]);
        assert_eq!(wide.layers()[0].bias().data(), &[0.1, 0.2, 0.1]);
        // next layer: incoming weights from copies of unit 0 halved
        assert_eq!(wide.layers()[1].weight().data(), &[2.0, 6.0, 2.0, -1.0, 8.0, -1.0]);
        assert!(max_dev(&net, &wide, &random_rows(50, 2, 1)) <= 1e-12);
    }

    #[test]
    fn replication_sum_identity_and_preconditions() {
        let net = build_sae(9, 2).unwrap();
        assert!(matches!(widen(&net, 1, 4, 0), Err(Net2NetError::NotWider { .. })));
        let (wide, plan) = widen(&net, 1, 11, 7).unwrap();
        let old = net.layers()[2].weight();
        let new = wide.layers()[2].weight();
        let rows = old.shape()[0];
        for r in 0..rows {
            for k in 0..plan.old_width {
                let s: f64 = plan.mapping.iter().enumerate().filter(|(_, &g)| g == k).map(|(j, _)| new.at(r, j)).sum();
                assert!((s - old.at(r, k)).abs() <= 1e-15 * old.at(r, k).abs().max(1.0));
            }
        }
        let (inputs, added, next_out) = (7, 11 - plan.old_width, old.shape()[0]);
        assert_eq!(wide.param_count(), net.param_count() + added * (inputs + 1) + added * next_out);
        assert_eq!(plan.mapping[..plan.old_width], (0..plan.old_width).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn deepen_preserves_and_rejects_sigmoid() {
        let net = build_sae(9, 4).unwrap();
        let deep = deepen(&deepen(&net, 2).unwrap(), 0).unwrap();
        assert_eq!(deep.layers().len(), net.layers().len() + 2);
        let rows = random_rows(30, 9, 3);
        for x in &rows {
            assert_eq!(net.forward(x).unwrap(), deep.forward(x).unwrap());
        }
        let sig = Network::new(&[3], &[LayerSpec::Dense { inputs: 3, outputs: 2, activation: Activation::Sigmoid }], 0)
            .unwrap();
        assert!(matches!(deepen(&sig, 0), Err(Net2NetError::NonIdempotent(Activation::Sigmoid))));
    }

    #[test]
    fn transfer_preserves_old_columns_on_duplicated_rows() {
        let src = build_sae(13, 6).unwrap(); // 5 devices
        let (dst, report) = transfer(&src, 19, 11).unwrap(); // 8 devices
        assert_eq!(report.target_devices, 8);
        assert_eq!(report.pretrained_parameters, src.param_count());
        assert_eq!(report.untrained_parameters, dst.param_count() - src.param_count());
        let kind = crate::tcl::DeviceKind::Ac;
        let map = column_map(ColumnLayout { kind, devices: 5 }, ColumnLayout { kind, devices: 8 }, &report.device_map);
        for x in random_rows(40, 13, 8) {
            let wide: Vec<f64> = map.iter().map(|&g| x[g]).collect();
            let y_old = src.forward(&x).unwrap();
            let y_new = dst.forward(&wide).unwrap();
            for (c, &g) in map.iter().enumerate() {
                assert!((y_new[c] - y_old[g]).abs() <= 1e-9, "col {c}");
            }
        }
        let (again, r2) = transfer(&src, 19, 11).unwrap();
        assert_eq!((again, r2.device_map), (dst, report.device_map));
        assert!(matches!(transfer(&src, 11, 0), Err(Net2NetError::Shrink { .. })));
        assert!(matches!(transfer(&src, 18, 0), Err(Net2NetError::NotEnsembleLayout(18))));
    }
}
