//! Oracles shared by the integration tests. Nothing here calls the library
//! routine it is used to check.
#![allow(dead_code)]

use std::collections::BTreeMap;

use ic_lab::infotheory::DiscreteJoint;
use ic_lab::layers::{
    softmax_cross_entropy, BatchNorm, Conv2d, Dense, Dropout, DropoutMode, DropoutSpec, IcLayer, Layer, LayerNode,
    Mode, Relu,
};
use ic_lab::resnet::{Layout, NetSpec, ResNet};
use ic_lab::tensor::Padding;
use ic_lab::{Rng, Tensor};

pub const FD_STEP: f64 = 1e-6;

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn probe_loss(layer: &mut LayerNode<f64>, x: &Tensor, r: &Tensor, seed: u64) -> f64 {
    let y = layer.forward(x, Mode::Train, &mut Rng::new(seed)).unwrap();
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Central-difference check of `L = <r, layer(x)>` against backward, for the
/// input and every parameter. Dropout masks are pinned by reseeding.
/// Returns the worst relative error over all checked tensors.
pub fn check_layer(layer: &mut LayerNode<f64>, x: &Tensor, seed: u64) -> f64 {
    let mut rng = Rng::new(seed ^ 0x5eed);
    let y = layer.forward(x, Mode::Train, &mut Rng::new(seed)).unwrap();
    let r = Tensor::<f64>::from_fn(y.shape(), |_| rng.normal());
    let gx = layer.backward(&r).unwrap();
    let analytic_params: Vec<Vec<f64>> = layer.params().iter().map(|p| p.grad.data().to_vec()).collect();

    let mut worst = 0.0f64;
    let mut xp = x.clone();
    let mut numeric = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + FD_STEP;
        let lp = probe_loss(layer, &xp, &r, seed);
        xp.data_mut()[i] = orig - FD_STEP;
        let lm = probe_loss(layer, &xp, &r, seed);
        xp.data_mut()[i] = orig;
        numeric[i] = (lp - lm) / (2.0 * FD_STEP);
    }
    worst = worst.max(rel_error(gx.data(), &numeric));

    for (k, analytic) in analytic_params.iter().enumerate() {
        let mut numeric = vec![0.0; analytic.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = layer.params()[k].value.data()[i];
            layer.params_mut()[k].value.data_mut()[i] = orig + FD_STEP;
            let lp = probe_loss(layer, x, &r, seed);
            layer.params_mut()[k].value.data_mut()[i] = orig - FD_STEP;
            let lm = probe_loss(layer, x, &r, seed);
            layer.params_mut()[k].value.data_mut()[i] = orig;
            *slot = (lp - lm) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_error(analytic, &numeric));
    }
    worst
}

fn randomize_affine(layer: &mut LayerNode<f64>, rng: &mut Rng) {
    for p in layer.params_mut() {
        for v in p.value.data_mut() {
            *v = 0.5 + rng.uniform();
        }
    }
}

/// At least twenty layer instances covering every kind, with inputs.
pub fn layer_instances() -> Vec<(String, LayerNode<f64>, Tensor)> {
    let mut rng = Rng::new(2024);
    let mut out: Vec<(String, LayerNode<f64>, Tensor)> = Vec::new();
    let input = |rng: &mut Rng, shape: &[usize]| Tensor::<f64>::from_fn(shape, |_| rng.normal());

    for (n, i, o) in [(3, 4, 2), (5, 7, 3), (2, 1, 6), (4, 10, 10)] {
        let layer = LayerNode::Dense(Dense::new(&mut rng, i, o).unwrap());
        out.push((format!("dense {i}->{o}"), layer, input(&mut rng, &[n, i])));
    }
    for (c, f, k, s, pad, hw) in [
        (2, 3, 3, 1, Padding::Same, 5),
        (3, 2, 3, 2, Padding::Same, 6),
        (2, 2, 1, 1, Padding::Same, 4),
        (1, 2, 3, 1, Padding::Valid, 5),
        (2, 4, 1, 2, Padding::Same, 5),
        (3, 3, 3, 2, Padding::Valid, 7),
    ] {
        let layer = LayerNode::Conv2d(Conv2d::new(&mut rng, c, f, k, s, pad).unwrap());
        out.push((format!("conv {c}->{f} k{k} s{s} {pad:?}"), layer, input(&mut rng, &[2, c, hw, hw])));
    }
    for shape in [vec![4, 6], vec![2, 3, 4, 4]] {
        out.push((format!("relu {shape:?}"), LayerNode::Relu(Relu::new()), input(&mut rng, &shape)));
    }
    for shape in [vec![6, 3], vec![3, 2, 3, 3], vec![2, 4, 2, 2]] {
        let mut layer = LayerNode::BatchNorm(BatchNorm::new(shape[1]));
        randomize_affine(&mut layer, &mut rng);
        out.push((format!("batchnorm {shape:?}"), layer, input(&mut rng, &shape)));
    }
    for (p, mode) in [(0.5, DropoutMode::Inverted), (0.8, DropoutMode::Theorem), (0.95, DropoutMode::Inverted)] {
        let spec = DropoutSpec::new(p, mode).unwrap();
        out.push((format!("dropout p={p} {mode}"), LayerNode::Dropout(Dropout::new(spec)), input(&mut rng, &[3, 2, 3, 3])));
    }
    for (shape, p) in [(vec![5, 4], 0.9), (vec![2, 3, 3, 3], 0.7), (vec![3, 2, 4, 4], 0.95)] {
        let spec = DropoutSpec::new(p, DropoutMode::Inverted).unwrap();
        let mut layer = LayerNode::Ic(IcLayer::new(shape[1], spec));
        randomize_affine(&mut layer, &mut rng);
        out.push((format!("ic {shape:?} p={p}"), layer, input(&mut rng, &shape)));
    }
    out
}

/// Central-difference check of softmax cross-entropy with respect to logits.
pub fn check_softmax_ce(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let logits = Tensor::<f64>::from_fn(&[4, 5], |_| 2.0 * rng.normal());
    let labels: Vec<usize> = (0..4).map(|_| rng.index(5)).collect();
    let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
    let mut z = logits.clone();
    let mut numeric = vec![0.0; z.len()];
    for (i, slot) in numeric.iter_mut().enumerate() {
        let orig = z.data()[i];
        z.data_mut()[i] = orig + FD_STEP;
        let lp = softmax_cross_entropy(&z, &labels).unwrap().0;
        z.data_mut()[i] = orig - FD_STEP;
        let lm = softmax_cross_entropy(&z, &labels).unwrap().0;
        z.data_mut()[i] = orig;
        *slot = (lp - lm) / (2.0 * FD_STEP);
    }
    rel_error(grad.data(), &numeric)
}

/// Full-network check on a 4-sample 32x32 batch: every parameter tensor is
/// probed at `per_tensor` random coordinates, the input at 16.
pub fn check_network(layout: Layout, bottleneck: bool, per_tensor: usize, seed: u64) -> f64 {
    let mut spec = NetSpec::new(1, layout, bottleneck, 10);
    spec.base_width = if bottleneck { 4 } else { 8 };
    let mut rng = Rng::new(seed);
    let mut net = ResNet::<f64>::build(&spec, &mut rng).unwrap();
    let x = Tensor::<f64>::from_fn(&[4, 3, 32, 32], |_| rng.normal());
    let labels: Vec<usize> = (0..4).map(|_| rng.index(10)).collect();
    let drop_seed = seed + 1;
    let loss = |net: &mut ResNet<f64>, x: &Tensor| -> f64 {
        let logits = net.forward(x, Mode::Train, &mut Rng::new(drop_seed)).unwrap();
        softmax_cross_entropy(&logits, &labels).unwrap().0
    };
    let logits = net.forward(&x, Mode::Train, &mut Rng::new(drop_seed)).unwrap();
    let (_, g) = softmax_cross_entropy(&logits, &labels).unwrap();
    let gx = net.backward(&g).unwrap();

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let n_tensors = net.params_mut().len();
    for k in 0..n_tensors {
        let len = net.params_mut()[k].value.len();
        let grad = net.params_mut()[k].grad.clone();
        for _ in 0..per_tensor.min(len) {
            let i = rng.index(len);
            let orig = net.params_mut()[k].value.data()[i];
            net.params_mut()[k].value.data_mut()[i] = orig + FD_STEP;
            let lp = loss(&mut net, &x);
            net.params_mut()[k].value.data_mut()[i] = orig - FD_STEP;
            let lm = loss(&mut net, &x);
            net.params_mut()[k].value.data_mut()[i] = orig;
            analytic.push(grad.data()[i]);
            numeric.push((lp - lm) / (2.0 * FD_STEP));
        }
    }
    let mut xp = x.clone();
    for _ in 0..16 {
        let i = rng.index(x.len());
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + FD_STEP;
        let lp = loss(&mut net, &xp);
        xp.data_mut()[i] = orig - FD_STEP;
        let lm = loss(&mut net, &xp);
        xp.data_mut()[i] = orig;
        analytic.push(gx.data()[i]);
        numeric.push((lp - lm) / (2.0 * FD_STEP));
    }
    rel_error(&analytic, &numeric)
}

/// Gated pair distribution by brute-force enumeration of `(x, y, g1, g2)`,
/// keyed by the exact bit patterns of the gated values.
pub fn enumerate_gated(joint: &DiscreteJoint, p: f64) -> BTreeMap<(u64, u64), f64> {
    let j = joint.joint();
    let mut out = BTreeMap::new();
    for (a, &x) in j.support_x().iter().enumerate() {
        for (b, &y) in j.support_y().iter().enumerate() {
            let pxy = j.prob(a, b);
            for g1 in [0.0, 1.0] {
                for g2 in [0.0, 1.0] {
                    let w = (if g1 == 1.0 { p } else { 1.0 - p }) * (if g2 == 1.0 { p } else { 1.0 - p });
                    let key = ((g1 * x + 0.0f64).to_bits(), (g2 * y + 0.0f64).to_bits());
                    *out.entry(key).or_insert(0.0) += w * pxy;
                }
            }
        }
    }
    out
}

/// Mutual information (bits) of a keyed joint by direct summation.
pub fn mi_bits(joint: &BTreeMap<(u64, u64), f64>) -> f64 {
    let mut px: BTreeMap<u64, f64> = BTreeMap::new();
    let mut py: BTreeMap<u64, f64> = BTreeMap::new();
    for (&(x, y), &p) in joint {
        *px.entry(x).or_insert(0.0) += p;
        *py.entry(y).or_insert(0.0) += p;
    }
    joint
        .iter()
        .filter(|(_, &p)| p > 0.0)
        .map(|(&(x, y), &p)| p * (p / (px[&x] * py[&y])).log2())
        .sum()
}

pub fn entropy_bits(pmf: impl IntoIterator<Item = f64>) -> f64 {
    pmf.into_iter().filter(|&p| p > 0.0).map(|p| -p * p.log2()).sum()
}

/// Entropy of the gated first coordinate from the enumerated joint.
pub fn gated_x_entropy(joint: &BTreeMap<(u64, u64), f64>) -> f64 {
    let mut px: BTreeMap<u64, f64> = BTreeMap::new();
    for (&(x, _), &p) in joint {
        *px.entry(x).or_insert(0.0) += p;
    }
    entropy_bits(px.into_values())
}

/// The same joint read as a keyed map (no gating).
pub fn keyed(joint: &DiscreteJoint) -> BTreeMap<(u64, u64), f64> {
    enumerate_gated(joint, 1.0)
}
