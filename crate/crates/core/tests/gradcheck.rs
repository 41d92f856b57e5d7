mod common;

use common::{check_layer, check_network, check_softmax_ce, layer_instances};
use ic_lab::layers::LayerKind;
use ic_lab::layers::Layer;
use ic_lab::resnet::Layout;

#[test]
fn every_layer_kind_matches_finite_differences() {
    let instances = layer_instances();
    assert!(instances.len() >= 20);
    let mut kinds = std::collections::HashSet::new();
    for (i, (name, mut layer, x)) in instances.into_iter().enumerate() {
        kinds.insert(layer.kind());
        let err = check_layer(&mut layer, &x, 100 + i as u64);
        assert!(err <= 1e-4, "{name}: relative error {err:.3e}");
    }
    for kind in [
        LayerKind::Dense,
        LayerKind::Conv2d,
        LayerKind::Relu,
        LayerKind::BatchNorm,
        LayerKind::Dropout,
        LayerKind::Ic,
    ] {
        assert!(kinds.contains(&kind), "{kind:?} not covered");
    }
}

#[test]
fn softmax_cross_entropy_gradient() {
    for seed in 0..5 {
        assert!(check_softmax_ce(seed) <= 1e-4);
    }
}

#[test]
fn bottleneck_network_gradient() {
    let err = check_network(Layout::V2, true, 3, 9);
    assert!(err <= 1e-3, "relative error {err:.3e}");
}
