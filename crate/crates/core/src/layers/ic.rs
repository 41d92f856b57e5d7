//! The Independent-Component layer: BatchNorm, then Dropout.
//!
//! Normalization always comes first so the gates act on standardized
//! activations.

use serde_json::json;

use super::batchnorm::{batchnorm_backward_gated, batchnorm_forward_gated};
use super::{batchnorm_forward, dropout_forward, BatchNorm, BatchNormState, Dropout, DropoutSpec};
use super::{no_cache, Layer, LayerKind, Mode, Param};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{sample_bernoulli, Element, Tensor};

/// Functional form of the IC layer (no caches).
pub fn ic_forward<E: Element>(
    x: &Tensor<E>,
    bn: &mut BatchNormState<E>,
    drop: &DropoutSpec,
    rng: &mut Rng,
    training: bool,
) -> Result<Tensor<E>> {
    let (normalized, _) = batchnorm_forward(x, bn, training)?;
    let (gated, _) = dropout_forward(&normalized, drop, rng, training)?;
    Ok(gated)
}

#[derive(Debug, Clone)]
pub struct IcLayer<E: Element> {
    pub bn: BatchNorm<E>,
    pub dropout: Dropout<E>,
}

impl<E: Element> IcLayer<E> {
    pub fn new(channels: usize, spec: DropoutSpec) -> Self {
        Self {
            bn: BatchNorm::new(channels),
            dropout: Dropout::new(spec),
        }
    }
}

impl<E: Element> Layer<E> for IcLayer<E> {
    fn kind(&self) -> LayerKind {
        LayerKind::Ic
    }

    fn forward(&mut self, x: &Tensor<E>, mode: Mode, rng: &mut Rng) -> Result<Tensor<E>> {
        if !mode.is_training() {
            self.dropout.mask = None;
            return self.bn.forward(x, mode, rng);
        }
        // One fused pass; same draws and arithmetic as BN then Dropout.
        let spec = self.dropout.spec;
        let mask = sample_bernoulli(rng, spec.p_keep(), x.shape())?;
        let (y, cache) = batchnorm_forward_gated(x, &mut self.bn.state, &mask, E::lit(spec.gate_scale()))?;
        self.bn.cache = cache;
        self.dropout.mask = Some(mask);
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<E>) -> Result<Tensor<E>> {
        let mask = self.dropout.mask.as_ref().ok_or_else(|| no_cache("ic"))?;
        let cache = self.bn.cache.as_ref().ok_or_else(|| no_cache("ic"))?;
        let scale = E::lit(self.dropout.spec.gate_scale());
        let (dx, dgamma, dbeta) = batchnorm_backward_gated(grad, &self.bn.state.gamma.value, cache, Some((mask, scale)))?;
        self.bn.state.gamma.grad = dgamma;
        self.bn.state.beta.grad = dbeta;
        Ok(dx)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        Layer::<E>::output_shape(&self.bn, input)
    }

    fn params(&self) -> Vec<&Param<E>> {
        self.bn.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        self.bn.params_mut()
    }

    fn buffers(&self) -> Vec<(&'static str, &Tensor<E>)> {
        self.bn.buffers()
    }

    fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Tensor<E>)> {
        self.bn.buffers_mut()
    }

    fn hyper(&self) -> serde_json::Value {
        json!({ "batchnorm": Layer::<E>::hyper(&self.bn), "dropout": Layer::<E>::hyper(&self.dropout) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::DropoutMode;

    fn batch(seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::<f64>::from_fn(&[16, 3, 2, 2], |_| 1.0 + 3.0 * rng.normal())
    }

    #[test]
    fn keep_one_equals_batchnorm() {
        let x = batch(1);
        let spec = DropoutSpec::new(1.0, DropoutMode::Theorem).unwrap();
        let mut a = BatchNormState::new(3);
        let mut b = BatchNormState::new(3);
        let ic = ic_forward(&x, &mut a, &spec, &mut Rng::new(0), true).unwrap();
        let (bn, _) = batchnorm_forward(&x, &mut b, true).unwrap();
        assert_eq!(ic, bn);
    }

    #[test]
    fn inference_with_true_stats_standardizes() {
        let x = batch(2);
        let mut state = BatchNormState::with_hyper(3, 0.5, 1e-12).unwrap();
        state.running_mean = x.mean_axes(&[0, 2, 3]).unwrap();
        state.running_var = x.var_axes(&[0, 2, 3]).unwrap();
        let spec = DropoutSpec::new(0.5, DropoutMode::Inverted).unwrap();
        let y = ic_forward(&x, &mut state, &spec, &mut Rng::new(0), false).unwrap();
        let m = y.mean_axes(&[0, 2, 3]).unwrap();
        let v = y.var_axes(&[0, 2, 3]).unwrap();
        for c in 0..3 {
            assert!(m.data()[c].abs() < 1e-10);
            assert!((v.data()[c] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fixed_seed_repeats() {
        let x = batch(3);
        let spec = DropoutSpec::new(0.7, DropoutMode::Theorem).unwrap();
        let run = || {
            let mut layer = IcLayer::<f64>::new(3, spec);
            layer.forward(&x, Mode::Train, &mut Rng::new(42)).unwrap()
        };
        assert_eq!(run(), run());
    }

    fn matches_composition<E: Element>(mode: DropoutMode) {
        let mut rng = Rng::new(7);
        let x = Tensor::<E>::from_fn(&[8, 4, 3, 3], |_| E::lit(0.5 + 2.0 * rng.normal()));
        let g = Tensor::<E>::from_fn(&[8, 4, 3, 3], |_| E::lit(rng.normal()));
        let spec = DropoutSpec::new(0.8, mode).unwrap();
        let mut ic = IcLayer::<E>::new(4, spec);
        let mut bn = BatchNorm::<E>::new(4);
        let mut drop = Dropout::<E>::new(spec);
        for (c, (gm, bt)) in [(1.5, 0.2), (0.7, -0.3), (1.0, 0.0), (2.0, 1.0)].into_iter().enumerate() {
            for layer in [&mut ic.bn, &mut bn] {
                layer.state.gamma.value.data_mut()[c] = E::lit(gm);
                layer.state.beta.value.data_mut()[c] = E::lit(bt);
            }
        }
        let fused = ic.forward(&x, Mode::Train, &mut Rng::new(11)).unwrap();
        let mut r = Rng::new(11);
        let h = bn.forward(&x, Mode::Train, &mut r).unwrap();
        let split = drop.forward(&h, Mode::Train, &mut r).unwrap();
        assert_eq!(fused, split);
        assert_eq!(ic.bn.state.running_mean, bn.state.running_mean);
        assert_eq!(ic.bn.state.running_var, bn.state.running_var);

        let dx_fused = ic.backward(&g).unwrap();
        let dh = drop.backward(&g).unwrap();
        let dx_split = bn.backward(&dh).unwrap();
        assert_eq!(dx_fused, dx_split);
        assert_eq!(ic.bn.state.gamma.grad, bn.state.gamma.grad);
        assert_eq!(ic.bn.state.beta.grad, bn.state.beta.grad);
    }

    #[test]
    fn fused_pass_equals_batchnorm_then_dropout() {
        matches_composition::<f64>(DropoutMode::Inverted);
        matches_composition::<f64>(DropoutMode::Theorem);
        matches_composition::<f32>(DropoutMode::Inverted);
    }
}
