//! Batch normalization over the batch (and spatial) axes of each channel.

use serde_json::json;

use super::{channel_layout, no_cache, Layer, LayerKind, Mode, Param};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

pub const DEFAULT_MOMENTUM: f64 = 0.99;
pub const DEFAULT_EPSILON: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct BatchNormState<E: Element> {
    pub gamma: Param<E>,
    pub beta: Param<E>,
    pub running_mean: Tensor<E>,
    pub running_var: Tensor<E>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl<E: Element> BatchNormState<E> {
    pub fn new(channels: usize) -> Self {
        Self::with_hyper(channels, DEFAULT_MOMENTUM, DEFAULT_EPSILON).expect("default hyperparameters are valid")
    }

    pub fn with_hyper(channels: usize, momentum: f64, epsilon: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::Parameter(format!("batchnorm momentum must lie in (0, 1), got {momentum}")));
        }
        if !(epsilon > 0.0) {
            return Err(Error::Parameter(format!("batchnorm epsilon must be positive, got {epsilon}")));
        }
        Ok(Self {
            gamma: Param::new("gamma", Tensor::ones(&[channels])),
            beta: Param::new("beta", Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum,
            epsilon,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }
}

/// What the backward pass needs from a training-mode forward.
#[derive(Debug, Clone)]
pub struct BatchNormCache<E: Element> {
    x_hat: Tensor<E>,
    inv_std: Vec<f64>,
}

/// Normalizes `x` per channel. In training mode the batch statistics are used
/// and folded into the running statistics; otherwise the running statistics
/// are used and no cache is produced.
pub fn batchnorm_forward<E: Element>(
    x: &Tensor<E>,
    state: &mut BatchNormState<E>,
    training: bool,
) -> Result<(Tensor<E>, Option<BatchNormCache<E>>)> {
    normalize(x, state, training, None)
}

/// Training-mode batchnorm whose output is multiplied by `gates * scale` in
/// the same pass; equal to batchnorm followed by dropout with that mask.
pub(crate) fn batchnorm_forward_gated<E: Element>(
    x: &Tensor<E>,
    state: &mut BatchNormState<E>,
    gates: &Tensor<E>,
    scale: E,
) -> Result<(Tensor<E>, Option<BatchNormCache<E>>)> {
    if gates.shape() != x.shape() {
        return Err(Error::Shape("gate mask shape differs from input".into()));
    }
    normalize(x, state, true, Some((gates.data(), scale)))
}

fn normalize<E: Element>(
    x: &Tensor<E>,
    state: &mut BatchNormState<E>,
    training: bool,
    gates: Option<(&[E], E)>,
) -> Result<(Tensor<E>, Option<BatchNormCache<E>>)> {
    let (n, c, hw) = channel_layout(x.shape())?;
    if c != state.channels() {
        return Err(Error::Shape(format!(
            "batchnorm has {} channels, input has {c}",
            state.channels()
        )));
    }
    let gamma = state.gamma.value.data();
    let beta = state.beta.value.data();
    // Rows of `hw` values, one per (sample, channel), in memory order.
    let rows = || x.data().chunks_exact(hw.max(1)).enumerate().map(|(r, row)| (r % c, row));

    if !training {
        let affine: Vec<(f64, f64)> = (0..c)
            .map(|ch| {
                let inv = 1.0 / (state.running_var.data()[ch].widen() + state.epsilon).sqrt();
                let g = gamma[ch].widen() * inv;
                (g, beta[ch].widen() - state.running_mean.data()[ch].widen() * g)
            })
            .collect();
        let mut y = Vec::with_capacity(x.len());
        for (ch, row) in rows() {
            let (a, b) = affine[ch];
            y.extend(row.iter().map(|v| E::lit(v.widen() * a + b)));
        }
        return Ok((Tensor::new(x.shape(), y)?, None));
    }

    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    let count = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    for (ch, row) in rows() {
        mean[ch] += lane_sum(row.iter().map(|v| v.widen()));
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; c];
    for (ch, row) in rows() {
        let mu = mean[ch];
        var[ch] += lane_sum(row.iter().map(|v| (v.widen() - mu) * (v.widen() - mu)));
    }
    var.iter_mut().for_each(|v| *v /= count);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.epsilon).sqrt()).collect();
    let mut y = Vec::with_capacity(x.len());
    let mut x_hat = Vec::with_capacity(x.len());
    for (r, (ch, row)) in rows().enumerate() {
        let (mu, inv) = (mean[ch], inv_std[ch]);
        let (g, bt) = (gamma[ch].widen(), beta[ch].widen());
        x_hat.extend(row.iter().map(|v| E::lit((v.widen() - mu) * inv)));
        let out = row.iter().map(|v| E::lit((v.widen() - mu) * inv * g + bt));
        match gates {
            None => y.extend(out),
            Some((mask, scale)) => y.extend(out.zip(&mask[r * hw..(r + 1) * hw]).map(|(v, &m)| v * m * scale)),
        }
    }
    let m = state.momentum;
    for ch in 0..c {
        let rm = &mut state.running_mean.data_mut()[ch];
        *rm = E::lit(m * rm.widen() + (1.0 - m) * mean[ch]);
        let rv = &mut state.running_var.data_mut()[ch];
        *rv = E::lit(m * rv.widen() + (1.0 - m) * var[ch]);
    }
    let cache = BatchNormCache {
        x_hat: Tensor::new(x.shape(), x_hat)?,
        inv_std,
    };
    Ok((Tensor::new(x.shape(), y)?, Some(cache)))
}

/// Sum with eight interleaved accumulators so the loop vectorizes.
fn lane_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut acc = [0.0; 8];
    for (i, v) in values.enumerate() {
        acc[i & 7] += v;
    }
    acc.iter().sum()
}

/// Full batch-coupled gradient: returns `(dx, dgamma, dbeta)`.
fn batchnorm_backward<E: Element>(
    grad: &Tensor<E>,
    gamma: &Tensor<E>,
    cache: &BatchNormCache<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    batchnorm_backward_gated(grad, gamma, cache, None)
}

/// Row `r` of the gradient reaching the normalization.
fn gated_row<'a, E: Element>(grad: &'a [E], gates: Option<(&Tensor<E>, E)>, r: usize, hw: usize, scratch: &'a mut [E]) -> &'a [E] {
    let g = &grad[r * hw..(r + 1) * hw];
    match gates {
        None => g,
        Some((mask, scale)) => {
            let m = &mask.data()[r * hw..(r + 1) * hw];
            for ((d, &a), &b) in scratch.iter_mut().zip(g).zip(m) {
                *d = a * b * scale;
            }
            scratch
        }
    }
}

/// Batchnorm backward for an upstream gradient that first passes back
/// through `gates * scale`, without materializing the gated gradient.
pub(crate) fn batchnorm_backward_gated<E: Element>(
    grad: &Tensor<E>,
    gamma: &Tensor<E>,
    cache: &BatchNormCache<E>,
    gates: Option<(&Tensor<E>, E)>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    if grad.shape() != cache.x_hat.shape() || gates.is_some_and(|(m, _)| m.shape() != grad.shape()) {
        return Err(Error::Shape("batchnorm backward: gradient shape differs from forward".into()));
    }
    let (n, c, hw) = channel_layout(grad.shape())?;
    let count = (n * hw) as f64;
    let mut scratch = vec![E::zero(); hw];
    let x_hat = |r: usize| &cache.x_hat.data()[r * hw..(r + 1) * hw];
    let mut sg = vec![0.0; c];
    let mut sgx = vec![0.0; c];
    for r in 0..n * c {
        let g = gated_row(grad.data(), gates, r, hw, &mut scratch);
        sg[r % c] += lane_sum(g.iter().map(|v| v.widen()));
        sgx[r % c] += lane_sum(g.iter().zip(x_hat(r)).map(|(a, b)| a.widen() * b.widen()));
    }
    let mut dx = Vec::with_capacity(grad.len());
    for r in 0..n * c {
        let ch = r % c;
        let scale = gamma.data()[ch].widen() * cache.inv_std[ch] / count;
        let (s1, s2) = (sg[ch], sgx[ch]);
        let g = gated_row(grad.data(), gates, r, hw, &mut scratch);
        dx.extend(g.iter().zip(x_hat(r)).map(|(a, b)| E::lit(scale * (count * a.widen() - s1 - b.widen() * s2))));
    }
    let dgamma: Vec<E> = sgx.iter().map(|&v| E::lit(v)).collect();
    let dbeta: Vec<E> = sg.iter().map(|&v| E::lit(v)).collect();
    Ok((
        Tensor::new(grad.shape(), dx)?,
        Tensor::new(&[c], dgamma)?,
        Tensor::new(&[c], dbeta)?,
    ))
}

#[derive(Debug, Clone)]
pub struct BatchNorm<E: Element> {
    pub state: BatchNormState<E>,
    pub(super) cache: Option<BatchNormCache<E>>,
}

impl<E: Element> BatchNorm<E> {
    pub fn new(channels: usize) -> Self {
        Self::from_state(BatchNormState::new(channels))
    }

    pub fn from_state(state: BatchNormState<E>) -> Self {
        Self { state, cache: None }
    }
}

impl<E: Element> Layer<E> for BatchNorm<E> {
    fn kind(&self) -> LayerKind {
        LayerKind::BatchNorm
    }

    fn forward(&mut self, x: &Tensor<E>, mode: Mode, _rng: &mut Rng) -> Result<Tensor<E>> {
        let (y, cache) = batchnorm_forward(x, &mut self.state, mode.is_training())?;
        self.cache = cache;
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<E>) -> Result<Tensor<E>> {
        let cache = self.cache.as_ref().ok_or_else(|| no_cache("batchnorm"))?;
        let (dx, dgamma, dbeta) = batchnorm_backward(grad, &self.state.gamma.value, cache)?;
        self.state.gamma.grad = dgamma;
        self.state.beta.grad = dbeta;
        Ok(dx)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let (_, c, _) = channel_layout(input)?;
        if c != self.state.channels() {
            return Err(Error::Shape(format!(
                "batchnorm has {} channels, input has {c}",
                self.state.channels()
            )));
        }
        Ok(input.to_vec())
    }

    fn params(&self) -> Vec<&Param<E>> {
        vec![&self.state.gamma, &self.state.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        vec![&mut self.state.gamma, &mut self.state.beta]
    }

    fn buffers(&self) -> Vec<(&'static str, &Tensor<E>)> {
        vec![
            ("running_mean", &self.state.running_mean),
            ("running_var", &self.state.running_var),
        ]
    }

    fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Tensor<E>)> {
        vec![
            ("running_mean", &mut self.state.running_mean),
            ("running_var", &mut self.state.running_var),
        ]
    }

    fn hyper(&self) -> serde_json::Value {
        json!({
            "channels": self.state.channels(),
            "momentum": self.state.momentum,
            "epsilon": self.state.epsilon,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
        Tensor::<f64>::from_fn(shape, |_| 3.0 + 2.0 * rng.normal())
    }

    #[test]
    fn standardizes_per_channel() {
        let mut rng = Rng::new(1);
        let x = random(&mut rng, &[8, 3, 4, 4]);
        let mut state = BatchNormState::new(3);
        let (y, _) = batchnorm_forward(&x, &mut state, true).unwrap();
        let mean = y.mean_axes(&[0, 2, 3]).unwrap();
        let var = y.var_axes(&[0, 2, 3]).unwrap();
        let xvar = x.var_axes(&[0, 2, 3]).unwrap();
        for c in 0..3 {
            assert!(mean.data()[c].abs() <= 1e-6);
            // epsilon shrinks the variance by var / (var + eps)
            let expected = xvar.data()[c] / (xvar.data()[c] + DEFAULT_EPSILON);
            assert!((var.data()[c] - expected).abs() <= 1e-10);
        }
    }

    #[test]
    fn affine_matches_two_pass_oracle() {
        let mut rng = Rng::new(2);
        let x = random(&mut rng, &[6, 4]);
        let mut state = BatchNormState::with_hyper(4, 0.9, 1e-5).unwrap();
        state.gamma.value = Tensor::full(&[4], 2.0);
        state.beta.value = Tensor::full(&[4], 3.0);
        let (y, _) = batchnorm_forward(&x, &mut state, true).unwrap();
        for c in 0..4 {
            let col: Vec<f64> = (0..6).map(|n| x.at(&[n, c])).collect();
            let m = col.iter().sum::<f64>() / 6.0;
            let v = col.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 6.0;
            for n in 0..6 {
                let expect = 2.0 * (col[n] - m) / (v + 1e-5).sqrt() + 3.0;
                assert!((y.at(&[n, c]) - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn constant_channel_gives_beta() {
        let x = Tensor::<f64>::full(&[4, 2, 3, 3], 5.0);
        let mut state = BatchNormState::new(2);
        state.beta.value = Tensor::from_f64(&[2], &[0.25, -1.0]).unwrap();
        let (y, _) = batchnorm_forward(&x, &mut state, true).unwrap();
        assert!(y.all_finite());
        for n in 0..4 {
            assert!((y.at(&[n, 0, 1, 1]) - 0.25).abs() < 1e-12);
            assert!((y.at(&[n, 1, 2, 0]) + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn running_stats_update() {
        let x = Tensor::<f64>::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
        let mut state = BatchNormState::with_hyper(1, 0.5, 1e-3).unwrap();
        batchnorm_forward(&x, &mut state, true).unwrap();
        assert!((state.running_mean.data()[0] - 1.0).abs() < 1e-15);
        assert!((state.running_var.data()[0] - 1.0).abs() < 1e-15);
        // inference uses the running statistics
        let (y, cache) = batchnorm_forward(&x, &mut state, false).unwrap();
        assert!(cache.is_none());
        assert!((y.data()[1] - 2.0 / (1.0 + 1e-3f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn single_sample_rejected_in_training() {
        let x = Tensor::<f64>::zeros(&[1, 3]);
        let mut state = BatchNormState::new(3);
        assert!(matches!(batchnorm_forward(&x, &mut state, true), Err(Error::BatchTooSmall(1))));
        assert!(batchnorm_forward(&x, &mut state, false).is_ok());
    }

    #[test]
    fn bad_hyperparameters() {
        assert!(BatchNormState::<f64>::with_hyper(2, 0.9, 0.0).is_err());
        assert!(BatchNormState::<f64>::with_hyper(2, 1.0, 1e-3).is_err());
    }
}
