use serde_json::json;

use super::{no_cache, Layer, LayerKind, Mode};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{sample_bernoulli, Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropoutMode {
    /// `x_hat = g * x` with raw Bernoulli gates. Used by all verification
    /// paths, since the gated information and correlation identities are
    /// stated for raw gates.
    Theorem,
    /// `x_hat = g * x / p_keep`, the usual framework behaviour at train time.
    Inverted,
}

impl std::str::FromStr for DropoutMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "theorem" => Ok(DropoutMode::Theorem),
            "inverted" => Ok(DropoutMode::Inverted),
            other => Err(Error::Config(format!("unknown dropout mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for DropoutMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DropoutMode::Theorem => "theorem",
            DropoutMode::Inverted => "inverted",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DropoutSpec {
    p_keep: f64,
    pub mode: DropoutMode,
}

impl DropoutSpec {
    pub fn new(p_keep: f64, mode: DropoutMode) -> Result<Self> {
        if !(p_keep > 0.0 && p_keep <= 1.0) {
            return Err(Error::Parameter(format!("p_keep must lie in (0, 1], got {p_keep}")));
        }
        Ok(Self { p_keep, mode })
    }

    /// Converts a framework-style drop rate into a keep probability.
    pub fn from_drop_rate(drop_rate: f64, mode: DropoutMode) -> Result<Self> {
        Self::new(1.0 - drop_rate, mode)
    }

    pub fn p_keep(&self) -> f64 {
        self.p_keep
    }

    pub(super) fn gate_scale(&self) -> f64 {
        match self.mode {
            DropoutMode::Theorem => 1.0,
            DropoutMode::Inverted => 1.0 / self.p_keep,
        }
    }
}

/// Applies Bernoulli gates in training mode and the identity otherwise.
/// Returns the output and, in training mode, the raw `{0, 1}` gate mask.
pub fn dropout_forward<E: Element>(
    x: &Tensor<E>,
    spec: &DropoutSpec,
    rng: &mut Rng,
    training: bool,
) -> Result<(Tensor<E>, Option<Tensor<E>>)> {
    if !training {
        return Ok((x.clone(), None));
    }
    let mask: Tensor<E> = sample_bernoulli(rng, spec.p_keep, x.shape())?;
    let scale = E::lit(spec.gate_scale());
    let data = x
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&v, &g)| v * g * scale)
        .collect();
    Ok((Tensor::new(x.shape(), data)?, Some(mask)))
}

#[derive(Debug, Clone)]
pub struct Dropout<E: Element> {
    pub spec: DropoutSpec,
    pub(super) mask: Option<Tensor<E>>,
}

impl<E: Element> Dropout<E> {
    pub fn new(spec: DropoutSpec) -> Self {
        Self { spec, mask: None }
    }

    /// Gate mask of the latest training-mode forward.
    pub fn last_mask(&self) -> Option<&Tensor<E>> {
        self.mask.as_ref()
    }
}

impl<E: Element> Layer<E> for Dropout<E> {
    fn kind(&self) -> LayerKind {
        LayerKind::Dropout
    }

    fn forward(&mut self, x: &Tensor<E>, mode: Mode, rng: &mut Rng) -> Result<Tensor<E>> {
        let (y, mask) = dropout_forward(x, &self.spec, rng, mode.is_training())?;
        self.mask = mask;
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<E>) -> Result<Tensor<E>> {
        let mask = self.mask.as_ref().ok_or_else(|| no_cache("dropout"))?;
        let scale = E::lit(self.spec.gate_scale());
        if grad.shape() != mask.shape() {
            return Err(Error::Shape("dropout backward: gradient shape differs from forward".into()));
        }
        let data = grad.data().iter().zip(mask.data()).map(|(&g, &m)| g * m * scale).collect();
        Tensor::new(grad.shape(), data)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(input.to_vec())
    }

    fn hyper(&self) -> serde_json::Value {
        json!({ "p_keep": self.spec.p_keep, "mode": self.spec.mode })
    }
}
