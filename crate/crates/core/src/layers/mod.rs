//! Differentiable layers.
//!
//! Every layer caches what its backward pass needs during a training-mode
//! forward. Calling [`Layer::backward`] without such a forward is a usage
//! error. Parameter gradients are written into each [`Param::grad`] by the
//! backward pass (overwritten, not accumulated).

mod batchnorm;
pub mod checkpoint;
mod conv;
mod dense;
mod dropout;
mod ic;
mod init;
mod loss;
mod relu;

use serde_json::Value;

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

pub use batchnorm::{batchnorm_forward, BatchNorm, BatchNormCache, BatchNormState};
pub use conv::Conv2d;
pub use dense::Dense;
pub use dropout::{dropout_forward, Dropout, DropoutMode, DropoutSpec};
pub use ic::{ic_forward, IcLayer};
pub use init::he_init;
pub use loss::softmax_cross_entropy;
pub use relu::Relu;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_training(self) -> bool {
        self == Mode::Train
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Dense,
    Conv2d,
    Relu,
    BatchNorm,
    Dropout,
    Ic,
}

/// A learnable tensor and the gradient from the latest backward pass.
#[derive(Debug, Clone)]
pub struct Param<E: Element> {
    pub name: &'static str,
    pub value: Tensor<E>,
    pub grad: Tensor<E>,
}

impl<E: Element> Param<E> {
    pub fn new(name: &'static str, value: Tensor<E>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { name, value, grad }
    }
}

pub trait Layer<E: Element> {
    fn kind(&self) -> LayerKind;

    fn forward(&mut self, x: &Tensor<E>, mode: Mode, rng: &mut Rng) -> Result<Tensor<E>>;

    /// Gradient with respect to the input of the cached forward. Parameter
    /// gradients land in the layer's [`Param`]s.
    fn backward(&mut self, grad: &Tensor<E>) -> Result<Tensor<E>>;

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>>;

    fn params(&self) -> Vec<&Param<E>> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        Vec::new()
    }

    /// Non-learnable state that still belongs in a checkpoint.
    fn buffers(&self) -> Vec<(&'static str, &Tensor<E>)> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Tensor<E>)> {
        Vec::new()
    }

    /// Hyperparameters recorded in checkpoint manifests.
    fn hyper(&self) -> Value {
        Value::Null
    }

    fn weighted(&self) -> bool {
        false
    }
}

/// Closed set of layer kinds, so networks can be stored as plain vectors.
#[derive(Debug, Clone)]
pub enum LayerNode<E: Element> {
    Dense(Dense<E>),
    Conv2d(Conv2d<E>),
    Relu(Relu),
    BatchNorm(BatchNorm<E>),
    Dropout(Dropout<E>),
    Ic(IcLayer<E>),
}

macro_rules! dispatch {
    ($self:expr, $l:ident => $body:expr) => {
        match $self {
            LayerNode::Dense($l) => $body,
            LayerNode::Conv2d($l) => $body,
            LayerNode::Relu($l) => $body,
            LayerNode::BatchNorm($l) => $body,
            LayerNode::Dropout($l) => $body,
            LayerNode::Ic($l) => $body,
        }
    };
}

impl<E: Element> Layer<E> for LayerNode<E> {
    fn kind(&self) -> LayerKind {
        dispatch!(self, l => Layer::<E>::kind(l))
    }

    fn forward(&mut self, x: &Tensor<E>, mode: Mode, rng: &mut Rng) -> Result<Tensor<E>> {
        dispatch!(self, l => l.forward(x, mode, rng))
    }

    fn backward(&mut self, grad: &Tensor<E>) -> Result<Tensor<E>> {
        dispatch!(self, l => l.backward(grad))
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        dispatch!(self, l => Layer::<E>::output_shape(l, input))
    }

    fn params(&self) -> Vec<&Param<E>> {
        dispatch!(self, l => l.params())
    }

    fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        dispatch!(self, l => l.params_mut())
    }

    fn buffers(&self) -> Vec<(&'static str, &Tensor<E>)> {
        dispatch!(self, l => l.buffers())
    }

    fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Tensor<E>)> {
        dispatch!(self, l => l.buffers_mut())
    }

    fn hyper(&self) -> Value {
        dispatch!(self, l => Layer::<E>::hyper(l))
    }

    fn weighted(&self) -> bool {
        dispatch!(self, l => Layer::<E>::weighted(l))
    }
}

/// `(N, C, spatial)` view used by per-channel layers: rank-4 tensors are
/// `N x C x H x W`, rank-2 tensors are `N x features` with spatial size 1.
pub(crate) fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [n, c] => Ok((*n, *c, 1)),
        [n, c, h, w] => Ok((*n, *c, h * w)),
        _ => Err(crate::Error::Shape(format!(
            "expected N x C or N x C x H x W, got {shape:?}"
        ))),
    }
}

pub(crate) fn no_cache(kind: &str) -> crate::Error {
    crate::Error::Usage(format!("{kind} backward called without a training-mode forward"))
}
