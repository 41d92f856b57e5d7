use serde_json::json;

use super::{he_init, no_cache, Layer, LayerKind, Mode, Param};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

/// Fully connected layer `y = x W^T + b` with `W` stored `out x in`, so row
/// `j` holds the incoming weights of output neuron `j`.
#[derive(Debug, Clone)]
pub struct Dense<E: Element> {
    pub weight: Param<E>,
    pub bias: Param<E>,
    input: Option<Tensor<E>>,
}

impl<E: Element> Dense<E> {
    pub fn new(rng: &mut Rng, inputs: usize, outputs: usize) -> Result<Self> {
        let weight = he_init(rng, &[outputs, inputs], inputs)?;
        Ok(Self::from_weights(weight, Tensor::zeros(&[outputs])))
    }

    pub fn from_weights(weight: Tensor<E>, bias: Tensor<E>) -> Self {
        Self {
            weight: Param::new("weight", weight),
            bias: Param::new("bias", bias),
            input: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    /// Per-sample weight gradients `dl/dy_i * x_i^T`, one `out x in` matrix
    /// per sample of the cached forward batch.
    pub fn per_sample_weight_grads(&self, grad: &Tensor<E>) -> Result<Vec<Tensor<E>>> {
        let x = self.input.as_ref().ok_or_else(|| no_cache("dense"))?;
        let (n, inp) = (x.shape()[0], x.shape()[1]);
        let out = self.outputs();
        if grad.shape() != [n, out] {
            return Err(Error::Shape(format!(
                "dense per-sample grads: expected [{n}, {out}], got {:?}",
                grad.shape()
            )));
        }
        (0..n)
            .map(|i| {
                let xi = &x.data()[i * inp..(i + 1) * inp];
                let gi = &grad.data()[i * out..(i + 1) * out];
                Tensor::new(
                    &[out, inp],
                    gi.iter().flat_map(|&g| xi.iter().map(move |&v| g * v)).collect(),
                )
            })
            .collect()
    }
}

impl<E: Element> Layer<E> for Dense<E> {
    fn kind(&self) -> LayerKind {
        LayerKind::Dense
    }

    fn forward(&mut self, x: &Tensor<E>, mode: Mode, _rng: &mut Rng) -> Result<Tensor<E>> {
        if x.rank() != 2 || x.shape()[1] != self.inputs() {
            return Err(Error::Shape(format!(
                "dense expects [N, {}], got {:?}",
                self.inputs(),
                x.shape()
            )));
        }
        let mut y = x.matmul_t(&self.weight.value)?;
        let out = self.outputs();
        let b = self.bias.value.data();
        for row in y.data_mut().chunks_mut(out) {
            for (v, &bj) in row.iter_mut().zip(b) {
                *v = *v + bj;
            }
        }
        self.input = mode.is_training().then(|| x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<E>) -> Result<Tensor<E>> {
        let x = self.input.as_ref().ok_or_else(|| no_cache("dense"))?;
        self.weight.grad = grad.t_matmul(x)?;
        let out = self.outputs();
        let mut db = vec![E::zero(); out];
        for row in grad.data().chunks(out) {
            for (acc, &g) in db.iter_mut().zip(row) {
                *acc = *acc + g;
            }
        }
        self.bias.grad = Tensor::new(&[out], db)?;
        grad.matmul(&self.weight.value)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match input {
            [n, i] if *i == self.inputs() => Ok(vec![*n, self.outputs()]),
            _ => Err(Error::Shape(format!("dense expects [N, {}], got {input:?}", self.inputs()))),
        }
    }

    fn params(&self) -> Vec<&Param<E>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn hyper(&self) -> serde_json::Value {
        json!({ "inputs": self.inputs(), "outputs": self.outputs() })
    }

    fn weighted(&self) -> bool {
        true
    }
}
