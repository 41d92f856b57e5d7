use super::{no_cache, Layer, LayerKind, Mode};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Default)]
pub struct Relu {
    active: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<E: Element> Layer<E> for Relu {
    fn kind(&self) -> LayerKind {
        LayerKind::Relu
    }

    fn forward(&mut self, x: &Tensor<E>, mode: Mode, _rng: &mut Rng) -> Result<Tensor<E>> {
        self.active = mode
            .is_training()
            .then(|| x.data().iter().map(|&v| v > E::zero()).collect());
        Ok(x.relu())
    }

    fn backward(&mut self, grad: &Tensor<E>) -> Result<Tensor<E>> {
        let active = self.active.as_ref().ok_or_else(|| no_cache("relu"))?;
        if active.len() != grad.len() {
            return Err(Error::Shape("relu backward: gradient size differs from forward".into()));
        }
        let data = grad
            .data()
            .iter()
            .zip(active)
            .map(|(&g, &a)| if a { g } else { E::zero() })
            .collect();
        Tensor::new(grad.shape(), data)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(input.to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_gates_on_sign() {
        let mut relu = Relu::new();
        let mut rng = Rng::new(0);
        let x = Tensor::<f64>::from_f64(&[4], &[-2.0, -0.5, 0.5, 3.0]).unwrap();
        relu.forward(&x, Mode::Train, &mut rng).unwrap();
        let g = Tensor::<f64>::from_f64(&[4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(relu.backward(&g).unwrap().data(), &[0.0, 0.0, 3.0, 4.0]);
    }

    #[test]
    fn backward_without_forward() {
        let mut relu = Relu::new();
        let g = Tensor::<f64>::zeros(&[2]);
        assert!(matches!(relu.backward(&g), Err(Error::Usage(_))));
    }
}
