use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{sample_normal, Element, Tensor};

/// He-normal initialization: i.i.d. `N(0, 2 / fan_in)`.
pub fn he_init<E: Element>(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Result<Tensor<E>> {
    if fan_in == 0 {
        return Err(Error::Parameter("he_init needs fan_in >= 1".into()));
    }
    Ok(sample_normal(rng, shape, 0.0, (2.0 / fan_in as f64).sqrt()))
}
