use super::{Element, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// I.i.d. `{0, 1}` gates, each 1 with probability `p_keep`.
pub fn sample_bernoulli<E: Element>(rng: &mut Rng, p_keep: f64, shape: &[usize]) -> Result<Tensor<E>> {
    if !(p_keep > 0.0 && p_keep <= 1.0) {
        return Err(Error::Parameter(format!("p_keep must lie in (0, 1], got {p_keep}")));
    }
    if p_keep == 1.0 {
        return Ok(Tensor::ones(shape));
    }
    // Keep iff u < floor(p * 2^32) for a uniform 32-bit u, which is off
    // from p by less than 2^-32.
    let threshold = (p_keep * 4_294_967_296.0) as u64;
    let len: usize = shape.iter().product();
    let mut data = Vec::with_capacity(len);
    let mut words = [0u32; 512];
    while data.len() < len {
        let take = (len - data.len()).min(words.len());
        rng.fill_u32(&mut words[..take]);
        data.extend(words[..take].iter().map(|&u| if (u as u64) < threshold { E::one() } else { E::zero() }));
    }
    Tensor::new(shape, data)
}

pub fn sample_normal<E: Element>(rng: &mut Rng, shape: &[usize], mean: f64, std: f64) -> Tensor<E> {
    Tensor::from_fn(shape, |_| E::lit(mean + std * rng.normal()))
}
