use rand::Rng;

use crate::element::{cast, Element};
use crate::rng::NamedRng;
use crate::tensor::{numel, Tensor};

/// U(−bound, bound).
pub fn uniform<T: Element>(shape: &[usize], bound: f64, rng: &mut NamedRng) -> Tensor<T> {
    let v = (0..numel(shape)).map(|_| cast(rng.random_range(-bound..=bound))).collect();
    Tensor::new(shape, v).expect("numel")
}

/// The usual fan-in scaled uniform init for dense and recurrent weights.
pub fn fan_in<T: Element>(shape: &[usize], fan_in: usize, rng: &mut NamedRng) -> Tensor<T> {
    uniform(shape, 1.0 / (fan_in.max(1) as f64).sqrt(), rng)
}
