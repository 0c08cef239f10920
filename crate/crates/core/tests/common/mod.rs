#![allow(dead_code)]

use emdepart_core::{Rng, Tensor};
use rand_distr::{Distribution, StandardNormal};

pub fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape, data).unwrap()
}

