//! Parameter initialization: fan-in-scaled uniform for conv/linear layers.

use crate::scalar::Scalar;
use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn fan_in_uniform<F: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize) -> F {
    let bound = 1.0 / (fan_in as f64).sqrt();
    F::cast(rng.random_range(-bound..bound))
}

pub fn conv_weight<F: Scalar>(
    rng: &mut ChaCha8Rng,
    out_ch: usize,
    in_ch: usize,
    kh: usize,
    kw: usize,
) -> Array4<F> {
    let fan_in = in_ch * kh * kw;
    Array4::from_shape_simple_fn((out_ch, in_ch, kh, kw), || fan_in_uniform(rng, fan_in))
}

pub fn linear_weight<F: Scalar>(rng: &mut ChaCha8Rng, out_f: usize, in_f: usize) -> Array2<F> {
    Array2::from_shape_simple_fn((out_f, in_f), || fan_in_uniform(rng, in_f))
}

pub fn bias<F: Scalar>(rng: &mut ChaCha8Rng, len: usize, fan_in: usize) -> Array1<F> {
    Array1::from_shape_simple_fn(len, || fan_in_uniform(rng, fan_in))
}
