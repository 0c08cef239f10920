//! Scalar kernels shared by the plain operations and the tape.

use alloc::vec::Vec;

use super::Tensor;
use crate::math;
use crate::{Error, Result};

/// `sqrt(2 / pi)` in the tanh approximation of GELU.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient in the tanh approximation of GELU.
pub const GELU_CUBIC: f64 = 0.044715;

/// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + math::tanh(u))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = math::tanh(u);
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Max-shifted softmax of one slice.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = math::exp(*x - max);
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Normalizes `row` to zero mean and unit (population) variance, returning
/// `1 / sqrt(var + eps)`.
pub fn normalize_row(row: &mut [f64], eps: f64) -> f64 {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / math::sqrt(var + eps);
    for x in row.iter_mut() {
        *x = (*x - mean) * inv_std;
    }
    inv_std
}

/// Rows scaled to unit L2 norm, plus the original norms.
pub fn unit_rows(t: &Tensor, op: &'static str) -> Result<(Tensor, Vec<f64>)> {
    let c = t.cols();
    let mut out = t.as_matrix();
    let mut norms = Vec::with_capacity(t.rows());
    for (r, row) in out.data_mut().chunks_mut(c).enumerate() {
        let norm = math::sqrt(row.iter().map(|x| x * x).sum());
        if norm == 0.0 {
            return Err(Error::ZeroNorm { op, row: r });
        }
        for x in row.iter_mut() {
            *x /= norm;
        }
        norms.push(norm);
    }
    Ok((out, norms))
}
