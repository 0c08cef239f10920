//! Plain (non-recording) forms of the tensor operations.

use alloc::vec;

use super::kernels;
use super::tape::dropout_mask;
use super::{Parameter, Tensor};
use crate::math;
use crate::{Error, Result, Rng};

/// Default layer-norm stabilizer.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `x W + b` over the last axis of `x`.
pub fn affine(x: &Tensor, w: &Parameter, b: &Parameter) -> Result<Tensor> {
    let d_in = x.cols();
    let ws = w.value.shape();
    if ws.len() != 2 || ws[0] != d_in {
        return Err(Error::shape("affine", x.shape(), ws));
    }
    if b.value.len() != ws[1] {
        return Err(Error::shape("affine bias", ws, b.value.shape()));
    }
    let mut y = x.as_matrix().matmul(&w.value)?;
    for r in 0..y.rows() {
        for (o, bv) in y.row_mut(r).iter_mut().zip(b.value.data()) {
            *o += bv;
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = ws[1];
    y.reshape(&shape)
}

/// Softmax along `axis`, stabilized by subtracting the slice maximum.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::shape("softmax axis", shape, &[axis]));
    }
    let inner: usize = shape[axis + 1..].iter().product();
    let len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    let mut slice = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            for (j, s) in slice.iter_mut().enumerate() {
                *s = data[idx(j)];
            }
            kernels::softmax_in_place(&mut slice);
            for (j, s) in slice.iter().enumerate() {
                data[idx(j)] = *s;
            }
        }
    }
    Ok(out)
}

/// Layer normalization over the last axis.
pub fn layer_norm(x: &Tensor, gain: &Parameter, bias: &Parameter, eps: f64) -> Result<Tensor> {
    let c = x.cols();
    if gain.value.len() != c || bias.value.len() != c {
        return Err(Error::shape("layer_norm", x.shape(), gain.value.shape()));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        kernels::normalize_row(row, eps);
        for ((o, g), b) in row.iter_mut().zip(gain.value.data()).zip(bias.value.data()) {
            *o = *o * g + b;
        }
    }
    Ok(out)
}

/// Elementwise GELU, tanh approximation with cubic constant 0.044715.
pub fn gelu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| kernels::gelu(v)).collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

/// Returns `(softmax(q k^T / sqrt(r_h)) v, q k^T / sqrt(r_h))`.
pub fn scaled_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    if q.cols() != k.cols() {
        return Err(Error::shape("scaled_attention q/k", q.shape(), k.shape()));
    }
    if k.rows() != v.rows() {
        return Err(Error::shape("scaled_attention k/v", k.shape(), v.shape()));
    }
    let scale = 1.0 / math::sqrt(q.cols() as f64);
    let logits = q.as_matrix().matmul(&k.as_matrix().transpose())?.scaled(scale);
    let weights = softmax(&logits, 1)?;
    let out = weights.matmul(&v.as_matrix())?;
    Ok((out, logits))
}

/// Inverted dropout; identity when not training.
pub fn dropout(x: &Tensor, rate: f64, rng: &mut Rng, training: bool) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(alloc::format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.shape(), rate, rng)?;
    let data = x.data().iter().zip(mask.data()).map(|(a, m)| a * m).collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::String;

    fn param(t: Tensor) -> Parameter {
        Parameter {
            name: String::from("p"),
            grad: Tensor::zeros(t.shape()),
            value: t,
        }
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn affine_examples() {
        let x = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        let w = param(Tensor::from_rows(&[[2.0, 3.0], [4.0, 5.0]]).unwrap());
        let b = param(Tensor::new(&[2], vec![1.0, 1.0]).unwrap());
        assert_eq!(affine(&x, &w, &b).unwrap().data(), &[3.0, 4.0]);
        let x3 = Tensor::new(&[2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = affine(&x3, &w, &b).unwrap();
        assert_eq!(y.shape(), &[2, 1, 2]);
        assert_eq!(y.data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::new(&[3], vec![0.0; 3]).unwrap(), 0).unwrap();
        assert!(close(s.data(), &[1.0 / 3.0; 3], 1e-15));
        let s = softmax(&Tensor::new(&[2], vec![1000.0, 0.0]).unwrap(), 0).unwrap();
        assert!(close(s.data(), &[1.0, 0.0], 1e-9));
        let s = softmax(&Tensor::new(&[2], vec![1.0, 2.0]).unwrap(), 0).unwrap();
        assert!(close(s.data(), &[0.26894, 0.73106], 1e-5));
        assert!(softmax(&Tensor::zeros(&[2, 2]), 2).is_err());
    }

    #[test]
    fn softmax_over_leading_axis() {
        let x = Tensor::from_rows(&[[1.0, 5.0], [3.0, 5.0]]).unwrap();
        let s = softmax(&x, 0).unwrap();
        assert!((s.at(0, 0) + s.at(1, 0) - 1.0).abs() < 1e-15);
        assert!((s.at(0, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_examples() {
        let ones = param(Tensor::full(&[3], 1.0));
        let zeros = param(Tensor::zeros(&[3]));
        let y = layer_norm(&Tensor::full(&[1, 3], 1.0), &ones, &zeros, LAYER_NORM_EPS).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);

        let g2 = param(Tensor::full(&[2], 1.0));
        let b2 = param(Tensor::zeros(&[2]));
        let y = layer_norm(&Tensor::from_rows(&[[-1.0, 1.0]]).unwrap(), &g2, &b2, 0.0).unwrap();
        assert!(close(y.data(), &[-1.0, 1.0], 1e-15));

        let gz = param(Tensor::zeros(&[2]));
        let bc = param(Tensor::full(&[2], 0.7));
        let y = layer_norm(&Tensor::from_rows(&[[3.0, -8.0]]).unwrap(), &gz, &bc, 1e-5).unwrap();
        assert_eq!(y.data(), &[0.7, 0.7]);
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(kernels::gelu(0.0), 0.0);
        assert!((kernels::gelu(1.0) - 0.8412).abs() < 5e-5);
        assert!((kernels::gelu(20.0) - 20.0).abs() < 1e-9);
    }

    #[test]
    fn attention_identity_and_zero_values() {
        let id = Tensor::identity(2);
        let (out, logits) = scaled_attention(&id, &id, &id).unwrap();
        let w = softmax(&logits, 1).unwrap();
        for r in 0..2 {
            assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-15);
            assert!(close(out.row(r), w.row(r), 1e-15));
        }
        let q = Tensor::from_rows(&[[0.3, -1.0], [2.0, 0.5]]).unwrap();
        let (out, _) = scaled_attention(&q, &q, &Tensor::zeros(&[2, 3])).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn dropout_identity_and_mean() {
        let mut rng = crate::seeded_rng(7);
        let x = Tensor::full(&[4], 2.0);
        assert_eq!(dropout(&x, 0.0, &mut rng, true).unwrap(), x);
        assert_eq!(dropout(&x, 0.5, &mut rng, false).unwrap(), x);
        assert!(dropout(&x, 1.0, &mut rng, true).is_err());

        // Each entry is 0 or 2 with probability 1/2: sd of the mean is 1/sqrt(n).
        let n = 100_000;
        let ones = Tensor::full(&[n], 1.0);
        let y = dropout(&ones, 0.5, &mut rng, true).unwrap();
        let mean = y.data().iter().sum::<f64>() / n as f64;
        let sigma = 1.0 / libm::sqrt(n as f64);
        assert!((mean - 1.0).abs() < 3.0 * sigma, "mean {mean}");
    }
}
