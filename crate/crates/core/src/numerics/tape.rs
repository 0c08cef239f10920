//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! value and enough context for the analytic backward rule. Parameters enter
//! the tape once as leaves; [`Tape::backward`] returns gradients for every
//! node and the parameters they came from.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use super::kernels;
use super::tensor::{dot, gemm, gemm_nt, gemm_tn};
use super::{ParamId, ParamStore, Tensor};
use crate::math;
use crate::{Error, Result, Rng};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    Add { parts: Vec<Var> },
    AddRow { a: Var, row: Var },
    Scale { a: Var, c: f64 },
    MulConst { a: Var, mask: Tensor },
    SoftmaxRows { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Tensor, inv_std: Vec<f64> },
    Gelu { x: Var },
    ConcatRows { parts: Vec<Var> },
    SliceRows { a: Var, start: usize },
    MeanRows { a: Var },
    CosMatrix { a: Var, b: Var, a_hat: Tensor, b_hat: Tensor, a_norm: Vec<f64>, b_norm: Vec<f64> },
    Stack { parts: Vec<Var> },
    SumAll { a: Var },
    /// Scalar function of `input` whose gradient was computed in the forward pass.
    ScalarFn { input: Var, grad: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
}

/// Gradients of one scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` if `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every parameter that reached the loss.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.grads[v.0].as_ref().map(|g| (id, g)))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, v)| self.wrt(v))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Leaf);
        self.params.insert(id, v);
        v
    }

    /// `x W + b` over the last axis of `x`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (rows, d_in) = (xv.rows(), xv.cols());
        if wv.rank() != 2 || wv.shape()[0] != d_in {
            return Err(Error::shape("affine", xv.shape(), wv.shape()));
        }
        let d_out = wv.shape()[1];
        let mut out = vec![0.0; rows * d_out];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != d_out {
                return Err(Error::shape("affine bias", wv.shape(), bv.shape()));
            }
            for r in 0..rows {
                out[r * d_out..(r + 1) * d_out].copy_from_slice(bv.data());
            }
        }
        gemm(xv.data(), wv.data(), rows, d_in, d_out, &mut out);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = d_out;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Affine { x, w, b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul { a, b }))
    }

    /// `a b^T` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(Error::shape("matmul_nt", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        let mut out = vec![0.0; m * n];
        gemm_nt(av.data(), bv.data(), m, k, n, &mut out);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.sum(&[a, b])
    }

    /// Elementwise sum of same-shaped nodes.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Empty("sum of no terms".into()))?;
        let mut out = self.value(first).clone();
        for &p in &parts[1..] {
            let pv = self.value(p);
            if pv.shape() != out.shape() {
                return Err(Error::shape("add", out.shape(), pv.shape()));
            }
            out.add_assign(pv);
        }
        Ok(self.push(out, Op::Add { parts: parts.to_vec() }))
    }

    /// Adds a `[c]` or `[1, c]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.len() != av.cols() {
            return Err(Error::shape("add_row", av.shape(), rv.shape()));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, x) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += x;
            }
        }
        Ok(self.push(out, Op::AddRow { a, row }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scaled(c);
        self.push(out, Op::Scale { a, c })
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, a: Var, mask: Tensor) -> Result<Var> {
        let av = self.value(a);
        if av.shape() != mask.shape() {
            return Err(Error::shape("mul_const", av.shape(), mask.shape()));
        }
        let data = av.data().iter().zip(mask.data()).map(|(x, m)| x * m).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        Ok(self.push(out, Op::MulConst { a, mask }))
    }

    /// Inverted dropout. Identity when `training` is false or `rate` is zero.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut Rng, training: bool) -> Result<Var> {
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let mask = dropout_mask(self.value(x).shape(), rate, rng)?;
        self.mul_const(x, mask)
    }

    /// Softmax along the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            kernels::softmax_in_place(row);
        }
        self.push(out, Op::SoftmaxRows { a })
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let c = xv.cols();
        if gv.len() != c || bv.len() != c {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for row in xhat.data_mut().chunks_mut(c) {
            inv_std.push(kernels::normalize_row(row, eps));
        }
        let mut out = xhat.clone();
        for row in out.data_mut().chunks_mut(c) {
            for ((o, g), b) in row.iter_mut().zip(gv.data()).zip(bv.data()) {
                *o = *o * g + b;
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| kernels::gelu(v)).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(out, Op::Gelu { x })
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Empty("concat of nothing".into()))?;
        let c = self.value(first).cols();
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != c {
                return Err(Error::shape("concat_rows", self.value(first).shape(), pv.shape()));
            }
            data.extend_from_slice(pv.data());
        }
        let rows = data.len() / c;
        let out = Tensor::from_parts(vec![rows, c], data);
        Ok(self.push(out, Op::ConcatRows { parts: parts.to_vec() }))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(a).slice_rows(start, end)?;
        Ok(self.push(out, Op::SliceRows { a, start }))
    }

    /// Mean over rows, giving `[1, c]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        let mut out = vec![0.0; c];
        for row in av.data().chunks(c) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        self.push(Tensor::from_parts(vec![1, c], out), Op::MeanRows { a })
    }

    /// Cosine similarity between every row of `a` and every row of `b`.
    pub fn cos_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(Error::shape("cos_matrix", av.shape(), bv.shape()));
        }
        let (a_hat, a_norm) = kernels::unit_rows(av, "cos_matrix")?;
        let (b_hat, b_norm) = kernels::unit_rows(bv, "cos_matrix")?;
        let (m, k, n) = (a_hat.rows(), a_hat.cols(), b_hat.rows());
        let mut out = vec![0.0; m * n];
        gemm_nt(a_hat.data(), b_hat.data(), m, k, n, &mut out);
        let out = Tensor::from_parts(vec![m, n], out);
        Ok(self.push(out, Op::CosMatrix { a, b, a_hat, b_hat, a_norm, b_norm }))
    }

    /// Collects one-element nodes into a `[1, n]` row.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("stack of nothing".into()));
        }
        let mut data = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            if pv.len() != 1 {
                return Err(Error::shape("stack", &[1], pv.shape()));
            }
            data.push(pv.item());
        }
        let out = Tensor::from_parts(vec![1, parts.len()], data);
        Ok(self.push(out, Op::Stack { parts: parts.to_vec() }))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll { a })
    }

    /// `0.5 * sum(a^2)`.
    pub fn half_sum_squares(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = 0.5 * dot(av.data(), av.data());
        let grad = av.clone();
        self.scalar_fn(a, value, grad)
    }

    /// Records a scalar function of `input` given its value and gradient.
    pub(crate) fn scalar_fn(&mut self, input: Var, value: f64, grad: Tensor) -> Var {
        debug_assert_eq!(grad.shape(), self.value(input).shape());
        self.push(Tensor::scalar(value), Op::ScalarFn { input, grad })
    }

    /// Single-head scaled dot-product attention.
    ///
    /// Returns `(softmax(q k^T / sqrt(r_h)) v, q k^T / sqrt(r_h))`; the logits
    /// are returned before the softmax.
    pub fn scaled_attention(&mut self, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
        let (kv, vv) = (self.value(k), self.value(v));
        if kv.rows() != vv.rows() {
            return Err(Error::shape("scaled_attention", kv.shape(), vv.shape()));
        }
        let r_h = self.value(q).cols();
        let dots = self.matmul_nt(q, k)?;
        let logits = self.scale(dots, 1.0 / math::sqrt(r_h as f64));
        let weights = self.softmax_rows(logits);
        let out = self.matmul(weights, v)?;
        Ok((out, logits))
    }

    /// Backpropagates from the one-element node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape("backward (scalar loss)", &[1], lv.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (rows, d_in, d_out) = (xv.rows(), xv.cols(), wv.shape()[1]);
                let mut gx = vec![0.0; rows * d_in];
                gemm_nt(g.data(), wv.data(), rows, d_out, d_in, &mut gx);
                accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
                let mut gw = vec![0.0; d_in * d_out];
                gemm_tn(xv.data(), g.data(), rows, d_in, d_out, &mut gw);
                accumulate(grads, *w, Tensor::from_parts(wv.shape().to_vec(), gw));
                if let Some(b) = b {
                    let gb = column_sums(g);
                    accumulate(grads, *b, Tensor::from_parts(self.value(*b).shape().to_vec(), gb));
                }
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.shape()[1]);
                let mut ga = vec![0.0; m * k];
                gemm_nt(g.data(), bv.data(), m, n, k, &mut ga);
                accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), ga));
                let mut gb = vec![0.0; k * n];
                gemm_tn(av.data(), g.data(), m, k, n, &mut gb);
                accumulate(grads, *b, Tensor::from_parts(bv.shape().to_vec(), gb));
            }
            Op::MatMulNt { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                let mut ga = vec![0.0; m * k];
                gemm(g.data(), bv.data(), m, n, k, &mut ga);
                accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), ga));
                let mut gb = vec![0.0; n * k];
                gemm_tn(g.data(), av.data(), m, n, k, &mut gb);
                accumulate(grads, *b, Tensor::from_parts(bv.shape().to_vec(), gb));
            }
            Op::Add { parts } => {
                for &p in parts {
                    accumulate(grads, p, g.clone());
                }
            }
            Op::AddRow { a, row } => {
                accumulate(grads, *a, g.clone());
                let gr = column_sums(g);
                accumulate(grads, *row, Tensor::from_parts(self.value(*row).shape().to_vec(), gr));
            }
            Op::Scale { a, c } => accumulate(grads, *a, g.scaled(*c)),
            Op::MulConst { a, mask } => {
                let data = g.data().iter().zip(mask.data()).map(|(x, m)| x * m).collect();
                accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), data));
            }
            Op::SoftmaxRows { a } => {
                let y = &node.value;
                let c = y.cols();
                let mut ga = vec![0.0; y.len()];
                for ((gr, yr), out) in g.data().chunks(c).zip(y.data().chunks(c)).zip(ga.chunks_mut(c)) {
                    let inner = dot(gr, yr);
                    for ((o, gi), yi) in out.iter_mut().zip(gr).zip(yr) {
                        *o = yi * (gi - inner);
                    }
                }
                accumulate(grads, *a, Tensor::from_parts(y.shape().to_vec(), ga));
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let gv = self.value(*gain);
                let c = xhat.cols();
                let mut g_gain = vec![0.0; c];
                let mut g_bias = vec![0.0; c];
                let mut gx = vec![0.0; xhat.len()];
                for (r, ((gr, xr), out)) in g
                    .data()
                    .chunks(c)
                    .zip(xhat.data().chunks(c))
                    .zip(gx.chunks_mut(c))
                    .enumerate()
                {
                    let mut mean_gxhat = 0.0;
                    let mut mean_gxhat_xhat = 0.0;
                    for j in 0..c {
                        g_gain[j] += gr[j] * xr[j];
                        g_bias[j] += gr[j];
                        let gxh = gr[j] * gv.data()[j];
                        mean_gxhat += gxh;
                        mean_gxhat_xhat += gxh * xr[j];
                    }
                    mean_gxhat /= c as f64;
                    mean_gxhat_xhat /= c as f64;
                    for j in 0..c {
                        let gxh = gr[j] * gv.data()[j];
                        out[j] = inv_std[r] * (gxh - mean_gxhat - xr[j] * mean_gxhat_xhat);
                    }
                }
                accumulate(grads, *x, Tensor::from_parts(xhat.shape().to_vec(), gx));
                accumulate(grads, *gain, Tensor::from_parts(gv.shape().to_vec(), g_gain));
                let bshape = self.value(*bias).shape().to_vec();
                accumulate(grads, *bias, Tensor::from_parts(bshape, g_bias));
            }
            Op::Gelu { x } => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(gi, &xi)| gi * kernels::gelu_grad(xi))
                    .collect();
                accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), data));
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.len();
                    let part = g.data()[offset..offset + n].to_vec();
                    accumulate(grads, p, Tensor::from_parts(pv.shape().to_vec(), part));
                    offset += n;
                }
            }
            Op::SliceRows { a, start } => {
                let av = self.value(*a);
                let c = av.cols();
                let mut ga = vec![0.0; av.len()];
                ga[start * c..start * c + g.len()].copy_from_slice(g.data());
                accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), ga));
            }
            Op::MeanRows { a } => {
                let av = self.value(*a);
                let r = av.rows() as f64;
                let mut ga = Vec::with_capacity(av.len());
                for _ in 0..av.rows() {
                    ga.extend(g.data().iter().map(|x| x / r));
                }
                accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), ga));
            }
            Op::CosMatrix { a, b, a_hat, b_hat, a_norm, b_norm } => {
                let (m, k, n) = (a_hat.rows(), a_hat.cols(), b_hat.rows());
                let mut ga_hat = vec![0.0; m * k];
                gemm(g.data(), b_hat.data(), m, n, k, &mut ga_hat);
                let mut gb_hat = vec![0.0; n * k];
                gemm_tn(g.data(), a_hat.data(), m, n, k, &mut gb_hat);
                let ga = unit_rows_backward(a_hat, a_norm, &ga_hat);
                let gb = unit_rows_backward(b_hat, b_norm, &gb_hat);
                accumulate(grads, *a, Tensor::from_parts(self.value(*a).shape().to_vec(), ga));
                accumulate(grads, *b, Tensor::from_parts(self.value(*b).shape().to_vec(), gb));
            }
            Op::Stack { parts } => {
                for (&p, &gi) in parts.iter().zip(g.data()) {
                    let shape = self.value(p).shape().to_vec();
                    accumulate(grads, p, Tensor::from_parts(shape, vec![gi]));
                }
            }
            Op::SumAll { a } => {
                let av = self.value(*a);
                accumulate(grads, *a, Tensor::full(av.shape(), g.item()));
            }
            Op::ScalarFn { input, grad } => accumulate(grads, *input, grad.scaled(g.item())),
        }
    }
}

/// Mask of `0` and `1 / (1 - rate)` entries.
pub fn dropout_mask(shape: &[usize], rate: f64, rng: &mut Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(alloc::format!("dropout rate {rate} outside [0, 1)")));
    }
    let keep = 1.0 / (1.0 - rate);
    let numel = shape.iter().product();
    let data = (0..numel)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Tensor::new(shape, data)
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums(g: &Tensor) -> Vec<f64> {
    let c = g.cols();
    let mut out = vec![0.0; c];
    for row in g.data().chunks(c) {
        for (o, x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
    out
}

/// Gradient through `a -> a / |a|` row by row.
fn unit_rows_backward(hat: &Tensor, norms: &[f64], g_hat: &[f64]) -> Vec<f64> {
    let c = hat.cols();
    let mut out = vec![0.0; hat.len()];
    for (r, ((h, gh), o)) in hat
        .data()
        .chunks(c)
        .zip(g_hat.chunks(c))
        .zip(out.chunks_mut(c))
        .enumerate()
    {
        let proj = dot(h, gh);
        for j in 0..c {
            o[j] = (gh[j] - h[j] * proj) / norms[r];
        }
    }
    out
}
