//! The four training losses and their weighted total, recorded on a tape.
//!
//! Plain-tensor versions of the variance and diversity terms are provided
//! for diagnostics and tests.

use alloc::format;
use alloc::vec::Vec;

use super::similarity::set_score;
use crate::config::{AlignmentConfig, SimilarityVariant};
use crate::math;
use crate::numerics::{LayerNorm, Linear, ParamId, ParamStore, Session, Tape, Tensor, Var};
use crate::sdm::{redundancy_matrix, AggregationTrace};
use crate::{Error, Result, Rng};

/// Set similarity of `bv` and `bt` (both `[k, r]`) as a tape node.
pub fn similarity_node(tape: &mut Tape, bv: Var, bt: Var, variant: SimilarityVariant, p: usize) -> Result<Var> {
    let sim = tape.cos_matrix(bv, bt)?;
    let (value, grad) = set_score(tape.value(sim), variant, p)?;
    Ok(tape.scalar_fn(sim, value, grad))
}

/// `−log softmax(logits)[target]` for a `[1, C]` row.
pub fn softmax_ce(tape: &mut Tape, logits: Var, target: usize) -> Result<Var> {
    let lv = tape.value(logits);
    if target >= lv.len() {
        return Err(Error::shape("softmax_ce (target < classes)", &[target + 1], lv.shape()));
    }
    let l = math::log_sum_exp(lv.data().iter().copied());
    let value = l - lv.data()[target];
    let mut grad = lv.map(|x| math::exp(x - l))?;
    grad.data_mut()[target] -= 1.0;
    Ok(tape.scalar_fn(logits, value, grad))
}

fn mean(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    let s = tape.sum(parts)?;
    Ok(tape.scale(s, 1.0 / parts.len() as f64))
}

/// Mean over images of the temperature-scaled cross-entropy of set
/// similarities against every training class.
///
/// `labels[i]` indexes `class_sets`.
pub fn loss_global(
    tape: &mut Tape,
    image_sets: &[Var],
    class_sets: &[Var],
    labels: &[usize],
    tau: f64,
    variant: SimilarityVariant,
) -> Result<Var> {
    if image_sets.is_empty() || class_sets.is_empty() {
        return Err(Error::Empty("global loss needs images and classes".into()));
    }
    let mut per_image = Vec::with_capacity(image_sets.len());
    for (&bv, &y) in image_sets.iter().zip(labels) {
        let mut scores = Vec::with_capacity(class_sets.len());
        for &bt in class_sets {
            let k = tape.value(bt).rows().max(tape.value(bv).rows());
            scores.push(similarity_node(tape, bv, bt, variant, k)?);
        }
        let row = tape.stack(&scores)?;
        let logits = tape.scale(row, 1.0 / tau);
        per_image.push(softmax_ce(tape, logits, y)?);
    }
    mean(tape, &per_image)
}

/// Patch-to-word cross-attention with a residual and layer norm, followed by
/// mean pooling and a linear scoring head.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    /// `[r, r]`, no bias.
    pub w_o: ParamId,
    pub ln: LayerNorm,
    /// `[r, 1]` scoring head.
    pub d: ParamId,
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, r: usize) -> Result<Self> {
        let std = 1.0 / math::sqrt(r as f64);
        Ok(CrossAttention {
            q: Linear::new(store, rng, "cross.q", r, r, true)?,
            k: Linear::new(store, rng, "cross.k", r, r, true)?,
            v: Linear::new(store, rng, "cross.v", r, r, true)?,
            w_o: store.add_normal("cross.o", &[r, r], std, rng)?,
            ln: LayerNorm::new(store, "cross.ln", r)?,
            d: store.add_normal("cross.d", &[r, 1], std, rng)?,
        })
    }

    /// `LN(I_l + softmax(Q Kᵀ/√r) V W_o)` with queries from the patches.
    pub fn fuse(&self, s: &mut Session, patches: Var, words: Var) -> Result<Var> {
        let q = self.q.forward(s, patches)?;
        let k = self.k.forward(s, words)?;
        let v = self.v.forward(s, words)?;
        let (att, _) = s.tape.scaled_attention(q, k, v)?;
        let w_o = s.param(self.w_o);
        let upd = s.tape.matmul(att, w_o)?;
        let x = s.tape.add(patches, upd)?;
        self.ln.forward(s, x)
    }

    /// `mean_patches(fused) · D`, a `[1, 1]` node.
    pub fn score(&self, s: &mut Session, fused: Var) -> Result<Var> {
        let pooled = s.tape.mean_rows(fused);
        let d = s.param(self.d);
        s.tape.matmul(pooled, d)
    }
}

/// Mean over images of the cross-entropy of fine-grained scores (no
/// temperature).
pub fn loss_local(
    s: &mut Session,
    cross: &CrossAttention,
    image_locals: &[Var],
    class_locals: &[Var],
    labels: &[usize],
) -> Result<Var> {
    if image_locals.is_empty() || class_locals.is_empty() {
        return Err(Error::Empty("local loss needs images and classes".into()));
    }
    let mut per_image = Vec::with_capacity(image_locals.len());
    for (&il, &y) in image_locals.iter().zip(labels) {
        let mut scores = Vec::with_capacity(class_locals.len());
        for &tl in class_locals {
            let fused = cross.fuse(s, il, tl)?;
            scores.push(cross.score(s, fused)?);
        }
        let row = s.tape.stack(&scores)?;
        per_image.push(softmax_ce(&mut s.tape, row, y)?);
    }
    mean(&mut s.tape, &per_image)
}

/// `Σ_j max(0, γ − √(Var_i a_ij + ε))` over the columns of a `[k, tokens]`
/// logit matrix, and its gradient. The variance is the population variance
/// over the `k` views; at the hinge kink the zero branch is taken.
pub fn variance_hinge(logits: &Tensor, gamma: f64, eps: f64) -> (f64, Tensor) {
    let (k, n) = (logits.rows(), logits.cols());
    let mut grad = Tensor::zeros(&[k, n]);
    let mut total = 0.0;
    for j in 0..n {
        let mean = (0..k).map(|i| logits.at(i, j)).sum::<f64>() / k as f64;
        let var = (0..k).map(|i| (logits.at(i, j) - mean) * (logits.at(i, j) - mean)).sum::<f64>() / k as f64;
        let sd = math::sqrt(var + eps);
        let gap = gamma - sd;
        if gap > 0.0 {
            total += gap;
            let g = grad.data_mut();
            for i in 0..k {
                g[i * n + j] = -(logits.at(i, j) - mean) / (k as f64 * sd);
            }
        }
    }
    (total, grad)
}

/// Variance penalty `C(A)` summed over the blocks of one forward pass.
pub fn variance_penalty_node(tape: &mut Tape, logits: &[Var], gamma: f64, eps: f64) -> Result<Var> {
    let mut parts = Vec::with_capacity(logits.len());
    for &a in logits {
        let (value, grad) = variance_hinge(tape.value(a), gamma, eps);
        parts.push(tape.scalar_fn(a, value, grad));
    }
    tape.sum(&parts)
}

/// `C(A)` of a recorded trace.
pub fn variance_penalty(trace: &AggregationTrace, gamma: f64, eps: f64) -> f64 {
    (0..trace.blocks()).map(|t| variance_hinge(&trace.block(t), gamma, eps).0).sum()
}

/// `½ (C(A_T) + C(A_V))`.
pub fn loss_var(trace_v: &AggregationTrace, trace_t: &AggregationTrace, gamma: f64, eps: f64) -> f64 {
    0.5 * (variance_penalty(trace_t, gamma, eps) + variance_penalty(trace_v, gamma, eps))
}

fn frobenius_off_identity(m: &Tensor) -> (f64, Tensor) {
    let k = m.rows();
    let mut d = m.clone();
    for i in 0..k {
        d.data_mut()[i * k + i] -= 1.0;
    }
    let norm = math::sqrt(d.data().iter().map(|x| x * x).sum());
    if norm == 0.0 {
        return (0.0, Tensor::zeros(&[k, k]));
    }
    (norm, d.scaled(1.0 / norm))
}

/// `‖M − I‖_F` of the redundancy matrix of `e_last` as a tape node.
pub fn redundancy_node(tape: &mut Tape, e_last: Var) -> Result<Var> {
    let m = tape.cos_matrix(e_last, e_last)?;
    let (value, grad) = frobenius_off_identity(tape.value(m));
    Ok(tape.scalar_fn(m, value, grad))
}

/// `(1 / 2k²)(‖M_T − I‖_F + ‖M_V − I‖_F)`.
pub fn loss_div(e_last_v: &Tensor, e_last_t: &Tensor) -> Result<f64> {
    let k = e_last_v.rows();
    if e_last_t.rows() != k {
        return Err(Error::shape("loss_div", e_last_v.shape(), e_last_t.shape()));
    }
    let mv = frobenius_off_identity(&redundancy_matrix(e_last_v)?).0;
    let mt = frobenius_off_identity(&redundancy_matrix(e_last_t)?).0;
    Ok((mv + mt) / (2.0 * (k * k) as f64))
}

/// Values of the four loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub global: f64,
    pub local: f64,
    pub var: f64,
    pub div: f64,
}

impl LossComponents {
    /// Errors with the name of the first non-finite term.
    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in [("L_global", self.global), ("L_local", self.local), ("L_var", self.var), ("L_div", self.div)] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{name} = {v}")));
            }
        }
        Ok(())
    }
}

/// `L_global + λ_local L_local + λ_var L_var + λ_div L_div`.
pub fn total_loss(c: &LossComponents, cfg: &AlignmentConfig) -> Result<f64> {
    c.check_finite()?;
    Ok(c.global + cfg.lambda_local * c.local + cfg.lambda_var * c.var + cfg.lambda_div * c.div)
}

/// Tape counterpart of [`total_loss`]; terms with zero weight are skipped.
pub fn total_loss_node(tape: &mut Tape, global: Var, local: Var, var: Var, div: Var, cfg: &AlignmentConfig) -> Result<Var> {
    let mut parts = alloc::vec![global];
    for (v, w) in [(local, cfg.lambda_local), (var, cfg.lambda_var), (div, cfg.lambda_div)] {
        if w != 0.0 {
            parts.push(tape.scale(v, w));
        }
    }
    tape.sum(&parts)
}
