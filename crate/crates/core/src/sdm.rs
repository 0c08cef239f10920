//! Semantic decomposition: `k` learnable view tokens refined against local
//! features by attention-aggregation blocks, then fused with the global
//! feature.
//!
//! One block:
//!
//! ```text
//! Ê = softmax(Q Kᵀ / √r_h) V W_o + E        Q = E W_q, K = X W_k, V = X W_v
//! E = Ê + MLP(LN(Ê))
//! ```
//!
//! and after the last block `B = LN(E_L + 1 g)`. The residual around the MLP
//! is taken on the un-normalized `Ê`, so zero `W_o` and a zero MLP leave the
//! view tokens untouched.

use alloc::format;
use alloc::vec::Vec;

use crate::config::ModelConfig;
use crate::math;
use crate::numerics::kernels::unit_rows;
use crate::numerics::{LayerNorm, Linear, Mlp, ParamId, ParamStore, Session, Tensor, Var};
use crate::{Error, Result, Rng};

#[derive(Clone, Debug)]
pub struct AggregationBlock {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    /// `[r_h, r]`, no bias.
    pub w_o: ParamId,
    pub ln: LayerNorm,
    pub mlp: Mlp,
}

/// Parameters of one SDM (the visual and textual sides each own one).
#[derive(Clone, Debug)]
pub struct Sdm {
    pub e0: ParamId,
    pub blocks: Vec<AggregationBlock>,
    pub out_ln: LayerNorm,
    pub no_global: bool,
}

/// Tape nodes produced by [`Sdm::forward`].
#[derive(Clone, Debug)]
pub struct SdmNodes {
    /// `[k, r]` fused view embeddings.
    pub b: Var,
    /// `[k, r]` output of the last block, before fusion.
    pub e_last: Var,
    /// One `[k, tokens]` pre-softmax logit matrix per block.
    pub logits: Vec<Var>,
}

/// Concrete view embeddings of one input.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewEmbeddings {
    pub b: Tensor,
    pub e_last: Tensor,
}

/// Pre-softmax attention logits, `[l, k, tokens]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregationTrace {
    pub logits: Tensor,
}

impl AggregationTrace {
    pub fn blocks(&self) -> usize {
        self.logits.shape()[0]
    }

    /// `[k, tokens]` logits of block `t`.
    pub fn block(&self, t: usize) -> Tensor {
        self.logits.slab(t)
    }
}

impl Sdm {
    /// `prefix` is `"sdm_v"` or `"sdm_t"`.
    pub fn new(store: &mut ParamStore, rng: &mut Rng, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let (r, r_h, k) = (cfg.r, cfg.head_dim(), cfg.k);
        let e0 = store.add_normal(format!("{prefix}.e0"), &[k, r], 1.0, rng)?;
        let mut blocks = Vec::with_capacity(cfg.sdm_layers);
        for t in 0..cfg.sdm_layers {
            let name = format!("{prefix}.block{t}");
            blocks.push(AggregationBlock {
                q: Linear::new(store, rng, &format!("{name}.q"), r, r_h, true)?,
                k: Linear::new(store, rng, &format!("{name}.k"), r, r_h, true)?,
                v: Linear::new(store, rng, &format!("{name}.v"), r, r_h, true)?,
                w_o: store.add_normal(format!("{name}.o"), &[r_h, r], 1.0 / math::sqrt(r_h as f64), rng)?,
                ln: LayerNorm::new(store, &format!("{name}.ln"), r)?,
                mlp: Mlp::new(store, rng, &format!("{name}.mlp"), r, cfg.hidden(), r, 2)?,
            });
        }
        Ok(Sdm {
            e0,
            blocks,
            out_ln: LayerNorm::new(store, &format!("{prefix}.out_ln"), r)?,
            no_global: cfg.no_global,
        })
    }

    /// `local` is `[tokens, r]`, `global` is `[1, r]`.
    pub fn forward(&self, s: &mut Session, local: Var, global: Var) -> Result<SdmNodes> {
        let mut e = s.param(self.e0);
        let mut logits = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let q = block.q.forward(s, e)?;
            let k = block.k.forward(s, local)?;
            let v = block.v.forward(s, local)?;
            let (att, a) = s.tape.scaled_attention(q, k, v)?;
            logits.push(a);
            let w_o = s.param(block.w_o);
            let upd = s.tape.matmul(att, w_o)?;
            let e_hat = s.tape.add(upd, e)?;
            let h = block.ln.forward(s, e_hat)?;
            let h = block.mlp.forward(s, h)?;
            let h = s.dropout(h)?;
            e = s.tape.add(e_hat, h)?;
        }
        let fused = if self.no_global {
            e
        } else {
            s.tape.add_row(e, global)?
        };
        let b = self.out_ln.forward(s, fused)?;
        Ok(SdmNodes { b, e_last: e, logits })
    }

    /// Dropout-free forward pass on concrete tensors.
    pub fn evaluate(
        &self,
        store: &ParamStore,
        eps: f64,
        local: &Tensor,
        global: &Tensor,
    ) -> Result<(ViewEmbeddings, AggregationTrace)> {
        let mut s = Session::eval(store, eps);
        let l = s.tape.constant(local.as_matrix());
        let g = s.tape.constant(global.reshape(&[1, global.len()])?);
        let nodes = self.forward(&mut s, l, g)?;
        let views = ViewEmbeddings {
            b: s.tape.value(nodes.b).clone(),
            e_last: s.tape.value(nodes.e_last).clone(),
        };
        Ok((views, trace_of(&s, &nodes.logits)?))
    }
}

/// Stacks per-block logit nodes into an `[l, k, tokens]` trace.
pub fn trace_of(s: &Session, logits: &[Var]) -> Result<AggregationTrace> {
    let first = logits
        .first()
        .ok_or_else(|| Error::Empty("aggregation trace with zero blocks".into()))?;
    let (k, n) = (s.tape.value(*first).rows(), s.tape.value(*first).cols());
    let mut data = Vec::with_capacity(logits.len() * k * n);
    for &a in logits {
        data.extend_from_slice(s.tape.value(a).data());
    }
    Ok(AggregationTrace {
        logits: Tensor::new(&[logits.len(), k, n], data)?,
    })
}

/// `[k, k]` cosine similarities between the rows of `e_last`.
pub fn redundancy_matrix(e_last: &Tensor) -> Result<Tensor> {
    let (u, _) = unit_rows(e_last, "redundancy_matrix")?;
    u.matmul(&u.transpose())
}

/// `1 − ‖mean of unit rows‖₂`, in `[0, 1]`.
pub fn circular_variance(b: &Tensor) -> Result<f64> {
    let (u, _) = unit_rows(b, "circular_variance")?;
    let (k, r) = (u.rows(), u.cols());
    let mut mean = alloc::vec![0.0; r];
    for i in 0..k {
        for (m, x) in mean.iter_mut().zip(u.row(i)) {
            *m += x / k as f64;
        }
    }
    let norm = math::sqrt(mean.iter().map(|m| m * m).sum());
    Ok((1.0 - norm).clamp(0.0, 1.0))
}
