//! Image and text perceivers mapping raw features into the shared
//! dimension `r`.
//!
//! The text encoder has no positional encoding: documents are treated as
//! bags of words, so the encoder is equivariant to token order.

use alloc::format;
use alloc::vec::Vec;

use crate::config::ModelConfig;
use crate::math;
use crate::numerics::{LayerNorm, Linear, Mlp, ParamId, ParamStore, Session, Tensor, Var};
use crate::{Error, Result, Rng};

/// Global token and local tokens of one perceived input, as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct Perceived {
    /// `[1, r]`.
    pub global: Var,
    /// `[tokens, r]`.
    pub local: Var,
}

/// `y0 = proj(raw)`, `out = y0 + MLP(y0)` tokenwise.
#[derive(Clone, Debug)]
pub struct ImagePerceiver {
    pub proj: Linear,
    pub mlp: Mlp,
    pub residual: bool,
}

impl ImagePerceiver {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, r0: usize, cfg: &ModelConfig) -> Result<Self> {
        Ok(ImagePerceiver {
            proj: Linear::new(store, rng, "image.proj", r0, cfg.r, true)?,
            mlp: Mlp::new(store, rng, "image.mlp", cfg.r, cfg.hidden(), cfg.r, cfg.image_mlp_layers)?,
            residual: !cfg.no_residual,
        })
    }

    /// `raw` is `[n + 1, r0]` with the global token in row 0.
    pub fn forward(&self, s: &mut Session, raw: &Tensor) -> Result<Perceived> {
        let rows = raw.rows();
        if rows < 2 {
            return Err(Error::shape("image_perceive (n + 1 >= 2 tokens)", raw.shape(), &[2]));
        }
        let x = s.tape.constant(raw.as_matrix());
        let y0 = self.proj.forward(s, x)?;
        let h = self.mlp.forward(s, y0)?;
        let y = if self.residual { s.tape.add(y0, h)? } else { h };
        Ok(Perceived {
            global: s.tape.slice_rows(y, 0, 1)?,
            local: s.tape.slice_rows(y, 1, rows)?,
        })
    }
}

/// Multi-head self-attention expressed as one projection triple per head;
/// head outputs are projected back to `r` and summed, which equals
/// concatenation followed by a single output projection.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub heads: Vec<[Linear; 3]>,
    pub out: Vec<ParamId>,
    pub out_bias: ParamId,
}

impl SelfAttention {
    fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, r: usize, heads: usize) -> Result<Self> {
        let d = r / heads;
        let mut hs = Vec::with_capacity(heads);
        let mut out = Vec::with_capacity(heads);
        for h in 0..heads {
            hs.push([
                Linear::new(store, rng, &format!("{name}.h{h}.q"), r, d, true)?,
                Linear::new(store, rng, &format!("{name}.h{h}.k"), r, d, true)?,
                Linear::new(store, rng, &format!("{name}.h{h}.v"), r, d, true)?,
            ]);
            let std = 1.0 / math::sqrt(r as f64);
            out.push(store.add_normal(format!("{name}.h{h}.o"), &[d, r], std, rng)?);
        }
        let out_bias = store.add_full(format!("{name}.o.b"), &[r], 0.0)?;
        Ok(SelfAttention { heads: hs, out, out_bias })
    }

    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let mut parts = Vec::with_capacity(self.heads.len());
        for ([q, k, v], &o) in self.heads.iter().zip(&self.out) {
            let (qv, kv, vv) = (q.forward(s, x)?, k.forward(s, x)?, v.forward(s, x)?);
            let (att, _) = s.tape.scaled_attention(qv, kv, vv)?;
            let w = s.param(o);
            parts.push(s.tape.matmul(att, w)?);
        }
        let sum = s.tape.sum(&parts)?;
        let b = s.param(self.out_bias);
        s.tape.add_row(sum, b)
    }
}

/// Pre-norm transformer encoder block.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln_attn: LayerNorm,
    pub attn: SelfAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: Mlp,
}

impl EncoderBlock {
    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.ln_attn.forward(s, x)?;
        let a = self.attn.forward(s, h)?;
        let a = s.dropout(a)?;
        let x = s.tape.add(x, a)?;
        let h = self.ln_ffn.forward(s, x)?;
        let f = self.ffn.forward(s, h)?;
        s.tape.add(x, f)
    }
}

/// Token MLP to `r`, learnable CLS token, then encoder blocks.
#[derive(Clone, Debug)]
pub struct TextPerceiver {
    pub proj: Mlp,
    pub cls: ParamId,
    pub blocks: Vec<EncoderBlock>,
}

impl TextPerceiver {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, word_dim: usize, cfg: &ModelConfig) -> Result<Self> {
        let r = cfg.r;
        let proj = Mlp::new(store, rng, "text.proj", word_dim, cfg.hidden(), r, 2)?;
        let cls = store.add_normal("text.cls", &[1, r], 1.0, rng)?;
        let mut blocks = Vec::with_capacity(cfg.encoder_blocks);
        for b in 0..cfg.encoder_blocks {
            let name = format!("text.enc{b}");
            blocks.push(EncoderBlock {
                ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), r)?,
                attn: SelfAttention::new(store, rng, &format!("{name}.attn"), r, cfg.encoder_heads)?,
                ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), r)?,
                ffn: Mlp::new(store, rng, &format!("{name}.ffn"), r, cfg.hidden(), r, 2)?,
            });
        }
        Ok(TextPerceiver { proj, cls, blocks })
    }

    /// `tokens` is `[m, word_dim]`.
    pub fn forward(&self, s: &mut Session, tokens: &Tensor) -> Result<Perceived> {
        let m = tokens.rows();
        let x = s.tape.constant(tokens.as_matrix());
        let t = self.proj.forward(s, x)?;
        let t = s.dropout(t)?;
        let cls = s.param(self.cls);
        let mut seq = s.tape.concat_rows(&[cls, t])?;
        for block in &self.blocks {
            seq = block.forward(s, seq)?;
        }
        Ok(Perceived {
            global: s.tape.slice_rows(seq, 0, 1)?,
            local: s.tape.slice_rows(seq, 1, m + 1)?,
        })
    }
}
