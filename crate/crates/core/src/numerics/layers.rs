//! Parameter handles for the building blocks shared by every module, and the
//! [`Session`] that evaluates them on a tape.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::{ParamId, ParamStore, Tape, Var};
use crate::math;
use crate::{Result, Rng};

/// A forward pass in progress: the tape, the parameters it reads and the
/// dropout state (`None` means evaluation mode).
pub struct Session<'a> {
    pub tape: Tape,
    pub store: &'a ParamStore,
    pub eps: f64,
    dropout: Option<(f64, &'a mut Rng)>,
}

impl<'a> Session<'a> {
    /// Evaluation mode: dropout disabled.
    pub fn eval(store: &'a ParamStore, eps: f64) -> Self {
        Session {
            tape: Tape::new(),
            store,
            eps,
            dropout: None,
        }
    }

    pub fn train(store: &'a ParamStore, eps: f64, rate: f64, rng: &'a mut Rng) -> Self {
        Session {
            tape: Tape::new(),
            store,
            eps,
            dropout: Some((rate, rng)),
        }
    }

    /// Evaluation mode on an existing tape (used by gradient checks, whose
    /// closures receive the tape to record on).
    pub fn eval_on(tape: &mut Tape, store: &'a ParamStore, eps: f64) -> Self {
        Session {
            tape: core::mem::take(tape),
            store,
            eps,
            dropout: None,
        }
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        match &mut self.dropout {
            Some((rate, rng)) => self.tape.dropout(x, *rate, rng, true),
            None => Ok(x),
        }
    }
}

/// `x W + b` with `W: [d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// Weights drawn from `N(0, 1 / d_in)`, zero bias.
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let std = 1.0 / math::sqrt(d_in as f64);
        let w = store.add_normal(format!("{name}.w"), &[d_in, d_out], std, rng)?;
        let b = if bias {
            Some(store.add_full(format!("{name}.b"), &[d_out], 0.0)?)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.w);
        let b = self.b.map(|b| s.param(b));
        s.tape.affine(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add_full(format!("{name}.gain"), &[dim], 1.0)?,
            bias: store.add_full(format!("{name}.bias"), &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (g, b) = (s.param(self.gain), s.param(self.bias));
        let eps = s.eps;
        s.tape.layer_norm(x, g, b, eps)
    }
}

/// Affine layers with GELU and dropout between consecutive layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `layers` affine maps `d_in -> hidden -> ... -> d_out`.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        layers: usize,
    ) -> Result<Self> {
        let mut out = Vec::with_capacity(layers);
        for i in 0..layers {
            let a = if i == 0 { d_in } else { hidden };
            let b = if i + 1 == layers { d_out } else { hidden };
            let lname: String = format!("{name}.{i}");
            out.push(Linear::new(store, rng, &lname, a, b, true)?);
        }
        Ok(Mlp { layers: out })
    }

    pub fn forward(&self, s: &mut Session, mut x: Var) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                x = s.tape.gelu(x);
                x = s.dropout(x)?;
            }
            x = layer.forward(s, x)?;
        }
        Ok(x)
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|l| core::iter::once(l.w).chain(l.b))
    }
}
