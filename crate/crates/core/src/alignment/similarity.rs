//! Set similarities between view-embedding sets.
//!
//! Every score is a function of the cosine matrix `sim[i][j] = cos(v_i, t_j)`
//! (rows visual, columns textual). [`set_score`] evaluates a score together
//! with its gradient with respect to that matrix, which is how the losses
//! put it on the tape.

use alloc::vec;
use alloc::vec::Vec;

use crate::config::SimilarityVariant;
use crate::math;
use crate::numerics::kernels::unit_rows;
use crate::numerics::Tensor;
use crate::{Error, Result};

/// `[rows(a), rows(b)]` cosine similarities.
pub fn cosine_matrix(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.cols() {
        return Err(Error::shape("cosine_matrix", a.shape(), b.shape()));
    }
    let (ua, _) = unit_rows(a, "cosine_matrix")?;
    let (ub, _) = unit_rows(b, "cosine_matrix")?;
    ua.matmul(&ub.transpose())
}

/// `log Σ_j exp(cos(b, set_j))`.
pub fn lse(b: &[f64], set: &Tensor) -> Result<f64> {
    let b = Tensor::row_vector(b)?;
    let sim = cosine_matrix(&b, set)?;
    Ok(math::log_sum_exp(sim.data().iter().copied()))
}

/// Symmetric smooth chamfer similarity.
pub fn smooth_chamfer(bt: &Tensor, bv: &Tensor) -> Result<f64> {
    chamfer_variant(bt, bv, SimilarityVariant::SmoothChamfer)
}

/// Full-set similarity under `variant`.
pub fn chamfer_variant(bt: &Tensor, bv: &Tensor, variant: SimilarityVariant) -> Result<f64> {
    let sim = cosine_matrix(bv, bt)?;
    let p = sim.rows().max(sim.cols());
    Ok(set_score(&sim, variant, p)?.0)
}

/// Top-`p` partner selection in both directions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TopCosMask {
    pub k_v: usize,
    pub k_t: usize,
    /// `visual[i * k_t + j]`: `t_j` is among the top-`p` partners of `v_i`.
    pub visual: Vec<bool>,
    /// `textual[i * k_t + j]`: `v_i` is among the top-`p` partners of `t_j`.
    pub textual: Vec<bool>,
}

impl TopCosMask {
    pub fn visual(&self, i: usize, j: usize) -> bool {
        self.visual[i * self.k_t + j]
    }

    pub fn textual(&self, i: usize, j: usize) -> bool {
        self.textual[i * self.k_t + j]
    }

    /// `[2, k_v, k_t]` with 1.0 for selected pairs.
    pub fn to_tensor(&self) -> Tensor {
        let data = self
            .visual
            .iter()
            .chain(&self.textual)
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect();
        Tensor::from_parts(vec![2, self.k_v, self.k_t], data)
    }
}

/// Indices of the `p` largest values; ties go to the lower index.
pub(crate) fn top_p(values: &[f64], p: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    // partial_cmp so that -0.0 and 0.0 tie; cosines are finite.
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(p);
    idx
}

fn check_p(sim: &Tensor, p: usize) -> Result<()> {
    let k = sim.rows().max(sim.cols());
    if p == 0 || p > k {
        return Err(Error::Config(alloc::format!("partial-score width p = {p} must lie in 1..={k}")));
    }
    Ok(())
}

/// Selection mask for a `[k_v, k_t]` cosine matrix.
pub fn top_cos_from_sim(sim: &Tensor, p: usize) -> Result<TopCosMask> {
    check_p(sim, p)?;
    let (kv, kt) = (sim.rows(), sim.cols());
    let mut visual = vec![false; kv * kt];
    let mut textual = vec![false; kv * kt];
    for i in 0..kv {
        for j in top_p(sim.row(i), p.min(kt)) {
            visual[i * kt + j] = true;
        }
    }
    let st = sim.transpose();
    for j in 0..kt {
        for i in top_p(st.row(j), p.min(kv)) {
            textual[i * kt + j] = true;
        }
    }
    Ok(TopCosMask { k_v: kv, k_t: kt, visual, textual })
}

pub fn top_cos(bv: &Tensor, bt: &Tensor, p: usize) -> Result<TopCosMask> {
    top_cos_from_sim(&cosine_matrix(bv, bt)?, p)
}

/// Smooth chamfer restricted to each embedding's top-`p` partners, keeping
/// the `1/(2k)` prefactor.
pub fn partial_score(bv: &Tensor, bt: &Tensor, p: usize) -> Result<f64> {
    let sim = cosine_matrix(bv, bt)?;
    Ok(set_score(&sim, SimilarityVariant::SmoothChamfer, p)?.0)
}

/// Score of a cosine matrix under `variant`, restricted to top-`p` partners,
/// and its gradient with respect to the matrix.
///
/// Each direction reduces a row (or column) over its selected partners: by
/// log-sum-exp, by mean or by maximum. The sum of all reductions is divided
/// by `k_v + k_t`. The maximum's subgradient goes to the lowest index among
/// ties.
pub fn set_score(sim: &Tensor, variant: SimilarityVariant, p: usize) -> Result<(f64, Tensor)> {
    check_p(sim, p)?;
    let (kv, kt) = (sim.rows(), sim.cols());
    let norm = 1.0 / (kv + kt) as f64;
    let mut grad = Tensor::zeros(&[kv, kt]);
    let mut total = 0.0;

    let reduce = |vals: &[f64], sel: &[usize], g: &mut dyn FnMut(usize, f64)| -> f64 {
        match variant {
            SimilarityVariant::SmoothChamfer => {
                let l = math::log_sum_exp(sel.iter().map(|&j| vals[j]));
                for &j in sel {
                    g(j, math::exp(vals[j] - l));
                }
                l
            }
            SimilarityVariant::Average => {
                let w = 1.0 / sel.len() as f64;
                for &j in sel {
                    g(j, w);
                }
                sel.iter().map(|&j| vals[j]).sum::<f64>() * w
            }
            SimilarityVariant::Maximum => {
                // `sel` is sorted by value, so its head is the argmax.
                g(sel[0], 1.0);
                vals[sel[0]]
            }
        }
    };

    for i in 0..kv {
        let row = sim.row(i);
        let sel = top_p(row, p.min(kt));
        let gd = grad.data_mut();
        total += reduce(row, &sel, &mut |j, w| gd[i * kt + j] += w * norm);
    }
    let st = sim.transpose();
    for j in 0..kt {
        let col = st.row(j);
        let sel = top_p(col, p.min(kv));
        let gd = grad.data_mut();
        total += reduce(col, &sel, &mut |i, w| gd[i * kt + j] += w * norm);
    }
    Ok((total * norm, grad))
}
