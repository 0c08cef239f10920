//! Central-difference verification of tape gradients.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;

use super::{ParamStore, Tape, Var};
use crate::{Result, Rng};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Bound on `|analytic - numeric| / max(1, |numeric|)`.
    pub tol: f64,
    /// Check at most this many entries per parameter, chosen at random.
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-5,
            tol: 1e-4,
            max_entries_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntryCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub tol: f64,
    pub checked: usize,
    pub worst: Option<EntryCheck>,
    pub failures: Vec<EntryCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares the tape gradient of `loss_fn` with central differences for
/// every (or a sampled subset of) parameter entry.
///
/// `loss_fn` must be a deterministic scalar function of the store. A NaN on
/// either side counts as a failure with infinite error.
pub fn finite_diff_check<F>(store: &mut ParamStore, mut loss_fn: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut report = GradCheckReport {
        tol: cfg.tol,
        ..Default::default()
    };
    if store.is_empty() {
        return Ok(report);
    }

    let mut tape = Tape::new();
    let loss = loss_fn(store, &mut tape)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Option<Vec<f64>>> = store
        .iter()
        .map(|(id, _)| grads.param(id).map(|g| g.data().to_vec()))
        .collect();
    drop(tape);

    let mut rng: Rng = crate::seeded_rng(cfg.seed);
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for (pi, id) in ids.into_iter().enumerate() {
        let len = store.get(id).value.len();
        let entries: Vec<usize> = match cfg.max_entries_per_param {
            Some(max) if max < len => {
                let mut picked = sample(&mut rng, len, max).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..len).collect(),
        };
        for idx in entries {
            let orig = store.get(id).value.data()[idx];
            store.get_mut(id).value.data_mut()[idx] = orig + cfg.h;
            let plus = eval(store, &mut loss_fn)?;
            store.get_mut(id).value.data_mut()[idx] = orig - cfg.h;
            let minus = eval(store, &mut loss_fn)?;
            store.get_mut(id).value.data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * cfg.h);
            let a: f64 = analytic[pi].as_ref().map_or(0.0, |g| g[idx]);
            let rel_err = if a.is_finite() && numeric.is_finite() {
                (a - numeric).abs() / numeric.abs().max(1.0)
            } else {
                f64::INFINITY
            };
            let entry = EntryCheck {
                name: store.get(id).name.clone(),
                index: idx,
                analytic: a,
                numeric,
                rel_err,
            };
            report.checked += 1;
            if report.worst.as_ref().is_none_or(|w| rel_err > w.rel_err) {
                report.worst = Some(entry.clone());
            }
            if !(rel_err <= cfg.tol) {
                report.failures.push(entry);
            }
        }
    }
    Ok(report)
}

fn eval<F>(store: &ParamStore, loss_fn: &mut F) -> Result<f64>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = loss_fn(store, &mut tape)?;
    Ok(tape.scalar(v))
}
