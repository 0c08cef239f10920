//! Adam with a warmup plus cosine schedule, the epoch loop, checkpoints and
//! a per-axis hyperparameter sweep.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::alignment::LossComponents;
use crate::config::{ExperimentConfig, SweepAxis, TrainConfig};
use crate::data::{batch_iter, ClassId, DocumentBank, FeatureBank, Partition, SplitSpec};
use crate::inference::{class_sets, evaluate_table, score_row, select_gamma_cs, ScoreTable};
use crate::math;
use crate::model::{mean_circular_variance, EmDepart};
use crate::numerics::{ParamStore, Session, Tensor};
use crate::{seeded_rng, Error, Result, Rng};

/// Learning rate of `epoch`: a linear ramp from zero over the warmup
/// epochs, then half a cosine from `base_lr` down to zero at the last epoch.
pub fn cosine_lr(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::Config(format!("epoch {epoch} outside 0..{}", cfg.epochs)));
    }
    let w = cfg.warmup_epochs;
    if epoch < w {
        return Ok(cfg.base_lr * epoch as f64 / w as f64);
    }
    let span = cfg.epochs - w;
    let progress = if span <= 1 { 0.0 } else { (epoch - w) as f64 / (span - 1) as f64 };
    Ok((cfg.base_lr * 0.5 * (1.0 + math::cos(PI * progress))).max(0.0))
}

/// Bias-corrected Adam moments, one pair per parameter in store order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Adam {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update from the accumulated gradients and zeroes them.
    /// A non-finite gradient aborts before any parameter changes.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::shape("adam_step (moments per parameter)", &[self.m.len()], &[store.len()]));
        }
        if let Some((_, p)) = store.iter().find(|(_, p)| !p.grad.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", p.name)));
        }
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - libm::pow(self.beta1, t);
        let c2 = 1.0 - libm::pow(self.beta2, t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            let w = p.value.data_mut();
            for i in 0..g.len() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * g[i];
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = md[i] / c1;
                let v_hat = vd[i] / c2;
                w[i] -= lr * m_hat / (math::sqrt(v_hat) + self.eps);
            }
        }
        store.zero_grad();
        Ok(())
    }
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    #[serde(rename = "L_global")]
    pub l_global: f64,
    #[serde(rename = "L_local")]
    pub l_local: f64,
    #[serde(rename = "L_var")]
    pub l_var: f64,
    #[serde(rename = "L_div")]
    pub l_div: f64,
    #[serde(rename = "S_var_V")]
    pub s_var_v: f64,
    #[serde(rename = "S_var_T")]
    pub s_var_t: f64,
    pub val_t1: f64,
    pub val_h: f64,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,lr,L_global,L_local,L_var,L_div,S_var_V,S_var_T,val_T1,val_H";

    /// One CSV line; floats use the shortest round-trip representation.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            self.epoch,
            self.lr,
            self.l_global,
            self.l_local,
            self.l_var,
            self.l_div,
            self.s_var_v,
            self.s_var_t,
            self.val_t1,
            self.val_h
        )
    }
}

/// Images, documents and the partition a run trains and evaluates on.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub bank: &'a FeatureBank,
    pub docs: &'a DocumentBank,
    pub part: &'a Partition,
}

/// Evaluation of a model on the evaluation side of a partition.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub t1: f64,
    pub h: f64,
    pub gamma_cs: f64,
    pub s_var_v: f64,
    pub s_var_t: f64,
    pub table: ScoreTable,
}

/// Embeds the evaluation images and every class of `data.part`, scores them
/// and reports zero-shot T1 and generalized H. The calibrated-stacking
/// penalty is the configured one, or else the grid value maximizing H on
/// this same partition.
pub fn evaluate_partition(model: &EmDepart, cfg: &ExperimentConfig, data: TrainData) -> Result<EvalSummary> {
    let part = data.part;
    let classes = part.all_classes();
    let class_emb = crate::inference::embed_classes(model, data.docs, &classes)?;
    let images: Vec<usize> = part.eval_unseen_images.iter().chain(&part.eval_seen_images).copied().collect();
    let mut scores = Vec::with_capacity(images.len());
    let mut image_sets = Vec::with_capacity(images.len());
    for &i in &images {
        let e = model.embed_image(&data.bank.image(i))?;
        scores.push(score_row(&e, &class_emb, cfg.scoring())?);
        image_sets.push(e.views.b);
    }
    let table = ScoreTable {
        classes,
        labels: images.iter().map(|&i| data.bank.label(i)).collect(),
        images,
        scores,
    };
    let (seen, unseen) = class_sets(part);
    let (ui, si) = (&part.eval_unseen_images, &part.eval_seen_images);
    let gamma_cs = match cfg.eval.gamma_cs {
        Some(g) => g,
        None => select_gamma_cs(&table, &seen, &unseen, ui, si, &cfg.eval.gamma_grid)?,
    };
    let report = evaluate_table(&table, &seen, &unseen, ui, si, gamma_cs, cfg.scoring().p)?;
    Ok(EvalSummary {
        t1: report.t1,
        h: report.h,
        gamma_cs,
        s_var_v: mean_circular_variance(&image_sets)?,
        s_var_t: mean_circular_variance(class_emb.iter().map(|e| &e.views.b))?,
        table,
    })
}

/// Generator state, enough to continue the exact stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> Rng {
        use rand::SeedableRng;
        let mut rng = Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub r0: usize,
    pub word_dim: usize,
    /// Epochs completed.
    pub epoch: usize,
    pub params: Vec<NamedTensor>,
    pub adam: Adam,
    pub rng: RngState,
    pub log: Vec<EpochMetrics>,
}

impl Checkpoint {
    /// Rebuilds the model and loads the stored parameter values; names and
    /// shapes must match the architecture exactly.
    pub fn model(&self) -> Result<EmDepart> {
        let mut model = EmDepart::new(&self.config.model, self.r0, self.word_dim, self.config.train.seed)?;
        if self.params.len() != model.store.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameters, architecture needs {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (p, stored) in model.store.iter_mut().zip(&self.params) {
            if p.name != stored.name || p.value.shape() != stored.value.shape() {
                return Err(Error::Data(format!(
                    "checkpoint parameter {} {:?} does not match {} {:?}",
                    stored.name,
                    stored.value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = stored.value.clone();
        }
        Ok(model)
    }
}

/// Training state between epochs.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: ExperimentConfig,
    pub model: EmDepart,
    pub adam: Adam,
    /// Next epoch to run.
    pub epoch: usize,
    pub log: Vec<EpochMetrics>,
    rng: Rng,
}

impl Trainer {
    pub fn new(config: &ExperimentConfig, r0: usize, word_dim: usize) -> Result<Self> {
        let model = config.build_model(r0, word_dim)?;
        let adam = Adam::new(&model.store, &config.train);
        // Shuffling and dropout use their own stream, separate from initialization.
        let mut rng = seeded_rng(config.train.seed);
        rng.set_stream(1);
        Ok(Trainer {
            config: config.clone(),
            model,
            adam,
            epoch: 0,
            log: Vec::new(),
            rng,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        let model = ckpt.model()?;
        if ckpt.adam.m.len() != model.store.len() || ckpt.adam.v.len() != model.store.len() {
            return Err(Error::Data("optimizer state does not match the parameters".into()));
        }
        Ok(Trainer {
            config: ckpt.config.clone(),
            model,
            adam: ckpt.adam.clone(),
            epoch: ckpt.epoch,
            log: ckpt.log.clone(),
            rng: ckpt.rng.restore(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            r0: self.model.r0,
            word_dim: self.model.word_dim,
            epoch: self.epoch,
            params: self
                .model
                .store
                .iter()
                .map(|(_, p)| NamedTensor {
                    name: p.name.clone(),
                    value: p.value.clone(),
                })
                .collect(),
            adam: self.adam.clone(),
            rng: RngState::capture(&self.rng),
            log: self.log.clone(),
        }
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.train.epochs
    }

    /// One pass over the training images followed by evaluation.
    pub fn run_epoch(&mut self, data: TrainData) -> Result<EpochMetrics> {
        let cfg = &self.config;
        let lr = cosine_lr(self.epoch, &cfg.train)?;
        let part = data.part;
        let class_index: BTreeMap<ClassId, usize> =
            part.train_classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let docs: Vec<&Tensor> = part
            .train_classes
            .iter()
            .map(|&c| data.docs.get(c).map(|d| &d.embedding))
            .collect::<Result<_>>()?;

        let batches = batch_iter(&part.train_images, cfg.train.batch_size, &mut self.rng)?;
        let mut sums = LossComponents::default();
        let mut n_batches = 0usize;
        for batch in batches {
            let images: Vec<Tensor> = batch.iter().map(|&i| data.bank.image(i)).collect();
            let labels: Vec<usize> = batch
                .iter()
                .map(|&i| {
                    let c = data.bank.label(i);
                    class_index
                        .get(&c)
                        .copied()
                        .ok_or_else(|| Error::Data(format!("training image {i} has non-training class {c}")))
                })
                .collect::<Result<_>>()?;
            let model = &self.model;
            let mut s = Session::train(&model.store, model.eps(), cfg.train.dropout, &mut self.rng);
            let loss = model.batch_loss(&mut s, &images, &labels, &docs, &cfg.alignment)?;
            let c = LossComponents {
                global: s.tape.scalar(loss.global),
                local: s.tape.scalar(loss.local),
                var: s.tape.scalar(loss.var),
                div: s.tape.scalar(loss.div),
            };
            c.check_finite()?;
            let grads = s.tape.backward(loss.total)?;
            drop(s);
            self.model.store.accumulate(&grads);
            self.adam.step(&mut self.model.store, lr)?;
            sums.global += c.global;
            sums.local += c.local;
            sums.var += c.var;
            sums.div += c.div;
            n_batches += 1;
        }

        let eval = evaluate_partition(&self.model, &self.config, data)?;
        let nb = n_batches as f64;
        let m = EpochMetrics {
            epoch: self.epoch,
            lr,
            l_global: sums.global / nb,
            l_local: sums.local / nb,
            l_var: sums.var / nb,
            l_div: sums.div / nb,
            s_var_v: eval.s_var_v,
            s_var_t: eval.s_var_t,
            val_t1: eval.t1,
            val_h: eval.h,
        };
        self.epoch += 1;
        self.log.push(m.clone());
        Ok(m)
    }

    /// Runs the remaining epochs.
    pub fn run(&mut self, data: TrainData) -> Result<&[EpochMetrics]> {
        while !self.is_done() {
            self.run_epoch(data)?;
        }
        Ok(&self.log)
    }

    /// The metrics log as CSV text.
    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.log)
    }
}

pub fn metrics_csv(log: &[EpochMetrics]) -> String {
    let mut out = String::from(EpochMetrics::CSV_HEADER);
    out.push('\n');
    for m in log {
        out.push_str(&m.csv_row());
        out.push('\n');
    }
    out
}

/// Trains a fresh model on `data` for the configured number of epochs.
pub fn train(cfg: &ExperimentConfig, data: TrainData) -> Result<Trainer> {
    let mut t = Trainer::new(cfg, data.bank.r0(), data.docs.word_dim())?;
    t.run(data)?;
    Ok(t)
}

/// One trained configuration of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub val_t1: f64,
    pub val_h: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridSearch {
    pub best: ExperimentConfig,
    pub rows: Vec<SweepRow>,
}

impl GridSearch {
    pub fn csv(&self) -> String {
        let mut out = String::from("axis,value,val_T1,val_H\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:?},{:?},{:?}\n", r.axis, r.value, r.val_t1, r.val_h));
        }
        out
    }
}

/// Per-axis sweep on the validation partition: each axis is tried in turn
/// with the others held at their current best, and the value with the
/// highest final validation H (first on ties) is kept.
pub fn grid_search(
    base: &ExperimentConfig,
    axes: &[SweepAxis],
    bank: &FeatureBank,
    docs: &DocumentBank,
    splits: &SplitSpec,
) -> Result<GridSearch> {
    if axes.iter().all(SweepAxis::is_empty) {
        return Err(Error::Empty("sweep has no configurations".into()));
    }
    let part = splits.validation_partition(bank)?;
    let data = TrainData { bank, docs, part: &part };
    let mut best = base.clone();
    let mut rows = Vec::new();
    for axis in axes {
        let mut axis_best: Option<(ExperimentConfig, f64)> = None;
        for i in 0..axis.len() {
            let mut cfg = best.clone();
            let value = axis.apply(i, &mut cfg);
            let t = train(&cfg, data)?;
            let last = t.log.last().ok_or_else(|| Error::Empty("training ran no epochs".into()))?;
            rows.push(SweepRow {
                axis: axis.name().to_string(),
                value,
                val_t1: last.val_t1,
                val_h: last.val_h,
            });
            if axis_best.as_ref().is_none_or(|(_, h)| last.val_h > *h) {
                axis_best = Some((cfg, last.val_h));
            }
        }
        if let Some((cfg, _)) = axis_best {
            best = cfg;
        }
    }
    Ok(GridSearch { best, rows })
}
