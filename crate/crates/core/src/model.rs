//! The full model: perceivers, one decomposition module per modality and
//! the cross-attention scorer used by the local loss.

use alloc::vec::Vec;

use crate::alignment::{self, CrossAttention};
use crate::config::{AlignmentConfig, ExperimentConfig, ModelConfig, SimilarityVariant};
use crate::numerics::{ParamStore, Session, Tensor, Var};
use crate::perceivers::{ImagePerceiver, TextPerceiver};
use crate::sdm::{circular_variance, trace_of, AggregationTrace, Sdm, ViewEmbeddings};
use crate::{seeded_rng, Error, Result};

#[derive(Clone, Debug)]
pub struct EmDepart {
    pub model: ModelConfig,
    pub store: ParamStore,
    pub r0: usize,
    pub word_dim: usize,
    pub image: ImagePerceiver,
    pub text: TextPerceiver,
    pub sdm_v: Sdm,
    pub sdm_t: Sdm,
    pub cross: CrossAttention,
}

/// Tape nodes and diagnostics of one training batch.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub total: Var,
    pub global: Var,
    pub local: Var,
    pub var: Var,
    pub div: Var,
}

/// Everything inference and diagnostics need about one input.
#[derive(Clone, Debug)]
pub struct Embedded {
    pub views: ViewEmbeddings,
    pub trace: AggregationTrace,
    /// `[tokens, r]` perceived local features.
    pub local: Tensor,
}

impl EmDepart {
    /// Parameters are drawn from a generator seeded with `seed`, in a fixed
    /// construction order.
    pub fn new(model: &ModelConfig, r0: usize, word_dim: usize, seed: u64) -> Result<Self> {
        if r0 == 0 || word_dim == 0 {
            return Err(Error::Config("feature and word dimensions must be positive".into()));
        }
        let mut store = ParamStore::new(seed);
        let mut rng = seeded_rng(seed);
        let image = ImagePerceiver::new(&mut store, &mut rng, r0, model)?;
        let text = TextPerceiver::new(&mut store, &mut rng, word_dim, model)?;
        let sdm_v = Sdm::new(&mut store, &mut rng, "sdm_v", model)?;
        let sdm_t = Sdm::new(&mut store, &mut rng, "sdm_t", model)?;
        let cross = CrossAttention::new(&mut store, &mut rng, model.r)?;
        Ok(EmDepart {
            model: model.clone(),
            store,
            r0,
            word_dim,
            image,
            text,
            sdm_v,
            sdm_t,
            cross,
        })
    }

    pub fn eps(&self) -> f64 {
        self.model.layer_norm_eps
    }

    /// Records the objective for a batch of raw images against every class
    /// document. `labels[i]` indexes `docs`.
    ///
    /// The variance and diversity terms average the per-image and per-document
    /// penalties separately before combining the two modalities.
    pub fn batch_loss(
        &self,
        s: &mut Session,
        images: &[Tensor],
        labels: &[usize],
        docs: &[&Tensor],
        cfg: &AlignmentConfig,
    ) -> Result<BatchLoss> {
        if images.len() != labels.len() {
            return Err(Error::shape("batch_loss (labels per image)", &[images.len()], &[labels.len()]));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= docs.len()) {
            return Err(Error::Data(alloc::format!("label index {y} has no document ({} classes)", docs.len())));
        }
        let (mut bts, mut tls, mut var_t, mut div_t) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for doc in docs {
            let pt = self.text.forward(s, doc)?;
            let nodes = self.sdm_t.forward(s, pt.local, pt.global)?;
            bts.push(nodes.b);
            tls.push(pt.local);
            var_t.push(alignment::losses::variance_penalty_node(&mut s.tape, &nodes.logits, cfg.gamma, cfg.eps)?);
            div_t.push(alignment::losses::redundancy_node(&mut s.tape, nodes.e_last)?);
        }
        let (mut bvs, mut ils, mut var_v, mut div_v) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for raw in images {
            let pi = self.image.forward(s, raw)?;
            let nodes = self.sdm_v.forward(s, pi.local, pi.global)?;
            bvs.push(nodes.b);
            ils.push(pi.local);
            var_v.push(alignment::losses::variance_penalty_node(&mut s.tape, &nodes.logits, cfg.gamma, cfg.eps)?);
            div_v.push(alignment::losses::redundancy_node(&mut s.tape, nodes.e_last)?);
        }

        let global = alignment::loss_global(&mut s.tape, &bvs, &bts, labels, cfg.tau, cfg.similarity_variant)?;
        let local = alignment::loss_local(s, &self.cross, &ils, &tls, labels)?;
        let var = modality_mean(&mut s.tape, &var_v, &var_t, 0.5)?;
        let k = self.model.k as f64;
        let div = modality_mean(&mut s.tape, &div_v, &div_t, 1.0 / (2.0 * k * k))?;
        let total = alignment::total_loss_node(&mut s.tape, global, local, var, div, cfg)?;
        Ok(BatchLoss { total, global, local, var, div })
    }

    /// Dropout-free embedding of one raw image `[n + 1, r0]`.
    pub fn embed_image(&self, raw: &Tensor) -> Result<Embedded> {
        let mut s = Session::eval(&self.store, self.eps());
        let pi = self.image.forward(&mut s, raw)?;
        let nodes = self.sdm_v.forward(&mut s, pi.local, pi.global)?;
        embedded(&s, pi.local, &nodes)
    }

    /// Dropout-free embedding of one document `[m, word_dim]`.
    pub fn embed_document(&self, tokens: &Tensor) -> Result<Embedded> {
        let mut s = Session::eval(&self.store, self.eps());
        let pt = self.text.forward(&mut s, tokens)?;
        let nodes = self.sdm_t.forward(&mut s, pt.local, pt.global)?;
        embedded(&s, pt.local, &nodes)
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }
}

fn embedded(s: &Session, local: Var, nodes: &crate::sdm::SdmNodes) -> Result<Embedded> {
    Ok(Embedded {
        views: ViewEmbeddings {
            b: s.tape.value(nodes.b).clone(),
            e_last: s.tape.value(nodes.e_last).clone(),
        },
        trace: trace_of(s, &nodes.logits)?,
        local: s.tape.value(local).clone(),
    })
}

/// `c · (mean(a) + mean(b))`.
fn modality_mean(tape: &mut crate::Tape, a: &[Var], b: &[Var], c: f64) -> Result<Var> {
    let sa = tape.sum(a)?;
    let sa = tape.scale(sa, c / a.len() as f64);
    let sb = tape.sum(b)?;
    let sb = tape.scale(sb, c / b.len() as f64);
    tape.add(sa, sb)
}

/// Score of an image embedding against a class embedding: the partial score
/// with width `p`, or the full-set similarity when `p` is `None`.
pub fn pair_score(bv: &Tensor, bt: &Tensor, variant: SimilarityVariant, p: Option<usize>) -> Result<f64> {
    let sim = alignment::cosine_matrix(bv, bt)?;
    let p = p.unwrap_or(sim.rows().max(sim.cols()));
    Ok(alignment::set_score(&sim, variant, p)?.0)
}

/// Mean circular variance over a collection of view-embedding sets.
pub fn mean_circular_variance<'a>(sets: impl IntoIterator<Item = &'a Tensor>) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for b in sets {
        sum += circular_variance(b)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("circular variance of no embeddings".into()));
    }
    Ok(sum / n as f64)
}

impl ExperimentConfig {
    /// Builds a freshly initialized model for data of the given dimensions.
    pub fn build_model(&self, r0: usize, word_dim: usize) -> Result<EmDepart> {
        self.validate()?;
        EmDepart::new(&self.model, r0, word_dim, self.train.seed)
    }
}

/// Which term of the objective a gradient check differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    Global,
    Local,
    Var,
    Div,
    Total,
}

impl LossTerm {
    pub const ALL: [LossTerm; 5] = [LossTerm::Global, LossTerm::Local, LossTerm::Var, LossTerm::Div, LossTerm::Total];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Global => "L_global",
            LossTerm::Local => "L_local",
            LossTerm::Var => "L_var",
            LossTerm::Div => "L_div",
            LossTerm::Total => "L_total",
        }
    }
}

/// Finite-difference check of every loss term on a small random model
/// (k = 3, n = 5 patches, m = 7 tokens, r = 8, two blocks per module) with
/// two images and three documents.
///
/// The variance margin is set far above the logit spread so every hinge is
/// active and no entry sits at a kink.
pub fn gradient_suite(
    seed: u64,
    cfg: &crate::numerics::GradCheckConfig,
) -> Result<Vec<(LossTerm, crate::numerics::GradCheckReport)>> {
    use rand_distr::{Distribution, StandardNormal};

    let model_cfg = ModelConfig {
        r: 8,
        k: 3,
        sdm_layers: 2,
        ..ModelConfig::default()
    };
    let (r0, word_dim, n, m) = (6, 12, 5, 7);
    let model = EmDepart::new(&model_cfg, r0, word_dim, seed)?;
    let mut rng = seeded_rng(seed.wrapping_add(1));
    let mut randn = |rows: usize, cols: usize| -> Result<Tensor> {
        let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::new(&[rows, cols], data)
    };
    let images = [randn(n + 1, r0)?, randn(n + 1, r0)?];
    let docs = [randn(m, word_dim)?, randn(m, word_dim)?, randn(m, word_dim)?];
    let doc_refs: Vec<&Tensor> = docs.iter().collect();
    let labels = [2, 0];
    let align = AlignmentConfig {
        tau: 0.5,
        gamma: 50.0,
        ..AlignmentConfig::default()
    };

    let mut out = Vec::with_capacity(LossTerm::ALL.len());
    for term in LossTerm::ALL {
        let mut store = model.store.clone();
        let report = crate::numerics::finite_diff_check(
            &mut store,
            |store, tape| {
                let mut s = Session::eval_on(tape, store, model.eps());
                let loss = model.batch_loss(&mut s, &images, &labels, &doc_refs, &align);
                *tape = s.into_tape();
                let l = loss?;
                Ok(match term {
                    LossTerm::Global => l.global,
                    LossTerm::Local => l.local,
                    LossTerm::Var => l.var,
                    LossTerm::Div => l.div,
                    LossTerm::Total => l.total,
                })
            },
            cfg,
        )?;
        out.push((term, report));
    }
    Ok(out)
}
