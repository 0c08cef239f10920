//! Hyperparameters for the model, the losses, optimization and evaluation.
//!
//! Presets [`ExperimentConfig::awa2`], [`ExperimentConfig::cub`] and
//! [`ExperimentConfig::flo`] carry the published per-dataset settings;
//! [`ExperimentConfig::desk`] is a small configuration for the synthetic
//! datasets.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Shared embedding dimension.
    pub r: usize,
    /// Number of view embeddings.
    pub k: usize,
    /// Aggregation blocks per decomposition module.
    pub sdm_layers: usize,
    /// Attention head dimension inside the aggregation blocks; `None` means `r`.
    pub head_dim: Option<usize>,
    /// Transformer encoder blocks in the text perceiver.
    pub encoder_blocks: usize,
    pub encoder_heads: usize,
    /// Affine layers in the image perceiver's residual MLP.
    pub image_mlp_layers: usize,
    /// Hidden width of every MLP; `None` means `r`.
    pub mlp_hidden: Option<usize>,
    pub layer_norm_eps: f64,
    /// Drop the repeated global feature before the final layer norm.
    pub no_global: bool,
    /// Drop the skip connection around the image perceiver MLP.
    pub no_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            r: 32,
            k: 4,
            sdm_layers: 2,
            head_dim: None,
            encoder_blocks: 2,
            encoder_heads: 4,
            image_mlp_layers: 2,
            mlp_hidden: None,
            layer_norm_eps: 1e-5,
            no_global: false,
            no_residual: false,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.head_dim.unwrap_or(self.r)
    }

    pub fn hidden(&self) -> usize {
        self.mlp_hidden.unwrap_or(self.r)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityVariant {
    /// Log-sum-exp weighted bidirectional matching.
    #[default]
    SmoothChamfer,
    /// Mean of all pairwise cosines.
    Average,
    /// Bidirectional hard maximum.
    Maximum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignmentConfig {
    /// Temperature dividing set similarities in the global loss.
    pub tau: f64,
    pub lambda_local: f64,
    pub lambda_var: f64,
    pub lambda_div: f64,
    /// Margin of the attention-variance hinge.
    pub gamma: f64,
    /// Stabilizer inside the variance square root.
    pub eps: f64,
    /// Partners kept per embedding by the partial score.
    pub p: usize,
    pub similarity_variant: SimilarityVariant,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            tau: 32.0,
            lambda_local: 0.1,
            lambda_var: 1.0,
            lambda_div: 3.0,
            gamma: 0.10,
            eps: 1e-4,
            p: 3,
            similarity_variant: SimilarityVariant::SmoothChamfer,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub dropout: f64,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Hold out the validation classes during training and report
    /// validation metrics; otherwise train on every seen class.
    pub use_validation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1.0e-4,
            batch_size: 64,
            epochs: 32,
            warmup_epochs: 0,
            dropout: 0.35,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            use_validation: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Score with the full set similarity instead of the top-`p` partial score.
    pub no_partial_score: bool,
    /// Calibrated-stacking penalty; `None` selects it on validation data.
    pub gamma_cs: Option<f64>,
    /// Candidates tried when selecting the penalty.
    pub gamma_grid: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            no_partial_score: false,
            gamma_cs: None,
            gamma_grid: (0..=20).map(|i| f64::from(i) * 0.05).collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub alignment: AlignmentConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// Published AWA2 settings.
    pub fn awa2() -> Self {
        ExperimentConfig {
            model: ModelConfig { r: 256, k: 4, ..Default::default() },
            alignment: AlignmentConfig {
                tau: 32.0,
                lambda_local: 0.1,
                lambda_var: 1.0,
                lambda_div: 3.0,
                gamma: 0.10,
                eps: 1e-4,
                p: 3,
                ..Default::default()
            },
            train: TrainConfig {
                base_lr: 1.0e-4,
                batch_size: 64,
                epochs: 32,
                warmup_epochs: 0,
                dropout: 0.35,
                ..Default::default()
            },
            eval: EvalConfig::default(),
        }
    }

    /// Published CUB settings.
    pub fn cub() -> Self {
        ExperimentConfig {
            model: ModelConfig { r: 64, k: 5, ..Default::default() },
            alignment: AlignmentConfig {
                tau: 4.2,
                lambda_local: 0.5,
                lambda_var: 1.0,
                lambda_div: 3.0,
                gamma: 0.25,
                eps: 1e-4,
                p: 3,
                ..Default::default()
            },
            train: TrainConfig {
                base_lr: 8.0e-4,
                batch_size: 40,
                epochs: 32,
                warmup_epochs: 2,
                dropout: 0.15,
                ..Default::default()
            },
            eval: EvalConfig::default(),
        }
    }

    /// Published FLO settings.
    pub fn flo() -> Self {
        ExperimentConfig {
            model: ModelConfig { r: 128, k: 4, ..Default::default() },
            alignment: AlignmentConfig {
                tau: 4.0,
                lambda_local: 0.5,
                lambda_var: 1.0,
                lambda_div: 3.0,
                gamma: 0.75,
                eps: 1e-4,
                p: 1,
                ..Default::default()
            },
            train: TrainConfig {
                base_lr: 5.0e-4,
                batch_size: 48,
                epochs: 40,
                warmup_epochs: 0,
                dropout: 0.12,
                ..Default::default()
            },
            eval: EvalConfig::default(),
        }
    }

    /// AWA2 loss weights and margins at `r = 32`, with a learning rate,
    /// temperature, batch size and schedule sized for the synthetic
    /// datasets. A few hundred training images need small batches and no
    /// dropout to fit the seen classes within 30 epochs.
    pub fn desk() -> Self {
        let mut cfg = Self::awa2();
        cfg.model.r = 32;
        cfg.model.k = 4;
        cfg.alignment.tau = 0.1;
        cfg.train.base_lr = 2.0e-3;
        cfg.train.batch_size = 8;
        cfg.train.epochs = 30;
        cfg.train.dropout = 0.0;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let a = &self.alignment;
        let t = &self.train;
        let bad = |msg: alloc::string::String| Err(Error::Config(msg));
        if m.r == 0 || m.k == 0 || m.sdm_layers == 0 || m.head_dim() == 0 || m.hidden() == 0 {
            return bad(format!("r, k, sdm_layers, head_dim and mlp_hidden must be positive: {m:?}"));
        }
        if m.image_mlp_layers == 0 {
            return bad("image_mlp_layers must be at least 1".into());
        }
        if m.encoder_heads == 0 || m.r % m.encoder_heads != 0 {
            return bad(format!("r = {} must be divisible by encoder_heads = {}", m.r, m.encoder_heads));
        }
        if !(m.layer_norm_eps > 0.0) {
            return bad("layer_norm_eps must be positive".into());
        }
        if !(a.tau > 0.0) || !(a.eps > 0.0) {
            return bad(format!("tau and eps must be positive (tau = {}, eps = {})", a.tau, a.eps));
        }
        for (name, v) in [
            ("lambda_local", a.lambda_local),
            ("lambda_var", a.lambda_var),
            ("lambda_div", a.lambda_div),
            ("gamma", a.gamma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if a.p == 0 || a.p > m.k {
            return bad(format!("p = {} must lie in 1..={}", a.p, m.k));
        }
        if t.batch_size == 0 || t.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if t.warmup_epochs > t.epochs {
            return bad("warmup_epochs exceeds epochs".into());
        }
        if !(t.base_lr > 0.0) {
            return bad("base_lr must be positive".into());
        }
        if !(0.0..1.0).contains(&t.dropout) {
            return bad(format!("dropout {} outside [0, 1)", t.dropout));
        }
        if let Some(g) = self.eval.gamma_cs {
            if !(g >= 0.0) {
                return bad(format!("gamma_cs must be non-negative, got {g}"));
            }
        }
        Ok(())
    }
}

/// One axis of a hyperparameter sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    LambdaLocal(Vec<f64>),
    LambdaVar(Vec<f64>),
    LambdaDiv(Vec<f64>),
    K(Vec<usize>),
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::LambdaLocal(_) => "lambda_local",
            SweepAxis::LambdaVar(_) => "lambda_var",
            SweepAxis::LambdaDiv(_) => "lambda_div",
            SweepAxis::K(_) => "k",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SweepAxis::LambdaLocal(v) | SweepAxis::LambdaVar(v) | SweepAxis::LambdaDiv(v) => v.len(),
            SweepAxis::K(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Applies the `i`-th value to `cfg` and returns it as a number.
    pub fn apply(&self, i: usize, cfg: &mut ExperimentConfig) -> f64 {
        match self {
            SweepAxis::LambdaLocal(v) => {
                cfg.alignment.lambda_local = v[i];
                v[i]
            }
            SweepAxis::LambdaVar(v) => {
                cfg.alignment.lambda_var = v[i];
                v[i]
            }
            SweepAxis::LambdaDiv(v) => {
                cfg.alignment.lambda_div = v[i];
                v[i]
            }
            SweepAxis::K(v) => {
                cfg.model.k = v[i];
                cfg.alignment.p = cfg.alignment.p.min(v[i]).max(1);
                v[i] as f64
            }
        }
    }

    /// The ranges searched for the published settings.
    pub fn published_ranges() -> Vec<SweepAxis> {
        vec![
            SweepAxis::LambdaLocal(vec![0.0, 0.01, 0.1, 0.25, 0.5, 0.75, 1.0]),
            SweepAxis::LambdaVar(vec![0.0, 0.01, 0.1, 0.5, 1.0, 3.0, 5.0]),
            SweepAxis::LambdaDiv(vec![0.0, 0.01, 0.1, 0.5, 1.0, 3.0, 5.0]),
            SweepAxis::K(vec![1, 2, 3, 4, 5, 6, 7, 8]),
        ]
    }
}
