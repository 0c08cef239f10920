use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use emdepart_core::alignment::{cosine_matrix, set_score, top_cos_from_sim};
use emdepart_core::config::{ExperimentConfig, SimilarityVariant, SweepAxis};
use emdepart_core::data::synthetic::{gen_synthetic, SyntheticConfig};
use emdepart_core::data::{ClassId, Partition};
use emdepart_core::inference::{
    class_sets, evaluate_table, per_class_accuracy, predict_zsl, resolve_gamma_cs, score_partition, EvalReport,
    Scoring,
};
use emdepart_core::model::{gradient_suite, EmDepart, Embedded};
use emdepart_core::numerics::ops::softmax;
use emdepart_core::numerics::GradCheckConfig;
use emdepart_core::sdm::{circular_variance, redundancy_matrix};
use emdepart_core::trainer::{grid_search, TrainData, Trainer};
use emdepart_core::Tensor;
use serde::Serialize;
use serde_json::json;

use crate::checkpoint::{self, Dtype};
use crate::config_file::{ConfigFile, DataSection};
use crate::dataset::{load_dataset, write_synthetic, Dataset};
use crate::error::{CliError, Result};

/// Multi-view decomposition and partial alignment for document-based
/// zero-shot learning.
///
/// Exit codes: 0 success, 1 usage or configuration error, 2 data error,
/// 3 numeric failure.
#[derive(Debug, Parser)]
#[command(name = "emdepart", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with planted multi-view structure.
    GenSynth(GenSynthArgs),
    /// Print the full configuration of a preset as JSON.
    ///
    /// Any subset of it is a valid `--config` file; missing keys fall back
    /// to the preset named by its "preset" key (desk by default).
    ShowConfig {
        #[arg(long, default_value = "desk")]
        preset: String,
    },
    /// Train a model and write a checkpoint and a metrics CSV.
    Train(TrainArgs),
    /// Evaluate a checkpoint; prints the report as JSON.
    Eval(EvalArgs),
    /// Dump circular variances, redundancy matrices, attention maps and
    /// view embeddings.
    Diagnose(DiagnoseArgs),
    /// Dump cosine matrices, top-p masks and partial scores per
    /// (image, class) pair as JSON.
    Score(ScoreArgs),
    /// Finite-difference check of every loss term on a small random model.
    GradCheck(GradCheckArgs),
    /// Per-axis hyperparameter search on the validation partition.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = SyntheticConfig::default().c_seen)]
    pub classes_seen: usize,
    #[arg(long, default_value_t = SyntheticConfig::default().c_unseen)]
    pub classes_unseen: usize,
    /// Latent views (at least 2).
    #[arg(long, default_value_t = SyntheticConfig::default().views)]
    pub views: usize,
    #[arg(long, default_value_t = SyntheticConfig::default().views_per_class)]
    pub views_per_class: usize,
    /// Patches per image.
    #[arg(long, default_value_t = SyntheticConfig::default().n)]
    pub n: usize,
    /// Tokens per document.
    #[arg(long, default_value_t = SyntheticConfig::default().m)]
    pub m: usize,
    #[arg(long, default_value_t = SyntheticConfig::default().r0)]
    pub r0: usize,
    #[arg(long, default_value_t = SyntheticConfig::default().word_dim)]
    pub word_dim: usize,
    #[arg(long, default_value_t = SyntheticConfig::default().images_per_class)]
    pub images_per_class: usize,
    #[arg(long, default_value_t = SyntheticConfig::default().noise_sigma)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = SyntheticConfig::default().seed)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    /// No global feature in the view embeddings.
    NoGlobal,
    /// No skip connection around the image perceiver MLP.
    NoResidual,
    /// Score with the full set similarity at inference.
    NoPartialScore,
    /// Mean of pairwise cosines instead of smooth chamfer.
    Average,
    /// Bidirectional maximum instead of smooth chamfer.
    Maximum,
}

impl Ablation {
    fn apply(self, cfg: &mut ExperimentConfig) {
        match self {
            Ablation::NoGlobal => cfg.model.no_global = true,
            Ablation::NoResidual => cfg.model.no_residual = true,
            Ablation::NoPartialScore => cfg.eval.no_partial_score = true,
            Ablation::Average => cfg.alignment.similarity_variant = SimilarityVariant::Average,
            Ablation::Maximum => cfg.alignment.similarity_variant = SimilarityVariant::Maximum,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON configuration (see `show-config`); defaults to the desk preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics CSV; defaults to the checkpoint path with a `.csv` extension.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub ablate: Vec<Ablation>,
    /// Continue from a checkpoint; its configuration is used.
    #[arg(long, conflicts_with_all = ["config", "ablate"])]
    pub resume: Option<PathBuf>,
    /// Store the checkpoint as 32-bit floats (resuming is then not bit-exact).
    #[arg(long)]
    pub f32: bool,
    /// Save a checkpoint after every epoch instead of only at the end.
    #[arg(long)]
    pub save_every_epoch: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Zsl,
    Gzsl,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Gzsl)]
    pub split: Split,
    /// Partial-score width (1..=k); defaults to the checkpoint's.
    #[arg(long)]
    pub p: Option<usize>,
    /// Calibrated-stacking penalty; defaults to the configured value, or
    /// the best value on the validation partition.
    #[arg(long)]
    pub gamma_cs: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Image indices; defaults to every test image.
    #[arg(long, value_delimiter = ',')]
    pub images: Vec<usize>,
    /// Class ids; defaults to every class.
    #[arg(long, value_delimiter = ',')]
    pub classes: Vec<u32>,
    #[arg(long)]
    pub p: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = GradCheckConfig::default().tol)]
    pub tol: f64,
    #[arg(long, default_value_t = GradCheckConfig::default().h)]
    pub h: f64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Result table CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// An axis as `name=v1,v2,...` with name one of lambda_local,
    /// lambda_var, lambda_div, k; repeatable. Defaults to the published
    /// ranges of all four.
    #[arg(long)]
    pub axis: Vec<String>,
}

pub fn parse_axis(s: &str) -> Result<SweepAxis> {
    let (name, values) = s
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("axis {s:?} must look like name=v1,v2")))?;
    let floats = || -> Result<Vec<f64>> {
        values
            .split(',')
            .map(|v| v.trim().parse().map_err(|e| CliError::Usage(format!("axis {name}: {v:?}: {e}"))))
            .collect()
    };
    Ok(match name {
        "lambda_local" => SweepAxis::LambdaLocal(floats()?),
        "lambda_var" => SweepAxis::LambdaVar(floats()?),
        "lambda_div" => SweepAxis::LambdaDiv(floats()?),
        "k" => SweepAxis::K(
            values
                .split(',')
                .map(|v| v.trim().parse().map_err(|e| CliError::Usage(format!("axis k: {v:?}: {e}"))))
                .collect::<Result<_>>()?,
        ),
        other => return Err(CliError::Usage(format!("unknown sweep axis {other:?}"))),
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("serializable") + "\n"))
}

fn print_json(out: &mut dyn Write, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    writeln!(out, "{text}").map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

/// Runs a parsed command, writing reports to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::ShowConfig { preset } => print_json(out, &ConfigFile::from_preset(&preset)?),
        Command::Train(a) => train(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Diagnose(a) => diagnose(a),
        Command::Score(a) => score(a, out),
        Command::GradCheck(a) => grad_check(a, out),
        Command::Sweep(a) => sweep(a, out),
    }
}

fn gen_synth(a: GenSynthArgs) -> Result<()> {
    if a.views < 2 {
        return Err(CliError::Usage(format!("--views must be at least 2, got {}", a.views)));
    }
    let cfg = SyntheticConfig {
        c_seen: a.classes_seen,
        c_unseen: a.classes_unseen,
        views: a.views,
        views_per_class: a.views_per_class,
        n: a.n,
        m: a.m,
        r0: a.r0,
        word_dim: a.word_dim,
        images_per_class: a.images_per_class,
        noise_sigma: a.noise_sigma,
        seed: a.seed,
        ..SyntheticConfig::default()
    };
    let ds = gen_synthetic(&cfg)?;
    write_synthetic(&a.out, &ds)
}

fn partition(ds: &Dataset, cfg: &ExperimentConfig) -> Result<Partition> {
    if cfg.train.use_validation {
        Ok(ds.splits.validation_partition(&ds.bank)?)
    } else {
        Ok(ds.splits.test_partition(&ds.bank))
    }
}

fn train(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let (mut trainer, ds) = match &a.resume {
        Some(path) => {
            let ckpt = checkpoint::load(path)?;
            let ds = load_dataset(&a.data, DataSection::default().oov_policy)?;
            check_dims(&ds, ckpt.r0, ckpt.word_dim)?;
            (Trainer::from_checkpoint(&ckpt)?, ds)
        }
        None => {
            let file = match &a.config {
                Some(p) => ConfigFile::load(p)?,
                None => ConfigFile::from_preset("desk")?,
            };
            let mut cfg = file.experiment();
            for ab in &a.ablate {
                ab.apply(&mut cfg);
            }
            let ds = load_dataset(&a.data, file.data.oov_policy)?;
            (Trainer::new(&cfg, ds.bank.r0(), ds.docs.word_dim())?, ds)
        }
    };
    let part = partition(&ds, &trainer.config)?;
    let data = TrainData {
        bank: &ds.bank,
        docs: &ds.docs,
        part: &part,
    };
    let dtype = if a.f32 { Dtype::F32 } else { Dtype::F64 };
    let metrics = a.metrics.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    while !trainer.is_done() {
        let m = trainer.run_epoch(data)?;
        writeln!(out, "{}", m.csv_row()).map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
        if a.save_every_epoch {
            checkpoint::save(&a.out, &trainer.checkpoint(), dtype)?;
            write_text(&metrics, &trainer.metrics_csv())?;
        }
    }
    checkpoint::save(&a.out, &trainer.checkpoint(), dtype)?;
    write_text(&metrics, &trainer.metrics_csv())
}

fn check_dims(ds: &Dataset, r0: usize, word_dim: usize) -> Result<()> {
    if ds.bank.r0() != r0 || ds.docs.word_dim() != word_dim {
        return Err(CliError::Usage(format!(
            "checkpoint expects r0 = {r0} and word_dim = {word_dim}, data has {} and {}",
            ds.bank.r0(),
            ds.docs.word_dim()
        )));
    }
    Ok(())
}

struct Loaded {
    cfg: ExperimentConfig,
    model: EmDepart,
    ds: Dataset,
}

fn load_model(ckpt: &Path, data: &Path) -> Result<Loaded> {
    let c = checkpoint::load(ckpt)?;
    let model = c.model()?;
    let ds = load_dataset(data, DataSection::default().oov_policy)?;
    check_dims(&ds, c.r0, c.word_dim)?;
    Ok(Loaded { cfg: c.config, model, ds })
}

fn check_p(p: Option<usize>, k: usize) -> Result<()> {
    match p {
        Some(p) if p == 0 || p > k => Err(CliError::Usage(format!("--p must be in 1..={k}, got {p}"))),
        _ => Ok(()),
    }
}

fn scoring_with(cfg: &ExperimentConfig, p: Option<usize>) -> Scoring {
    let mut s = cfg.scoring();
    if p.is_some() {
        s.p = p;
    }
    s
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let Loaded { mut cfg, model, ds } = load_model(&a.ckpt, &a.data)?;
    check_p(a.p, cfg.model.k)?;
    if let Some(g) = a.gamma_cs {
        if !(g >= 0.0) {
            return Err(CliError::Usage(format!("--gamma-cs must be non-negative, got {g}")));
        }
        cfg.eval.gamma_cs = Some(g);
    }
    let scoring = scoring_with(&cfg, a.p);
    let part = ds.splits.test_partition(&ds.bank);
    let table = score_partition(&model, &ds.bank, &ds.docs, &part, scoring)?;
    let (seen, unseen) = class_sets(&part);
    match a.split {
        Split::Zsl => {
            let ut = table.select(&part.eval_unseen_images)?;
            let preds: Vec<ClassId> = (0..ut.images.len())
                .map(|i| predict_zsl(&ut.row(i), &unseen))
                .collect::<emdepart_core::Result<_>>()?;
            let per_class = per_class_accuracy(&preds, &ut.labels, &unseen)?;
            let t1 = per_class.values().sum::<f64>() / per_class.len() as f64;
            let mut confusion: BTreeMap<ClassId, BTreeMap<ClassId, usize>> = BTreeMap::new();
            for (y, p) in ut.labels.iter().zip(&preds) {
                *confusion.entry(*y).or_default().entry(*p).or_default() += 1;
            }
            print_json(
                out,
                &json!({
                    "T1": t1, "U": null, "S": null, "H": null,
                    "per_class": per_class, "gamma_cs": null, "p": scoring.p, "confusion": confusion,
                }),
            )
        }
        Split::Gzsl => {
            let val = if ds.splits.val_seen.is_empty() {
                None
            } else {
                Some(ds.splits.validation_partition(&ds.bank)?)
            };
            let gamma = resolve_gamma_cs(&model, &ds.bank, &ds.docs, val.as_ref(), scoring, &cfg.eval)?;
            let report: EvalReport = evaluate_table(
                &table,
                &seen,
                &unseen,
                &part.eval_unseen_images,
                &part.eval_seen_images,
                gamma,
                scoring.p,
            )?;
            print_json(out, &report)
        }
    }
}

fn attention(e: &Embedded) -> Result<Vec<Vec<Vec<f64>>>> {
    (0..e.trace.blocks())
        .map(|t| {
            let w = softmax(&e.trace.block(t), 1)?;
            Ok((0..w.rows()).map(|i| w.row(i).to_vec()).collect())
        })
        .collect()
}

fn matrix(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn diagnose(a: DiagnoseArgs) -> Result<()> {
    let Loaded { model, ds, .. } = load_model(&a.ckpt, &a.data)?;
    fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    let part = ds.splits.test_partition(&ds.bank);
    let classes: Vec<ClassId> = ds.splits.all_classes().into_iter().collect();
    let images: Vec<usize> = part.eval_unseen_images.iter().chain(&part.eval_seen_images).copied().collect();

    let mut svar = (BTreeMap::new(), BTreeMap::new());
    let mut redundancy = (BTreeMap::new(), BTreeMap::new());
    let mut attn = (BTreeMap::new(), BTreeMap::new());
    let mut tsv = String::new();
    let mut meta = String::from("kind\tid\tclass\tview\n");
    let mut dump = |kind: &str, id: String, class: ClassId, e: &Embedded, tsv: &mut String| {
        for v in 0..e.views.b.rows() {
            let row: Vec<String> = e.views.b.row(v).iter().map(|x| format!("{x:?}")).collect();
            tsv.push_str(&row.join("\t"));
            tsv.push('\n');
            meta.push_str(&format!("{kind}\t{id}\t{class}\t{v}\n"));
        }
    };
    for &c in &classes {
        let e = model.embed_document(&ds.docs.get(c)?.embedding)?;
        svar.1.insert(c.to_string(), circular_variance(&e.views.b)?);
        redundancy.1.insert(c.to_string(), matrix(&redundancy_matrix(&e.views.e_last)?));
        attn.1.insert(c.to_string(), attention(&e)?);
        dump("class", c.to_string(), c, &e, &mut tsv);
    }
    for &i in &images {
        let e = model.embed_image(&ds.bank.image(i))?;
        svar.0.insert(i.to_string(), circular_variance(&e.views.b)?);
        redundancy.0.insert(i.to_string(), matrix(&redundancy_matrix(&e.views.e_last)?));
        attn.0.insert(i.to_string(), attention(&e)?);
        dump("image", i.to_string(), ds.bank.label(i), &e, &mut tsv);
    }
    let mean = |m: &BTreeMap<String, f64>| m.values().sum::<f64>() / m.len().max(1) as f64;
    write_json(
        &a.out.join("svar.json"),
        &json!({
            "S_var_V": mean(&svar.0), "S_var_T": mean(&svar.1),
            "images": svar.0, "classes": svar.1,
        }),
    )?;
    write_json(&a.out.join("redundancy.json"), &json!({"images": redundancy.0, "classes": redundancy.1}))?;
    let mut attention_json = json!({"images": attn.0, "classes": attn.1});
    if let Some(views) = &ds.views {
        let realized: BTreeMap<String, &Vec<usize>> = images.iter().map(|&i| (i.to_string(), &views[i])).collect();
        attention_json["realized_views"] = json!(realized);
    }
    write_json(&a.out.join("attention.json"), &attention_json)?;
    write_text(&a.out.join("embeddings.tsv"), &tsv)?;
    write_text(&a.out.join("embeddings_meta.tsv"), &meta)
}

fn score(a: ScoreArgs, out: &mut dyn Write) -> Result<()> {
    let Loaded { cfg, model, ds } = load_model(&a.ckpt, &a.data)?;
    let k = cfg.model.k;
    check_p(a.p, k)?;
    let p = a.p.unwrap_or(cfg.alignment.p);
    let images = if a.images.is_empty() {
        ds.splits.test_images.iter().chain(&ds.splits.test_seen_images).copied().collect()
    } else {
        a.images.clone()
    };
    if let Some(&i) = images.iter().find(|&&i| i >= ds.bank.num_images()) {
        return Err(CliError::Usage(format!("image {i} out of range ({} images)", ds.bank.num_images())));
    }
    let all = ds.splits.all_classes();
    let classes: Vec<ClassId> = if a.classes.is_empty() {
        all.iter().copied().collect()
    } else {
        a.classes.iter().map(|&c| ClassId(c)).collect()
    };
    if let Some(c) = classes.iter().find(|c| !all.contains(c)) {
        return Err(CliError::Usage(format!("unknown class {c}")));
    }
    let class_emb: Vec<Embedded> = classes
        .iter()
        .map(|&c| model.embed_document(&ds.docs.get(c)?.embedding))
        .collect::<emdepart_core::Result<_>>()?;
    let mut pairs = Vec::new();
    for &i in &images {
        let e = model.embed_image(&ds.bank.image(i))?;
        for (&c, t) in classes.iter().zip(&class_emb) {
            let sim = cosine_matrix(&e.views.b, &t.views.b)?;
            let mask = top_cos_from_sim(&sim, p)?;
            let as_rows = |m: &[bool]| -> Vec<Vec<bool>> { m.chunks(mask.k_t).map(<[bool]>::to_vec).collect() };
            pairs.push(json!({
                "image": i,
                "label": ds.bank.label(i),
                "class": c,
                "cosine": matrix(&sim),
                "mask_visual": as_rows(&mask.visual),
                "mask_textual": as_rows(&mask.textual),
                "S_p": set_score(&sim, cfg.alignment.similarity_variant, p)?.0,
            }));
        }
    }
    print_json(out, &json!({"k": k, "p": p, "pairs": pairs}))
}

fn grad_check(a: GradCheckArgs, out: &mut dyn Write) -> Result<()> {
    if !(a.tol >= 0.0) || !(a.h > 0.0) {
        return Err(CliError::Usage("--tol must be >= 0 and --h > 0".into()));
    }
    let cfg = GradCheckConfig {
        h: a.h,
        tol: a.tol,
        seed: a.seed,
        ..GradCheckConfig::default()
    };
    let suite = gradient_suite(a.seed, &cfg)?;
    let mut rows = Vec::new();
    let mut failed = Vec::new();
    for (term, rep) in &suite {
        let worst = rep.worst.as_ref().map(|w| {
            json!({"name": w.name, "index": w.index, "analytic": w.analytic, "numeric": w.numeric, "rel_err": w.rel_err})
        });
        rows.push(json!({
            "term": term.name(),
            "checked": rep.checked,
            "failures": rep.failures.len(),
            "passed": rep.passed(),
            "worst": worst,
        }));
        if !rep.passed() {
            failed.push(term.name());
        }
    }
    print_json(out, &json!({"tol": a.tol, "h": a.h, "seed": a.seed, "passed": failed.is_empty(), "terms": rows}))?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradCheck(failed.join(", ")))
    }
}

fn sweep(a: SweepArgs, out: &mut dyn Write) -> Result<()> {
    let file = match &a.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::from_preset("desk")?,
    };
    let axes = if a.axis.is_empty() {
        SweepAxis::published_ranges()
    } else {
        a.axis.iter().map(|s| parse_axis(s)).collect::<Result<_>>()?
    };
    let ds = load_dataset(&a.data, file.data.oov_policy)?;
    let result = grid_search(&file.experiment(), &axes, &ds.bank, &ds.docs, &ds.splits)?;
    write_text(&a.out, &result.csv())?;
    print_json(out, &ConfigFile::new(file.data.clone(), result.best))
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with(args: impl IntoIterator<Item = String>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    0
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    1
                }
            };
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
