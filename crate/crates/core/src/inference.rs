//! Zero-shot and generalized zero-shot prediction, calibrated stacking and
//! accuracy metrics.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::config::{EvalConfig, SimilarityVariant};
use crate::data::{ClassId, DocumentBank, FeatureBank, Partition};
use crate::model::{pair_score, EmDepart, Embedded};
use crate::{Error, Result};

/// Class with the highest score; ties go to the lowest class id.
pub fn argmax_class(scores: &[(ClassId, f64)]) -> Result<ClassId> {
    let mut best: Option<(ClassId, f64)> = None;
    for &(c, s) in scores {
        best = match best {
            Some((bc, bs)) if bs > s || (bs == s && bc < c) => Some((bc, bs)),
            _ => Some((c, s)),
        };
    }
    best.map(|(c, _)| c).ok_or_else(|| Error::Empty("no candidate classes".into()))
}

/// Best class among `unseen`.
pub fn predict_zsl(scores: &[(ClassId, f64)], unseen: &BTreeSet<ClassId>) -> Result<ClassId> {
    let cands: Vec<_> = scores.iter().copied().filter(|(c, _)| unseen.contains(c)).collect();
    argmax_class(&cands)
}

/// Best class over all candidates after subtracting `gamma_cs` from every
/// seen-class score.
pub fn predict_gzsl(scores: &[(ClassId, f64)], seen: &BTreeSet<ClassId>, gamma_cs: f64) -> Result<ClassId> {
    if !(gamma_cs >= 0.0) {
        return Err(Error::Config(format!("gamma_cs must be non-negative, got {gamma_cs}")));
    }
    let cands: Vec<_> = scores
        .iter()
        .map(|&(c, s)| (c, if seen.contains(&c) { s - gamma_cs } else { s }))
        .collect();
    argmax_class(&cands)
}

/// Per-class accuracy in percent for every class in `classes`.
pub fn per_class_accuracy(
    predictions: &[ClassId],
    labels: &[ClassId],
    classes: &BTreeSet<ClassId>,
) -> Result<BTreeMap<ClassId, f64>> {
    let mut tally: BTreeMap<ClassId, (usize, usize)> = classes.iter().map(|&c| (c, (0, 0))).collect();
    for (p, y) in predictions.iter().zip(labels) {
        if let Some(t) = tally.get_mut(y) {
            t.1 += 1;
            if p == y {
                t.0 += 1;
            }
        }
    }
    tally
        .into_iter()
        .map(|(c, (ok, total))| {
            if total == 0 {
                Err(Error::Data(format!("class {c} has no test images")))
            } else {
                Ok((c, 100.0 * ok as f64 / total as f64))
            }
        })
        .collect()
}

/// Mean over `classes` of per-class top-1 accuracy, in percent.
pub fn per_class_top1(predictions: &[ClassId], labels: &[ClassId], classes: &BTreeSet<ClassId>) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::shape("per_class_top1", &[predictions.len()], &[labels.len()]));
    }
    let acc = per_class_accuracy(predictions, labels, classes)?;
    if acc.is_empty() {
        return Err(Error::Empty("no classes to score".into()));
    }
    Ok(acc.values().sum::<f64>() / acc.len() as f64)
}

/// `2US / (U + S)`, zero when both are zero.
pub fn harmonic_mean(u: f64, s: f64) -> f64 {
    if u + s == 0.0 {
        0.0
    } else {
        2.0 * u * s / (u + s)
    }
}

/// Scores of a set of images against a set of candidate classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    pub classes: Vec<ClassId>,
    pub images: Vec<usize>,
    pub labels: Vec<ClassId>,
    /// `scores[i][c]` for image `images[i]` and class `classes[c]`.
    pub scores: Vec<Vec<f64>>,
}

impl ScoreTable {
    pub fn row(&self, i: usize) -> Vec<(ClassId, f64)> {
        self.classes.iter().copied().zip(self.scores[i].iter().copied()).collect()
    }

    /// `max − min` over every entry.
    pub fn range(&self) -> f64 {
        let all = self.scores.iter().flatten();
        let hi = all.clone().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lo = all.fold(f64::INFINITY, |a, &b| a.min(b));
        hi - lo
    }

    /// Rows of the listed images, in that order.
    pub fn select(&self, images: &[usize]) -> Result<ScoreTable> {
        let pos: BTreeMap<usize, usize> = self.images.iter().enumerate().map(|(p, &i)| (i, p)).collect();
        let mut out = ScoreTable {
            classes: self.classes.clone(),
            images: Vec::with_capacity(images.len()),
            labels: Vec::with_capacity(images.len()),
            scores: Vec::with_capacity(images.len()),
        };
        for &i in images {
            let &p = pos.get(&i).ok_or_else(|| Error::Data(format!("image {i} was not scored")))?;
            out.images.push(i);
            out.labels.push(self.labels[p]);
            out.scores.push(self.scores[p].clone());
        }
        Ok(out)
    }
}

/// How scores are computed from view embeddings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scoring {
    pub variant: SimilarityVariant,
    /// Partial-score width, `None` for the full-set similarity.
    pub p: Option<usize>,
}

/// Embeds the listed images and classes and scores every pair.
pub fn score_images(
    model: &EmDepart,
    bank: &FeatureBank,
    images: &[usize],
    docs: &DocumentBank,
    classes: &[ClassId],
    scoring: Scoring,
) -> Result<ScoreTable> {
    let class_emb = embed_classes(model, docs, classes)?;
    let mut scores = Vec::with_capacity(images.len());
    for &i in images {
        let e = model.embed_image(&bank.image(i))?;
        scores.push(score_row(&e, &class_emb, scoring)?);
    }
    Ok(ScoreTable {
        classes: classes.to_vec(),
        images: images.to_vec(),
        labels: images.iter().map(|&i| bank.label(i)).collect(),
        scores,
    })
}

pub fn embed_classes(model: &EmDepart, docs: &DocumentBank, classes: &[ClassId]) -> Result<Vec<Embedded>> {
    classes
        .iter()
        .map(|&c| model.embed_document(&docs.get(c)?.embedding))
        .collect()
}

pub fn score_row(image: &Embedded, classes: &[Embedded], scoring: Scoring) -> Result<Vec<f64>> {
    classes
        .iter()
        .map(|t| pair_score(&image.views.b, &t.views.b, scoring.variant, scoring.p))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Zero-shot mean per-class top-1 on unseen classes.
    #[serde(rename = "T1")]
    pub t1: f64,
    /// Generalized accuracy on unseen classes.
    #[serde(rename = "U")]
    pub u: f64,
    /// Generalized accuracy on seen classes.
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "H")]
    pub h: f64,
    /// Zero-shot accuracy per unseen class followed by generalized accuracy
    /// per seen class.
    pub per_class: BTreeMap<ClassId, f64>,
    pub gamma_cs: f64,
    pub p: Option<usize>,
    /// `confusion[true][predicted]` counts of the generalized task.
    pub confusion: BTreeMap<ClassId, BTreeMap<ClassId, usize>>,
}

/// Metrics from a score table whose classes cover seen and unseen
/// candidates. `unseen_images` and `seen_images` must be rows of `table`.
pub fn evaluate_table(
    table: &ScoreTable,
    seen: &BTreeSet<ClassId>,
    unseen: &BTreeSet<ClassId>,
    unseen_images: &[usize],
    seen_images: &[usize],
    gamma_cs: f64,
    p: Option<usize>,
) -> Result<EvalReport> {
    let ut = table.select(unseen_images)?;
    let st = table.select(seen_images)?;
    let zsl: Vec<ClassId> = (0..ut.images.len()).map(|i| predict_zsl(&ut.row(i), unseen)).collect::<Result<_>>()?;
    let zsl_acc = per_class_accuracy(&zsl, &ut.labels, unseen)?;
    let t1 = mean(&zsl_acc);

    let mut confusion: BTreeMap<ClassId, BTreeMap<ClassId, usize>> = BTreeMap::new();
    let mut gzsl = |t: &ScoreTable| -> Result<Vec<ClassId>> {
        let mut out = Vec::with_capacity(t.images.len());
        for i in 0..t.images.len() {
            let pred = predict_gzsl(&t.row(i), seen, gamma_cs)?;
            *confusion.entry(t.labels[i]).or_default().entry(pred).or_default() += 1;
            out.push(pred);
        }
        Ok(out)
    };
    let gu = gzsl(&ut)?;
    let gs = gzsl(&st)?;
    let u = per_class_top1(&gu, &ut.labels, unseen)?;
    let seen_acc = per_class_accuracy(&gs, &st.labels, seen)?;
    let s = mean(&seen_acc);
    let mut per_class = zsl_acc;
    per_class.extend(seen_acc);
    Ok(EvalReport {
        t1,
        u,
        s,
        h: harmonic_mean(u, s),
        per_class,
        gamma_cs,
        p,
        confusion,
    })
}

fn mean(acc: &BTreeMap<ClassId, f64>) -> f64 {
    acc.values().sum::<f64>() / acc.len() as f64
}

/// The first penalty in `grid` attaining the highest harmonic mean.
pub fn select_gamma_cs(
    table: &ScoreTable,
    seen: &BTreeSet<ClassId>,
    unseen: &BTreeSet<ClassId>,
    unseen_images: &[usize],
    seen_images: &[usize],
    grid: &[f64],
) -> Result<f64> {
    let mut best: Option<(f64, f64)> = None;
    for &g in grid {
        let h = evaluate_table(table, seen, unseen, unseen_images, seen_images, g, None)?.h;
        if best.is_none_or(|(_, bh)| h > bh) {
            best = Some((g, h));
        }
    }
    best.map(|(g, _)| g).ok_or_else(|| Error::Empty("empty gamma_cs grid".into()))
}

/// Scores the evaluation images of `part` against all of its classes and
/// reports metrics at a fixed calibrated-stacking penalty.
pub fn evaluate_model(
    model: &EmDepart,
    bank: &FeatureBank,
    docs: &DocumentBank,
    part: &Partition,
    scoring: Scoring,
    gamma_cs: f64,
) -> Result<EvalReport> {
    let table = score_partition(model, bank, docs, part, scoring)?;
    let (seen, unseen) = class_sets(part);
    evaluate_table(&table, &seen, &unseen, &part.eval_unseen_images, &part.eval_seen_images, gamma_cs, scoring.p)
}

/// Score table over the evaluation images and all classes of `part`.
pub fn score_partition(
    model: &EmDepart,
    bank: &FeatureBank,
    docs: &DocumentBank,
    part: &Partition,
    scoring: Scoring,
) -> Result<ScoreTable> {
    let images: Vec<usize> = part.eval_unseen_images.iter().chain(&part.eval_seen_images).copied().collect();
    score_images(model, bank, &images, docs, &part.all_classes(), scoring)
}

pub fn class_sets(part: &Partition) -> (BTreeSet<ClassId>, BTreeSet<ClassId>) {
    (
        part.train_classes.iter().copied().collect(),
        part.eval_unseen_classes.iter().copied().collect(),
    )
}

/// Resolves the penalty: a fixed value, or the best value on `val` over
/// the grid.
pub fn resolve_gamma_cs(
    model: &EmDepart,
    bank: &FeatureBank,
    docs: &DocumentBank,
    val: Option<&Partition>,
    scoring: Scoring,
    eval: &EvalConfig,
) -> Result<f64> {
    if let Some(g) = eval.gamma_cs {
        return Ok(g);
    }
    let val = val.ok_or_else(|| Error::Config("gamma_cs unset and no validation partition to select it".into()))?;
    let table = score_partition(model, bank, docs, val, scoring)?;
    let (seen, unseen) = class_sets(val);
    select_gamma_cs(&table, &seen, &unseen, &val.eval_unseen_images, &val.eval_seen_images, &eval.gamma_grid)
}

impl crate::config::ExperimentConfig {
    pub fn scoring(&self) -> Scoring {
        Scoring {
            variant: self.alignment.similarity_variant,
            p: if self.eval.no_partial_score { None } else { Some(self.alignment.p) },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn c(i: u32) -> ClassId {
        ClassId(i)
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(argmax_class(&[(c(7), -3.0)]).unwrap(), c(7));
        assert_eq!(argmax_class(&[(c(1), 0.5), (c(0), 0.85)]).unwrap(), c(0));
        assert_eq!(argmax_class(&[(c(4), 0.5), (c(2), 0.5)]).unwrap(), c(2));
        assert!(argmax_class(&[]).is_err());
    }

    #[test]
    fn calibrated_stacking_example() {
        let seen: BTreeSet<_> = [c(0)].into();
        let scores = [(c(0), 0.9), (c(1), 0.85)];
        assert_eq!(predict_gzsl(&scores, &seen, 0.0).unwrap(), c(0));
        assert_eq!(predict_gzsl(&scores, &seen, 0.1).unwrap(), c(1));
    }

    #[test]
    fn per_class_mean_not_micro() {
        let classes: BTreeSet<_> = [c(0), c(1)].into();
        let labels = vec![c(0), c(0), c(0), c(1)];
        let preds = vec![c(0), c(0), c(0), c(0)];
        assert_eq!(per_class_top1(&preds, &labels, &classes).unwrap(), 50.0);
        let missing: BTreeSet<_> = [c(0), c(5)].into();
        assert!(per_class_top1(&preds, &labels, &missing).is_err());
    }

    #[test]
    fn harmonic_examples() {
        assert!((harmonic_mean(76.0, 87.8) - 81.5).abs() <= 0.05);
        assert_eq!(harmonic_mean(0.0, 80.0), 0.0);
        assert_eq!(harmonic_mean(50.0, 50.0), 50.0);
    }
}
