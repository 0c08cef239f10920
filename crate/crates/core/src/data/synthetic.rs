//! Desk-scale datasets with planted multi-view structure.
//!
//! There are `views` latent view prototypes. Every class owns a distinct
//! subset of `views_per_class` of them; unseen classes are subsets that no
//! seen class uses. A class document lists a few words for each of its views
//! plus shared filler words. An image shows only a random subset of its
//! class's views: each realized view occupies one or more patches
//! (prototype plus Gaussian noise), the other patches show a shared
//! background, and the global token is the patch mean plus noise.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ClassId, DocumentBank, EmbeddingTable, FeatureBank, SplitSpec};
use crate::numerics::Tensor;
use crate::{Error, Result, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub c_seen: usize,
    pub c_unseen: usize,
    /// Latent view prototypes shared by all classes.
    pub views: usize,
    pub views_per_class: usize,
    /// Patches per image.
    pub n: usize,
    /// Tokens per document.
    pub m: usize,
    /// Raw image feature dimension.
    pub r0: usize,
    pub word_dim: usize,
    pub words_per_view: usize,
    pub filler_words: usize,
    pub images_per_class: usize,
    /// Images per seen class reserved for the generalized test.
    pub seen_test_per_class: usize,
    /// Seen classes marked as the validation partition.
    pub val_classes: usize,
    /// Noise standard deviation relative to unit-variance prototype entries.
    pub noise_sigma: f64,
    /// Probability that an image shows each of its class's views.
    pub realize_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            c_seen: 20,
            c_unseen: 5,
            views: 8,
            views_per_class: 3,
            n: 8,
            m: 16,
            r0: 32,
            word_dim: EmbeddingTable::GLOVE_DIM,
            words_per_view: 2,
            filler_words: 24,
            images_per_class: 20,
            seen_test_per_class: 3,
            val_classes: 4,
            noise_sigma: 0.3,
            realize_prob: 0.7,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub bank: FeatureBank,
    pub tokens: BTreeMap<ClassId, Vec<String>>,
    pub docs: DocumentBank,
    pub splits: SplitSpec,
    pub table: EmbeddingTable,
    /// View ids shown by each image.
    pub realized_views: Vec<Vec<usize>>,
    /// View ids owned by each class.
    pub class_views: BTreeMap<ClassId, Vec<usize>>,
    /// `[views, r0]` clean image prototypes.
    pub view_prototypes: Tensor,
}

/// Generates a dataset; identical configs give bit-identical output.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    check(cfg)?;
    let mut rng: Rng = crate::seeded_rng(cfg.seed);
    let class_views = assign_views(cfg, &mut rng)?;

    let normal = |rng: &mut Rng| -> f64 { StandardNormal.sample(rng) };
    let protos: Vec<Vec<f64>> = (0..cfg.views)
        .map(|_| (0..cfg.r0).map(|_| normal(&mut rng)).collect())
        .collect();
    let background: Vec<f64> = (0..cfg.r0).map(|_| normal(&mut rng)).collect();

    let mut table = EmbeddingTable::new(cfg.word_dim);
    let mut view_words: Vec<Vec<String>> = Vec::with_capacity(cfg.views);
    for v in 0..cfg.views {
        let words: Vec<String> = (0..cfg.words_per_view).map(|j| format!("v{v}w{j}")).collect();
        for w in &words {
            table.insert(w.clone(), (0..cfg.word_dim).map(|_| normal(&mut rng)).collect())?;
        }
        view_words.push(words);
    }
    let fillers: Vec<String> = (0..cfg.filler_words).map(|j| format!("filler{j}")).collect();
    for w in &fillers {
        table.insert(w.clone(), (0..cfg.word_dim).map(|_| normal(&mut rng)).collect())?;
    }

    let mut tokens = BTreeMap::new();
    for (&class, views) in &class_views {
        let mut doc: Vec<String> = views.iter().flat_map(|&v| view_words[v].iter().cloned()).collect();
        while doc.len() < cfg.m {
            doc.push(fillers[rng.random_range(0..fillers.len())].clone());
        }
        doc.shuffle(&mut rng);
        tokens.insert(class, doc);
    }

    let num_classes = cfg.c_seen + cfg.c_unseen;
    let num_images = num_classes * cfg.images_per_class;
    let row = cfg.r0;
    let mut features = Vec::with_capacity(num_images * (cfg.n + 1) * row);
    let mut labels = Vec::with_capacity(num_images);
    let mut realized_views = Vec::with_capacity(num_images);
    for (&class, views) in &class_views {
        for _ in 0..cfg.images_per_class {
            let mut shown: Vec<usize> = views
                .iter()
                .copied()
                .filter(|_| rng.random::<f64>() < cfg.realize_prob)
                .collect();
            if shown.is_empty() {
                shown.push(views[rng.random_range(0..views.len())]);
            }
            let mut slots: Vec<Option<usize>> = shown.iter().map(|&v| Some(v)).collect();
            while slots.len() < cfg.n {
                let slot = if rng.random::<f64>() < 0.5 {
                    Some(shown[rng.random_range(0..shown.len())])
                } else {
                    None
                };
                slots.push(slot);
            }
            slots.shuffle(&mut rng);

            let mut patches = vec![0.0; cfg.n * row];
            for (p, slot) in slots.iter().enumerate() {
                let base = slot.map_or(&background, |v| &protos[v]);
                for j in 0..row {
                    patches[p * row + j] = base[j] + cfg.noise_sigma * normal(&mut rng);
                }
            }
            let mut global = vec![0.0; row];
            for p in 0..cfg.n {
                for j in 0..row {
                    global[j] += patches[p * row + j] / cfg.n as f64;
                }
            }
            for g in &mut global {
                *g += cfg.noise_sigma * normal(&mut rng);
            }
            features.extend_from_slice(&global);
            features.extend_from_slice(&patches);
            labels.push(class);
            shown.sort_unstable();
            realized_views.push(shown);
        }
    }
    let bank = FeatureBank::new(Tensor::new(&[num_images, cfg.n + 1, row], features)?, labels)?;

    let seen: Vec<ClassId> = (0..cfg.c_seen as u32).map(ClassId).collect();
    let unseen: Vec<ClassId> = (cfg.c_seen as u32..num_classes as u32).map(ClassId).collect();
    let val_seen = seen[cfg.c_seen - cfg.val_classes..].to_vec();
    let mut test_seen_images = Vec::new();
    let mut test_images = Vec::new();
    for (ci, _) in class_views.iter().enumerate() {
        let first = ci * cfg.images_per_class;
        if ci < cfg.c_seen {
            test_seen_images.extend(first..first + cfg.seen_test_per_class);
        } else {
            test_images.extend(first..first + cfg.images_per_class);
        }
    }
    let splits = SplitSpec {
        seen,
        unseen,
        val_seen,
        test_seen_images,
        test_images,
    };
    splits.validate(&bank)?;
    let docs = DocumentBank::from_tokens(tokens.clone(), &table)?;
    let view_prototypes = Tensor::from_rows(&protos)?;

    Ok(SyntheticDataset {
        bank,
        tokens,
        docs,
        splits,
        table,
        realized_views,
        class_views,
        view_prototypes,
    })
}

fn check(cfg: &SyntheticConfig) -> Result<()> {
    let infeasible = |msg: String| Err(Error::Config(msg));
    if cfg.views < 2 {
        return infeasible(format!("views = {} but at least 2 are needed", cfg.views));
    }
    if cfg.c_seen < cfg.views {
        return infeasible(format!("c_seen = {} must be at least views = {}", cfg.c_seen, cfg.views));
    }
    if cfg.c_unseen == 0 {
        return infeasible("c_unseen must be positive".into());
    }
    if cfg.views_per_class == 0 || cfg.views_per_class > cfg.views {
        return infeasible(format!("views_per_class = {} outside 1..={}", cfg.views_per_class, cfg.views));
    }
    if binomial(cfg.views, cfg.views_per_class) < cfg.c_seen + cfg.c_unseen {
        return infeasible(format!(
            "only {} view combinations for {} classes",
            binomial(cfg.views, cfg.views_per_class),
            cfg.c_seen + cfg.c_unseen
        ));
    }
    if cfg.n < cfg.views_per_class {
        return infeasible(format!("n = {} patches cannot show {} views", cfg.n, cfg.views_per_class));
    }
    if cfg.words_per_view == 0 || cfg.m < cfg.views_per_class * cfg.words_per_view {
        return infeasible(format!("m = {} tokens cannot hold every view word", cfg.m));
    }
    if cfg.m > cfg.views_per_class * cfg.words_per_view && cfg.filler_words == 0 {
        return infeasible("documents need filler words to reach m tokens".into());
    }
    if cfg.r0 == 0 || cfg.word_dim == 0 {
        return infeasible("r0 and word_dim must be positive".into());
    }
    if cfg.images_per_class <= cfg.seen_test_per_class {
        return infeasible("every seen class needs a training image".into());
    }
    if cfg.val_classes >= cfg.c_seen {
        return infeasible("validation would take every seen class".into());
    }
    if !(cfg.noise_sigma >= 0.0) || !(0.0..=1.0).contains(&cfg.realize_prob) {
        return infeasible("noise_sigma must be >= 0 and realize_prob in [0, 1]".into());
    }
    Ok(())
}

/// Seen classes take combinations that together cover every view; unseen
/// classes take further, unused combinations.
fn assign_views(cfg: &SyntheticConfig, rng: &mut Rng) -> Result<BTreeMap<ClassId, Vec<usize>>> {
    let mut combos = combinations(cfg.views, cfg.views_per_class);
    for _ in 0..1000 {
        combos.shuffle(rng);
        let mut covered = vec![false; cfg.views];
        for c in &combos[..cfg.c_seen] {
            for &v in c {
                covered[v] = true;
            }
        }
        if covered.iter().all(|&c| c) {
            return Ok(combos[..cfg.c_seen + cfg.c_unseen]
                .iter()
                .enumerate()
                .map(|(i, c)| (ClassId(i as u32), c.clone()))
                .collect());
        }
    }
    Err(Error::Config("could not cover every view with the seen classes".into()))
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}
