//! In-memory datasets: image feature banks, class documents, word-embedding
//! tables and seen/unseen splits.

mod batch;
pub mod synthetic;

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

pub use batch::{batch_iter, Batches};

use crate::numerics::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Pre-extracted image tokens: row 0 of every image is the global token,
/// rows `1..=n` are patch tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    features: Tensor,
    labels: Vec<ClassId>,
}

impl FeatureBank {
    pub fn new(features: Tensor, labels: Vec<ClassId>) -> Result<Self> {
        let shape = features.shape();
        if shape.len() != 3 || shape[1] < 2 {
            return Err(Error::Data(format!(
                "feature tensor must be [images, n + 1, r0] with n >= 1, got {shape:?}"
            )));
        }
        if labels.len() != shape[0] {
            return Err(Error::Data(format!(
                "{} labels for {} images",
                labels.len(),
                shape[0]
            )));
        }
        Ok(FeatureBank { features, labels })
    }

    pub fn num_images(&self) -> usize {
        self.features.shape()[0]
    }

    /// Patches per image.
    pub fn n(&self) -> usize {
        self.features.shape()[1] - 1
    }

    pub fn r0(&self) -> usize {
        self.features.shape()[2]
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[ClassId] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> ClassId {
        self.labels[i]
    }

    /// `[n + 1, r0]` tokens of image `i`.
    pub fn image(&self, i: usize) -> Tensor {
        self.features.slab(i)
    }

    /// Fails with [`Error::UnknownClass`] if a label is not in `classes`.
    pub fn check_labels(&self, classes: &BTreeSet<ClassId>) -> Result<()> {
        match self.labels.iter().find(|c| !classes.contains(c)) {
            Some(c) => Err(Error::UnknownClass(c.0)),
            None => Ok(()),
        }
    }
}

/// What to do with a token missing from the embedding table.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OovPolicy {
    #[default]
    Skip,
    Zero,
}

/// Word to vector lookup.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
    pub oov_policy: OovPolicy,
}

impl EmbeddingTable {
    /// Dimension of the GloVe vectors the text perceiver expects by default.
    pub const GLOVE_DIM: usize = 300;

    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            vectors: BTreeMap::new(),
            oov_policy: OovPolicy::Skip,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn insert(&mut self, word: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        let word = word.into();
        if vector.len() != self.dim {
            return Err(Error::Data(format!(
                "vector for {word:?} has dimension {}, expected {}",
                vector.len(),
                self.dim
            )));
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("embedding of {word:?}")));
        }
        self.vectors.insert(word, vector);
        Ok(())
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(word).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Entries in lexicographic word order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.vectors.iter().map(|(w, v)| (w.as_str(), v.as_slice()))
    }
}

/// Lowercases, strips punctuation and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Looks every token up in `table`, in document order.
pub fn embed_tokens(tokens: &[String], table: &EmbeddingTable) -> Result<Tensor> {
    if tokens.is_empty() {
        return Err(Error::Empty("document has no tokens".into()));
    }
    let mut data = Vec::with_capacity(tokens.len() * table.dim);
    for tok in tokens {
        match (table.get(tok), table.oov_policy) {
            (Some(v), _) => data.extend_from_slice(v),
            (None, OovPolicy::Zero) => data.extend(core::iter::repeat_n(0.0, table.dim)),
            (None, OovPolicy::Skip) => {}
        }
    }
    if data.is_empty() {
        return Err(Error::Empty("no document token is in the embedding table".into()));
    }
    let m = data.len() / table.dim;
    Tensor::new(&[m, table.dim], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub tokens: Vec<String>,
    /// `[m, word_dim]` after out-of-vocabulary handling.
    pub embedding: Tensor,
}

/// One document per class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DocumentBank {
    docs: BTreeMap<ClassId, Document>,
}

impl DocumentBank {
    pub fn from_tokens(tokens: BTreeMap<ClassId, Vec<String>>, table: &EmbeddingTable) -> Result<Self> {
        let mut docs = BTreeMap::new();
        for (class, toks) in tokens {
            let embedding = embed_tokens(&toks, table)
                .map_err(|e| Error::Data(format!("document of class {class}: {e}")))?;
            docs.insert(class, Document { tokens: toks, embedding });
        }
        Ok(DocumentBank { docs })
    }

    pub fn get(&self, class: ClassId) -> Result<&Document> {
        self.docs.get(&class).ok_or(Error::UnknownClass(class.0))
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.docs.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ClassId, &Document)> {
        self.docs.iter().map(|(c, d)| (*c, d))
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Width of the token embeddings (0 for an empty bank).
    pub fn word_dim(&self) -> usize {
        self.docs.values().next().map_or(0, |d| d.embedding.cols())
    }
}

/// Class and image membership for training and testing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub seen: Vec<ClassId>,
    pub unseen: Vec<ClassId>,
    /// Seen classes held out as pseudo-unseen during hyperparameter search.
    #[serde(default)]
    pub val_seen: Vec<ClassId>,
    /// Seen-class images reserved for the generalized test.
    pub test_seen_images: Vec<usize>,
    /// Unseen-class test images.
    pub test_images: Vec<usize>,
}

/// Which classes and images a run trains and evaluates on.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub train_classes: Vec<ClassId>,
    pub train_images: Vec<usize>,
    /// Candidates for the zero-shot task.
    pub eval_unseen_classes: Vec<ClassId>,
    pub eval_unseen_images: Vec<usize>,
    /// Seen-side images of the generalized task.
    pub eval_seen_images: Vec<usize>,
}

impl Partition {
    /// Seen then unseen candidates of the generalized task.
    pub fn all_classes(&self) -> Vec<ClassId> {
        let mut all = self.train_classes.clone();
        all.extend(&self.eval_unseen_classes);
        all
    }
}

impl SplitSpec {
    pub fn all_classes(&self) -> BTreeSet<ClassId> {
        self.seen.iter().chain(&self.unseen).copied().collect()
    }

    pub fn validate(&self, bank: &FeatureBank) -> Result<()> {
        let seen: BTreeSet<_> = self.seen.iter().copied().collect();
        let unseen: BTreeSet<_> = self.unseen.iter().copied().collect();
        if seen.len() != self.seen.len() || unseen.len() != self.unseen.len() {
            return Err(Error::Data("duplicate class id in split".into()));
        }
        if seen.is_empty() || unseen.is_empty() {
            return Err(Error::Data("split needs seen and unseen classes".into()));
        }
        if let Some(c) = seen.intersection(&unseen).next() {
            return Err(Error::Data(format!("class {c} is both seen and unseen")));
        }
        if let Some(c) = self.val_seen.iter().find(|c| !seen.contains(c)) {
            return Err(Error::Data(format!("validation class {c} is not a seen class")));
        }
        if self.val_seen.len() >= self.seen.len() {
            return Err(Error::Data("validation would leave no training class".into()));
        }
        bank.check_labels(&self.all_classes())?;
        let n = bank.num_images();
        for &i in self.test_seen_images.iter().chain(&self.test_images) {
            if i >= n {
                return Err(Error::Data(format!("test image index {i} out of range ({n} images)")));
            }
        }
        if let Some(&i) = self.test_seen_images.iter().find(|&&i| !seen.contains(&bank.label(i))) {
            return Err(Error::Data(format!("seen test image {i} has unseen label")));
        }
        if let Some(&i) = self.test_images.iter().find(|&&i| !unseen.contains(&bank.label(i))) {
            return Err(Error::Data(format!("unseen test image {i} has seen label")));
        }
        Ok(())
    }

    /// Seen-class images not reserved for testing.
    pub fn train_images(&self, bank: &FeatureBank) -> Vec<usize> {
        let seen: BTreeSet<_> = self.seen.iter().collect();
        let held: BTreeSet<_> = self.test_seen_images.iter().collect();
        (0..bank.num_images())
            .filter(|i| seen.contains(&bank.label(*i)) && !held.contains(i))
            .collect()
    }

    /// Train on every seen class; evaluate on the test images.
    pub fn test_partition(&self, bank: &FeatureBank) -> Partition {
        Partition {
            train_classes: self.seen.clone(),
            train_images: self.train_images(bank),
            eval_unseen_classes: self.unseen.clone(),
            eval_unseen_images: self.test_images.clone(),
            eval_seen_images: self.test_seen_images.clone(),
        }
    }

    /// Train on seen classes outside `val_seen`; evaluate with the validation
    /// classes as unseen. Every fifth training image of each remaining class
    /// (in index order) forms the seen side of the generalized validation.
    pub fn validation_partition(&self, bank: &FeatureBank) -> Result<Partition> {
        if self.val_seen.is_empty() {
            return Err(Error::Data("split has no validation classes".into()));
        }
        let val: BTreeSet<_> = self.val_seen.iter().copied().collect();
        let train_classes: Vec<_> = self.seen.iter().copied().filter(|c| !val.contains(c)).collect();
        let mut counts: BTreeMap<ClassId, usize> = BTreeMap::new();
        let (mut train_images, mut eval_seen, mut eval_unseen) = (Vec::new(), Vec::new(), Vec::new());
        for i in self.train_images(bank) {
            let c = bank.label(i);
            if val.contains(&c) {
                eval_unseen.push(i);
                continue;
            }
            let seen_so_far = counts.entry(c).or_default();
            if *seen_so_far % 5 == 4 {
                eval_seen.push(i);
            } else {
                train_images.push(i);
            }
            *seen_so_far += 1;
        }
        if let Some(c) = train_classes.iter().find(|c| counts.get(c).copied().unwrap_or(0) < 5) {
            return Err(Error::Data(format!("class {c} has fewer than 5 training images, too few for validation")));
        }
        Ok(Partition {
            train_classes,
            train_images,
            eval_unseen_classes: self.val_seen.clone(),
            eval_unseen_images: eval_unseen,
            eval_seen_images: eval_seen,
        })
    }
}
