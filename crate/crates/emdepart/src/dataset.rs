//! On-disk dataset layout:
//!
//! ```text
//! manifest.json        {"n", "r0", "num_images", "classes"}
//! images.bin           little-endian f32, [num_images, n + 1, r0]
//! labels.csv           image_index,class_id
//! documents/class_<id>.txt
//! embeddings.tsv       GloVe text format
//! splits.json
//! views.json           synthetic only: realized view ids per image
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use emdepart_core::data::synthetic::SyntheticDataset;
use emdepart_core::data::{tokenize, ClassId, DocumentBank, EmbeddingTable, FeatureBank, OovPolicy, SplitSpec};
use emdepart_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub n: usize,
    pub r0: usize,
    pub num_images: usize,
    pub classes: Vec<ClassId>,
}

/// A loaded and cross-validated dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub bank: FeatureBank,
    pub docs: DocumentBank,
    pub table: EmbeddingTable,
    pub splits: SplitSpec,
    pub views: Option<Vec<Vec<usize>>>,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read(path)?).map_err(|e| CliError::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    read_json(&dir.join("manifest.json"))
}

/// Reads `manifest.json`, `images.bin` and `labels.csv`. A wrong byte count,
/// a non-finite feature and a label outside the manifest's classes are
/// reported as distinct errors.
pub fn load_feature_bank(dir: &Path) -> Result<FeatureBank> {
    let manifest = load_manifest(dir)?;
    let bin_path = dir.join("images.bin");
    let bytes = read(&bin_path)?;
    let count = manifest.num_images * (manifest.n + 1) * manifest.r0;
    if bytes.len() != 4 * count {
        return Err(CliError::SizeMismatch {
            path: bin_path,
            expected: 4 * count,
            actual: bytes.len(),
        });
    }
    let mut data = Vec::with_capacity(count);
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("chunk of 4"));
        if !v.is_finite() {
            let per_image = (manifest.n + 1) * manifest.r0;
            return Err(CliError::NonFinite {
                path: bin_path,
                image: i / per_image,
            });
        }
        data.push(f64::from(v));
    }
    let features = Tensor::new(&[manifest.num_images, manifest.n + 1, manifest.r0], data)?;

    let labels_path = dir.join("labels.csv");
    let labels_bytes = read(&labels_path)?;
    let mut rdr = csv::Reader::from_reader(labels_bytes.as_slice());
    let bad = |msg: String| CliError::Format {
        path: labels_path.clone(),
        msg,
    };
    let header = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != ["image_index", "class_id"] {
        return Err(bad(format!("header must be image_index,class_id, got {}", header.iter().collect::<Vec<_>>().join(","))));
    }
    let known: BTreeSet<ClassId> = manifest.classes.iter().copied().collect();
    let mut labels = vec![None; manifest.num_images];
    for row in rdr.deserialize::<(usize, u32)>() {
        let (i, c) = row.map_err(|e| bad(e.to_string()))?;
        let slot = labels
            .get_mut(i)
            .ok_or_else(|| bad(format!("image index {i} out of range ({} images)", manifest.num_images)))?;
        if slot.is_some() {
            return Err(bad(format!("image {i} labelled twice")));
        }
        if !known.contains(&ClassId(c)) {
            return Err(CliError::UnknownClass { path: labels_path.clone(), image: i, class: c });
        }
        *slot = Some(ClassId(c));
    }
    let labels = labels
        .into_iter()
        .enumerate()
        .map(|(i, l)| l.ok_or_else(|| bad(format!("image {i} has no label"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureBank::new(features, labels)?)
}

pub fn write_feature_bank(dir: &Path, bank: &FeatureBank, classes: &[ClassId]) -> Result<()> {
    let manifest = Manifest {
        n: bank.n(),
        r0: bank.r0(),
        num_images: bank.num_images(),
        classes: classes.to_vec(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    let bin_path = dir.join("images.bin");
    let mut bytes = Vec::with_capacity(4 * bank.features().len());
    for &v in bank.features().data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(&bin_path, bytes).map_err(|e| CliError::io(&bin_path, e))?;

    let labels_path = dir.join("labels.csv");
    let mut w = csv::Writer::from_path(&labels_path).map_err(|e| CliError::csv(&labels_path, e))?;
    w.write_record(["image_index", "class_id"]).map_err(|e| CliError::csv(&labels_path, e))?;
    for (i, c) in bank.labels().iter().enumerate() {
        w.serialize((i, c.0)).map_err(|e| CliError::csv(&labels_path, e))?;
    }
    w.flush().map_err(|e| CliError::io(&labels_path, e))
}

/// GloVe text format: a word followed by its space-separated components.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let bad = |line: usize, msg: String| CliError::Format {
        path: path.to_path_buf(),
        msg: format!("line {line}: {msg}"),
    };
    let mut table: Option<EmbeddingTable> = None;
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let vector = parts
            .map(|x| x.parse::<f64>().map_err(|e| bad(n + 1, format!("{x:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let t = table.get_or_insert_with(|| EmbeddingTable::new(vector.len()));
        t.insert(word, vector).map_err(|e| bad(n + 1, e.to_string()))?;
    }
    table.ok_or_else(|| bad(0, "no embeddings".into()))
}

pub fn write_embeddings(path: &Path, table: &EmbeddingTable) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (word, v) in table.iter() {
        let nums: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
        writeln!(w, "{word} {}", nums.join(" ")).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn doc_path(dir: &Path, class: ClassId) -> PathBuf {
    dir.join("documents").join(format!("class_{class}.txt"))
}

pub fn load_document_tokens(dir: &Path, classes: &[ClassId]) -> Result<BTreeMap<ClassId, Vec<String>>> {
    classes
        .iter()
        .map(|&c| {
            let path = doc_path(dir, c);
            let text = String::from_utf8(read(&path)?).map_err(|e| CliError::Format {
                path: path.clone(),
                msg: e.to_string(),
            })?;
            Ok((c, tokenize(&text)))
        })
        .collect()
}

pub fn write_documents(dir: &Path, tokens: &BTreeMap<ClassId, Vec<String>>) -> Result<()> {
    let docs = dir.join("documents");
    fs::create_dir_all(&docs).map_err(|e| CliError::io(&docs, e))?;
    for (&c, toks) in tokens {
        let path = doc_path(dir, c);
        fs::write(&path, toks.join(" ") + "\n").map_err(|e| CliError::io(&path, e))?;
    }
    Ok(())
}

/// Loads every file and checks that the pieces agree: split classes are the
/// manifest classes, split images exist and belong to the right side, and
/// every class has a document.
pub fn load_dataset(dir: &Path, oov: OovPolicy) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(CliError::MissingDir(dir.to_path_buf()));
    }
    let manifest = load_manifest(dir)?;
    let bank = load_feature_bank(dir)?;
    let splits: SplitSpec = read_json(&dir.join("splits.json"))?;
    splits.validate(&bank).map_err(|e| CliError::Format {
        path: dir.join("splits.json"),
        msg: e.to_string(),
    })?;
    let split_classes: BTreeSet<ClassId> = splits.all_classes();
    let manifest_classes: BTreeSet<ClassId> = manifest.classes.iter().copied().collect();
    if split_classes != manifest_classes {
        return Err(CliError::Format {
            path: dir.join("splits.json"),
            msg: "seen and unseen classes must be exactly the manifest classes".into(),
        });
    }
    let mut table = load_embeddings(&dir.join("embeddings.tsv"))?;
    table.oov_policy = oov;
    let tokens = load_document_tokens(dir, &manifest.classes)?;
    let docs = DocumentBank::from_tokens(tokens, &table)?;
    let views_path = dir.join("views.json");
    let views = if views_path.exists() { Some(read_json(&views_path)?) } else { None };
    Ok(Dataset {
        manifest,
        bank,
        docs,
        table,
        splits,
        views,
    })
}

/// Writes a generated dataset in the layout `load_dataset` reads.
pub fn write_synthetic(dir: &Path, ds: &SyntheticDataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let classes: Vec<ClassId> = ds.splits.all_classes().into_iter().collect();
    write_feature_bank(dir, &ds.bank, &classes)?;
    write_documents(dir, &ds.tokens)?;
    write_embeddings(&dir.join("embeddings.tsv"), &ds.table)?;
    write_json(&dir.join("splits.json"), &ds.splits)?;
    write_json(&dir.join("views.json"), &ds.realized_views)
}
