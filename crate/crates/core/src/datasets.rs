//! Labeled datasets: synthetic generators, stratified splitting, and an IDX
//! (MNIST-family) reader/writer.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Bernoulli, Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("example {index} has {got} features, dataset has {expected}")]
    FeatureDim { index: usize, expected: usize, got: usize },
    #[error("example {index} has label {label}, dataset has {classes} classes")]
    Label { index: usize, label: usize, classes: usize },
    #[error("class {class} has {count} samples, need at least 2 to split")]
    ClassTooSmall { class: usize, count: usize },
    #[error("{path}: bad magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic { path: String, found: u32, expected: u32 },
    #[error("{path}: truncated file ({len} bytes, need {needed})")]
    Truncated { path: String, len: usize, needed: usize },
    #[error("image file holds {images} items but label file holds {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("images are {rows}x{cols}; only square images are supported")]
    NonSquare { rows: usize, cols: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// One observation `<x, y>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub features: Vec<f32>,
    pub label: usize,
}

impl LabeledExample {
    /// Storage in bits: 32 per feature plus 32 for the label.
    pub fn mem_bits(&self) -> u64 {
        32 * (self.features.len() as u64 + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<LabeledExample>,
    pub class_count: usize,
    pub feature_dim: usize,
    /// Side length when features are a row-major square image.
    pub image_side: Option<usize>,
}

impl Dataset {
    pub fn new(
        examples: Vec<LabeledExample>,
        class_count: usize,
        feature_dim: usize,
        image_side: Option<usize>,
    ) -> Result<Self> {
        if let Some(side) = image_side {
            if side * side != feature_dim {
                return Err(DatasetError::InvalidParameter(format!(
                    "image side {side} does not match feature dim {feature_dim}"
                )));
            }
        }
        for (index, ex) in examples.iter().enumerate() {
            if ex.features.len() != feature_dim {
                return Err(DatasetError::FeatureDim {
                    index,
                    expected: feature_dim,
                    got: ex.features.len(),
                });
            }
            if ex.label >= class_count {
                return Err(DatasetError::Label {
                    index,
                    label: ex.label,
                    classes: class_count,
                });
            }
        }
        Ok(Self {
            examples,
            class_count,
            feature_dim,
            image_side,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Samples per class id, indexed by class.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for ex in &self.examples {
            counts[ex.label] += 1;
        }
        counts
    }

    /// Class ids that actually occur.
    pub fn class_set(&self) -> BTreeSet<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    /// Same metadata, only the examples whose label is in `classes`.
    pub fn filter_classes(&self, classes: &BTreeSet<usize>) -> Dataset {
        self.with_examples(
            self.examples
                .iter()
                .filter(|e| classes.contains(&e.label))
                .cloned()
                .collect(),
        )
    }

    pub(crate) fn with_examples(&self, examples: Vec<LabeledExample>) -> Dataset {
        Dataset {
            examples,
            class_count: self.class_count,
            feature_dim: self.feature_dim,
            image_side: self.image_side,
        }
    }

    pub fn mem_bits(&self) -> u64 {
        self.examples.iter().map(LabeledExample::mem_bits).sum()
    }
}

fn require(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(DatasetError::InvalidParameter(msg.to_owned()))
    }
}

/// Isotropic Gaussian blobs, one per class. Class means are drawn from
/// `U(-2, 2)^d`; samples have standard deviation `spread`.
pub fn gen_blobs(
    class_count: usize,
    feature_dim: usize,
    per_class: usize,
    spread: f32,
    seed: u64,
) -> Result<Dataset> {
    require(class_count >= 1 && feature_dim >= 1 && per_class >= 1, "counts must be >= 1")?;
    require(spread > 0.0 && spread.is_finite(), "spread must be positive")?;
    let mut rng = rng::stream(seed, &[rng::TAG_DATA, 0]);
    let mean_dist = Uniform::new(-2.0f32, 2.0);
    let means: Vec<Vec<f32>> = (0..class_count)
        .map(|_| (0..feature_dim).map(|_| mean_dist.sample(&mut rng)).collect())
        .collect();
    let noise = Normal::new(0.0f32, spread).expect("spread validated");
    let mut examples = Vec::with_capacity(class_count * per_class);
    for (label, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            let features = mean.iter().map(|m| m + noise.sample(&mut rng)).collect();
            examples.push(LabeledExample { features, label });
        }
    }
    Dataset::new(examples, class_count, feature_dim, None)
}

/// Square binary templates plus Gaussian pixel noise, clamped to `[0, 1]`.
pub fn gen_patterns(
    class_count: usize,
    image_side: usize,
    per_class: usize,
    noise_std: f32,
    seed: u64,
) -> Result<Dataset> {
    require(class_count >= 1 && per_class >= 1, "counts must be >= 1")?;
    require(image_side >= 4, "image side must be >= 4")?;
    require(noise_std >= 0.0 && noise_std.is_finite(), "noise std must be >= 0")?;
    let dim = image_side * image_side;
    let mut rng = rng::stream(seed, &[rng::TAG_DATA, 1]);
    let coin = Bernoulli::new(0.5).expect("valid probability");
    let templates: Vec<Vec<f32>> = (0..class_count)
        .map(|_| {
            (0..dim)
                .map(|_| if coin.sample(&mut rng) { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    let mut examples = Vec::with_capacity(class_count * per_class);
    for (label, template) in templates.iter().enumerate() {
        for _ in 0..per_class {
            let features = if noise_std == 0.0 {
                template.clone()
            } else {
                let noise = Normal::new(0.0f32, noise_std).expect("validated");
                template
                    .iter()
                    .map(|t| (t + noise.sample(&mut rng)).clamp(0.0, 1.0))
                    .collect()
            };
            examples.push(LabeledExample { features, label });
        }
    }
    Dataset::new(examples, class_count, dim, Some(image_side))
}

/// Stratified split. The total test size is `round(len·fraction)`, allotted to
/// classes by largest remainder (ties to lower class id), and each class keeps
/// at least one sample on each side.
pub fn split_train_test(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(ds, test_fraction, seed)?;
    let pick = |idx: Vec<usize>| ds.with_examples(idx.into_iter().map(|i| ds.examples[i].clone()).collect());
    Ok((pick(train), pick(test)))
}

/// Index form of [`split_train_test`]: `(train indices, test indices)` into
/// `ds.examples`, each list grouped by class and ascending within a class.
pub fn split_indices(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    require(
        test_fraction > 0.0 && test_fraction < 1.0,
        "test fraction must lie in (0, 1)",
    )?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count];
    for (i, ex) in ds.examples.iter().enumerate() {
        by_class[ex.label].push(i);
    }
    for (class, idx) in by_class.iter().enumerate() {
        if idx.len() == 1 {
            return Err(DatasetError::ClassTooSmall { class, count: 1 });
        }
    }

    let quotas: Vec<f64> = by_class.iter().map(|v| v.len() as f64 * test_fraction).collect();
    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let target = (ds.len() as f64 * test_fraction).round() as usize;
    let mut order: Vec<usize> = (0..alloc.len()).filter(|&c| !by_class[c].is_empty()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.partial_cmp(&ra).expect("finite").then(a.cmp(&b))
    });
    let remaining = target.saturating_sub(alloc.iter().sum());
    for &c in order.iter().take(remaining) {
        alloc[c] += 1;
    }
    for (c, idx) in by_class.iter().enumerate() {
        if !idx.is_empty() {
            alloc[c] = alloc[c].clamp(1, idx.len() - 1);
        }
    }

    let mut rng = rng::stream(seed, &[rng::TAG_SPLIT]);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, idx) in by_class.iter_mut().enumerate() {
        idx.shuffle(&mut rng);
        let (te, tr) = idx.split_at(alloc[c]);
        let (mut te, mut tr) = (te.to_vec(), tr.to_vec());
        te.sort_unstable();
        tr.sort_unstable();
        test.extend(te);
        train.extend(tr);
    }
    Ok((train, test))
}

fn read_u32(bytes: &[u8], at: usize, path: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DatasetError::Truncated {
            path: path.to_owned(),
            len: bytes.len(),
            needed: at + 4,
        })
}

/// Parse an IDX image/label pair from memory.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    parse_idx_named(images, "images", labels, "labels")
}

fn parse_idx_named(images: &[u8], ipath: &str, labels: &[u8], lpath: &str) -> Result<Dataset> {
    let magic = read_u32(images, 0, ipath)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DatasetError::BadMagic {
            path: ipath.to_owned(),
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let lmagic = read_u32(labels, 0, lpath)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(DatasetError::BadMagic {
            path: lpath.to_owned(),
            found: lmagic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let count = read_u32(images, 4, ipath)? as usize;
    let rows = read_u32(images, 8, ipath)? as usize;
    let cols = read_u32(images, 12, ipath)? as usize;
    let lcount = read_u32(labels, 4, lpath)? as usize;
    if count != lcount {
        return Err(DatasetError::CountMismatch {
            images: count,
            labels: lcount,
        });
    }
    if rows != cols {
        return Err(DatasetError::NonSquare { rows, cols });
    }
    let dim = rows * cols;
    let needed = 16 + count * dim;
    if images.len() < needed {
        return Err(DatasetError::Truncated {
            path: ipath.to_owned(),
            len: images.len(),
            needed,
        });
    }
    if labels.len() < 8 + count {
        return Err(DatasetError::Truncated {
            path: lpath.to_owned(),
            len: labels.len(),
            needed: 8 + count,
        });
    }
    let label_bytes = &labels[8..8 + count];
    let class_count = label_bytes.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let examples = images[16..needed]
        .chunks_exact(dim.max(1))
        .zip(label_bytes)
        .map(|(px, &l)| LabeledExample {
            features: px.iter().map(|&p| p as f32 / 255.0).collect(),
            label: l as usize,
        })
        .collect();
    Dataset::new(examples, class_count, dim, Some(rows))
}

/// Read an IDX image file (magic `0x00000803`) and label file (`0x00000801`).
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = fs::read(ip)?;
    let labels = fs::read(lp)?;
    parse_idx_named(&images, &ip.display().to_string(), &labels, &lp.display().to_string())
}

/// Encode a square-image dataset as IDX bytes `(images, labels)`. Features
/// are quantized with `round(x·255)` after clamping to `[0, 1]`.
pub fn encode_idx(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let side = ds
        .image_side
        .ok_or_else(|| DatasetError::InvalidParameter("dataset has no image side".into()))?;
    require(ds.class_count <= 256, "IDX labels are single bytes")?;
    let mut images = Vec::with_capacity(16 + ds.len() * ds.feature_dim);
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    images.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    images.extend_from_slice(&(side as u32).to_be_bytes());
    images.extend_from_slice(&(side as u32).to_be_bytes());
    let mut labels = Vec::with_capacity(8 + ds.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    for ex in &ds.examples {
        images.extend(ex.features.iter().map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8));
        labels.push(ex.label as u8);
    }
    Ok((images, labels))
}

pub fn write_idx(ds: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let (images, labels) = encode_idx(ds)?;
    fs::write(images_path, images)?;
    fs::write(labels_path, labels)?;
    Ok(())
}
