//! Synthetic labeled datasets shaped like the old/new class-split protocol,
//! plus the binary embedding-store and dataset file formats.
//!
//! Classes are Gaussian clusters whose means sit on a sphere of radius
//! `separation`; the old model sees only the first fraction of classes, the
//! new model sees them all. Vectors go to disk as f32 for compactness while
//! in-memory math stays f64.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::format::{write_atomic, write_short_string, FormatError, TrackingReader};
use crate::retrieval::EmbeddingRecord;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Invalid(String),
}

/// Recipe for one synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub feature_dim: usize,
    /// Mean cluster distance from the origin, in noise-sigma units.
    pub separation: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 10,
            per_class: 200,
            feature_dim: 32,
            separation: 3.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_classes < 2 {
            return Err(DataError::Config("need at least 2 classes".into()));
        }
        if self.per_class < 2 {
            return Err(DataError::Config("need at least 2 samples per class".into()));
        }
        if self.feature_dim == 0 {
            return Err(DataError::Config("feature_dim must be positive".into()));
        }
        if !(self.separation.is_finite() && self.separation >= 0.0) {
            return Err(DataError::Config("separation must be non-negative".into()));
        }
        Ok(())
    }
}

/// Labeled feature vectors; labels are contiguous in `0..class_count`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<(Vec<f64>, usize)>,
    pub class_count: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.samples.first().map_or(0, |(x, _)| x.len())
    }
}

/// Train and validation splits of one generation run.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: Dataset,
    pub val: Dataset,
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u1 = 0 would need log(0), so resample
    loop {
        let u1: f64 = rng.gen();
        if u1 > 0.0 {
            let u2: f64 = rng.gen();
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

/// Draws class means on a sphere of radius `separation`, adds unit Gaussian
/// noise per sample, and splits 80/20 train/validation by per-class
/// round-robin (every fifth sample goes to validation). Deterministic per
/// seed.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut means = Vec::with_capacity(spec.num_classes);
    for _ in 0..spec.num_classes {
        let dir: Vec<f64> = (0..spec.feature_dim).map(|_| standard_normal(&mut rng)).collect();
        let norm = crate::linalg::vec_norm(&dir).max(1e-12);
        means.push(dir.iter().map(|v| v / norm * spec.separation).collect::<Vec<f64>>());
    }

    let mut train = Vec::new();
    let mut val = Vec::new();
    for (label, mean) in means.iter().enumerate() {
        for i in 0..spec.per_class {
            let x: Vec<f64> = mean
                .iter()
                .map(|m| m + standard_normal(&mut rng))
                .collect();
            if i % 5 == 4 {
                val.push((x, label));
            } else {
                train.push((x, label));
            }
        }
    }
    Ok(SyntheticData {
        train: Dataset {
            samples: train,
            class_count: spec.num_classes,
        },
        val: Dataset {
            samples: val,
            class_count: spec.num_classes,
        },
    })
}

/// Number of classes the old model sees for a given fraction.
pub fn old_class_count(class_count: usize, old_fraction: f64) -> usize {
    (old_fraction * class_count as f64).ceil() as usize
}

/// Old split (labels below `ceil(old_fraction * class_count)`, labels
/// preserved) plus the untouched full dataset.
pub fn split_old_new(ds: &Dataset, old_fraction: f64) -> Result<(Dataset, Dataset), DataError> {
    if !(old_fraction > 0.0 && old_fraction <= 1.0) {
        return Err(DataError::Config(format!(
            "old_fraction must lie in (0, 1], got {old_fraction}"
        )));
    }
    let old_classes = old_class_count(ds.class_count, old_fraction);
    let old_samples: Vec<(Vec<f64>, usize)> = ds
        .samples
        .iter()
        .filter(|(_, y)| *y < old_classes)
        .cloned()
        .collect();
    if old_samples.is_empty() {
        return Err(DataError::Config(
            "old split is empty; no samples carry the selected labels".into(),
        ));
    }
    Ok((
        Dataset {
            samples: old_samples,
            class_count: old_classes,
        },
        ds.clone(),
    ))
}

// ---------------------------------------------------------------------------
// embedding store
// ---------------------------------------------------------------------------

pub const EMBED_MAGIC: [u8; 4] = *b"EMBV";
pub const DATASET_MAGIC: [u8; 4] = *b"DSET";
pub const STORE_VERSION: u32 = 1;
const FLAG_LABELS: u8 = 1;

/// Decoded embedding store. The writer always emits labels; the reader also
/// accepts label-free files (flags bit 0 clear), whose records carry label 0
/// and cannot back label-based metrics.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    pub records: Vec<EmbeddingRecord>,
    pub labels_present: bool,
}

/// Serializes records (one model tag, one dimension) to the embedding-store
/// layout. Vectors are stored as f32; the writer rejects non-finite values.
pub fn encode_embeddings(records: &[EmbeddingRecord]) -> Result<Vec<u8>, DataError> {
    let tag = records.first().map(|r| r.model_tag.clone()).unwrap_or_default();
    let dim = records.first().map_or(0, |r| r.vector.len());
    for r in records {
        if r.model_tag != tag {
            return Err(DataError::Invalid(format!(
                "record {} has tag '{}', expected '{tag}'",
                r.id, r.model_tag
            )));
        }
        if r.vector.len() != dim {
            return Err(DataError::Invalid(format!(
                "record {} has dimension {}, expected {dim}",
                r.id,
                r.vector.len()
            )));
        }
        if !r.vector.iter().all(|v| v.is_finite()) {
            return Err(DataError::Invalid(format!(
                "record {} holds a non-finite value",
                r.id
            )));
        }
    }

    let mut out = Vec::new();
    out.extend_from_slice(&EMBED_MAGIC);
    out.extend_from_slice(&STORE_VERSION.to_le_bytes());
    out.push(FLAG_LABELS);
    write_short_string(&mut out, &tag).expect("vec write");
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(&r.id.to_le_bytes());
        out.extend_from_slice(&r.label.to_le_bytes());
        for v in &r.vector {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingStore, DataError> {
    let mut r = TrackingReader::new(bytes);
    r.read_magic(EMBED_MAGIC)?;
    r.read_version(STORE_VERSION)?;
    let at = r.offset();
    let flags = r.read_u8()?;
    if flags & !FLAG_LABELS != 0 {
        return Err(FormatError::OutOfRange {
            offset: at,
            what: "flags",
            got: flags as u64,
        }
        .into());
    }
    let labels_present = flags & FLAG_LABELS != 0;
    let tag = r.read_short_string()?;
    let at = r.offset();
    let count = r.read_u64()?;
    if count > 1 << 32 {
        return Err(FormatError::OutOfRange {
            offset: at,
            what: "record count",
            got: count,
        }
        .into());
    }
    let at = r.offset();
    let dim = r.read_u32()? as usize;
    if count > 0 && (dim == 0 || dim > 1 << 24) {
        return Err(FormatError::OutOfRange {
            offset: at,
            what: "dimension",
            got: dim as u64,
        }
        .into());
    }
    let mut records = Vec::with_capacity(count.min(1 << 20) as usize);
    for _ in 0..count {
        let id = r.read_u64()?;
        let label = if labels_present { r.read_u32()? } else { 0 };
        let mut vector = Vec::with_capacity(dim);
        for _ in 0..dim {
            let at = r.offset();
            let v = r.read_f32()?;
            if !v.is_finite() {
                return Err(FormatError::NonFinite { offset: at }.into());
            }
            vector.push(v as f64);
        }
        records.push(EmbeddingRecord {
            id,
            label,
            vector,
            model_tag: tag.clone(),
        });
    }
    r.expect_eof()?;
    Ok(EmbeddingStore {
        records,
        labels_present,
    })
}

pub fn write_embeddings(
    path: &std::path::Path,
    records: &[EmbeddingRecord],
) -> Result<(), DataError> {
    let bytes = encode_embeddings(records)?;
    write_atomic(path, &bytes).map_err(FormatError::Io)?;
    Ok(())
}

pub fn read_embeddings(path: &std::path::Path) -> Result<EmbeddingStore, DataError> {
    let bytes = std::fs::read(path).map_err(FormatError::Io)?;
    decode_embeddings(&bytes)
}

// ---------------------------------------------------------------------------
// dataset files
// ---------------------------------------------------------------------------

/// Same envelope as the embedding store, magic "DSET", rows of
/// `[label u32, dim x f32]`.
pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>, DataError> {
    let dim = ds.feature_dim();
    for (x, y) in &ds.samples {
        if x.len() != dim {
            return Err(DataError::Invalid("inconsistent feature dimensions".into()));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(DataError::Invalid("non-finite feature value".into()));
        }
        if *y >= ds.class_count {
            return Err(DataError::Invalid(format!(
                "label {y} exceeds class count {}",
                ds.class_count
            )));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&STORE_VERSION.to_le_bytes());
    out.push(FLAG_LABELS);
    write_short_string(&mut out, "").expect("vec write");
    out.extend_from_slice(&(ds.samples.len() as u64).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for (x, y) in &ds.samples {
        out.extend_from_slice(&(*y as u32).to_le_bytes());
        for v in x {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset, DataError> {
    let mut r = TrackingReader::new(bytes);
    r.read_magic(DATASET_MAGIC)?;
    r.read_version(STORE_VERSION)?;
    let at = r.offset();
    let flags = r.read_u8()?;
    if flags != FLAG_LABELS {
        return Err(FormatError::OutOfRange {
            offset: at,
            what: "flags",
            got: flags as u64,
        }
        .into());
    }
    let _name = r.read_short_string()?;
    let at = r.offset();
    let count = r.read_u64()?;
    if count > 1 << 32 {
        return Err(FormatError::OutOfRange {
            offset: at,
            what: "row count",
            got: count,
        }
        .into());
    }
    let at = r.offset();
    let dim = r.read_u32()? as usize;
    if count > 0 && (dim == 0 || dim > 1 << 24) {
        return Err(FormatError::OutOfRange {
            offset: at,
            what: "dimension",
            got: dim as u64,
        }
        .into());
    }
    let mut samples = Vec::with_capacity(count.min(1 << 20) as usize);
    let mut max_label = 0usize;
    for _ in 0..count {
        let label = r.read_u32()? as usize;
        max_label = max_label.max(label);
        let mut x = Vec::with_capacity(dim);
        for _ in 0..dim {
            let at = r.offset();
            let v = r.read_f32()?;
            if !v.is_finite() {
                return Err(FormatError::NonFinite { offset: at }.into());
            }
            x.push(v as f64);
        }
        samples.push((x, label));
    }
    r.expect_eof()?;
    Ok(Dataset {
        samples,
        class_count: max_label + 1,
    })
}

pub fn write_dataset(path: &std::path::Path, ds: &Dataset) -> Result<(), DataError> {
    let bytes = encode_dataset(ds)?;
    write_atomic(path, &bytes).map_err(FormatError::Io)?;
    Ok(())
}

pub fn read_dataset(path: &std::path::Path) -> Result<Dataset, DataError> {
    let bytes = std::fs::read(path).map_err(FormatError::Io)?;
    decode_dataset(&bytes)
}
