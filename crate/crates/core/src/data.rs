//! Dataset ingestion: seeded synthetic sets, IDX image/label files (optionally
//! gzip-compressed) and CSV vectors with a `label` column.

use std::f64::consts::PI;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Real, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("malformed IDX magic number at offset {offset}: found {found:#010x}, expected {expected:#010x}")]
    BadMagic { offset: usize, found: u32, expected: u32 },

    #[error("IDX payload truncated at offset {offset}: needed {needed} bytes, file has {len}")]
    Truncated { offset: usize, needed: usize, len: usize },

    #[error("IDX image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("ragged CSV row at line {line}: expected {expected} fields, got {got}")]
    RaggedRow { line: u64, expected: usize, got: usize },

    #[error("CSV header has no `label` column")]
    MissingLabelColumn,

    #[error("unparseable value {value:?} at line {line}, column {column}")]
    BadValue { line: u64, column: usize, value: String },

    #[error("label {label} of sample {index} out of range for {classes} classes")]
    LabelOutOfRange { index: usize, label: usize, classes: usize },

    #[error("invalid dataset parameters: {0}")]
    InvalidParams(String),

    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
}

#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub inputs: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub sample_shape: Vec<usize>,
}

impl<T: Real> Dataset<T> {
    pub fn new(inputs: Vec<Tensor<T>>, labels: Vec<usize>, num_classes: usize) -> Result<Self, DatasetError> {
        if inputs.len() != labels.len() {
            return Err(DatasetError::CountMismatch {
                images: inputs.len(),
                labels: labels.len(),
            });
        }
        for (index, &label) in labels.iter().enumerate() {
            if label >= num_classes {
                return Err(DatasetError::LabelOutOfRange {
                    index,
                    label,
                    classes: num_classes,
                });
            }
        }
        let sample_shape = inputs.first().map(|t| t.shape().to_vec()).unwrap_or_default();
        for t in &inputs {
            if t.shape() != sample_shape.as_slice() {
                return Err(DatasetError::InvalidParams(format!(
                    "mixed sample shapes {:?} and {sample_shape:?}",
                    t.shape()
                )));
            }
            if t.ensure_finite("dataset").is_err() {
                return Err(DatasetError::InvalidParams("non-finite feature".into()));
            }
        }
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
            sample_shape,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Dataset {
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            sample_shape: self.sample_shape.clone(),
        }
    }

    pub fn cast<U: Real>(&self) -> Dataset<U> {
        Dataset {
            inputs: self.inputs.iter().map(|t| t.cast()).collect(),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            sample_shape: self.sample_shape.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    TwoMoons {
        n: usize,
        #[serde(default = "default_noise")]
        noise: f64,
    },
    GaussianBlobs {
        n: usize,
        classes: usize,
        dim: usize,
        #[serde(default = "default_spread")]
        spread: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        num_classes: Option<usize>,
    },
}

fn default_noise() -> f64 {
    0.1
}

fn default_spread() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Normalization {
    #[default]
    None,
    /// Divide by 255 (byte images to [0, 1]).
    Unit,
    Standardize {
        mean: f64,
        std: f64,
    },
}

impl Normalization {
    fn apply(self, v: f64) -> f64 {
        match self {
            Normalization::None => v,
            Normalization::Unit => v / 255.0,
            Normalization::Standardize { mean, std } => (v - mean) / std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DatasetSource,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Seeds both synthetic generation and the train/test split.
    #[serde(default)]
    pub seed: u64,
}

fn default_test_fraction() -> f64 {
    0.2
}

/// Loads the source and splits it into `(train, test)` with a seeded shuffle.
pub fn load_dataset<T: Real>(config: &DataConfig) -> Result<(Dataset<T>, Dataset<T>), DatasetError> {
    if !(0.0..1.0).contains(&config.test_fraction) {
        return Err(DatasetError::InvalidParams(format!(
            "test_fraction must be in [0, 1), got {}",
            config.test_fraction
        )));
    }
    let norm = config.normalization;
    let (raw, labels, shape, classes): (Vec<Vec<f64>>, Vec<usize>, Vec<usize>, usize) = match &config.source {
        DatasetSource::TwoMoons { n, noise } => {
            let (pts, labels) = two_moons(*n, *noise, config.seed)?;
            (pts.into_iter().map(|p| p.to_vec()).collect(), labels, vec![2], 2)
        }
        DatasetSource::GaussianBlobs {
            n,
            classes,
            dim,
            spread,
        } => {
            let (pts, labels) = gaussian_blobs(*n, *classes, *dim, *spread, config.seed)?;
            (pts, labels, vec![*dim], *classes)
        }
        DatasetSource::Idx { images, labels, limit } => {
            let (dims, pixels) = parse_idx_images(&read_maybe_gz(images)?)?;
            let lab = parse_idx_labels(&read_maybe_gz(labels)?)?;
            if dims[0] != lab.len() {
                return Err(DatasetError::CountMismatch {
                    images: dims[0],
                    labels: lab.len(),
                });
            }
            let per = dims[1] * dims[2];
            let take = limit.unwrap_or(dims[0]).min(dims[0]);
            let raw = pixels
                .chunks(per)
                .take(take)
                .map(|c| c.iter().map(|&b| b as f64).collect())
                .collect();
            let lab: Vec<usize> = lab.into_iter().take(take).map(usize::from).collect();
            (raw, lab, vec![1, dims[1], dims[2]], 10)
        }
        DatasetSource::Csv { path, num_classes } => {
            let (raw, lab) = read_csv_vectors(path)?;
            let dim = raw.first().map(Vec::len).unwrap_or(0);
            let classes = num_classes.unwrap_or_else(|| lab.iter().max().map_or(0, |m| m + 1));
            (raw, lab, vec![dim], classes)
        }
    };
    let inputs = raw
        .into_iter()
        .map(|v| Tensor::from_parts(shape.clone(), v.into_iter().map(|x| T::of(norm.apply(x))).collect()))
        .collect();
    let all = Dataset::new(inputs, labels, classes)?;

    let mut order: Vec<usize> = (0..all.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed ^ 0x5a17_0000_0000_0001));
    let n_test = (all.len() as f64 * config.test_fraction).round() as usize;
    let (test_idx, train_idx) = order.split_at(n_test);
    Ok((all.subset(train_idx), all.subset(test_idx)))
}

/// Two interleaved half circles with Gaussian noise, classes in equal halves.
pub fn two_moons(n: usize, noise: f64, seed: u64) -> Result<(Vec<[f64; 2]>, Vec<usize>), DatasetError> {
    if n < 2 || !(noise >= 0.0) {
        return Err(DatasetError::InvalidParams(format!("two_moons(n={n}, noise={noise})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let n_outer = n / 2;
    let n_inner = n - n_outer;
    let mut pts = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n_outer {
        let t = PI * i as f64 / (n_outer.max(2) - 1) as f64;
        pts.push([t.cos(), t.sin()]);
        labels.push(0);
    }
    for i in 0..n_inner {
        let t = PI * i as f64 / (n_inner.max(2) - 1) as f64;
        pts.push([1.0 - t.cos(), 0.5 - t.sin()]);
        labels.push(1);
    }
    if noise > 0.0 {
        for p in &mut pts {
            p[0] += gauss.sample(&mut rng);
            p[1] += gauss.sample(&mut rng);
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    Ok((
        order.iter().map(|&i| pts[i]).collect(),
        order.iter().map(|&i| labels[i]).collect(),
    ))
}

/// Isotropic Gaussian clusters with centers drawn uniformly in `[-5, 5]^dim`.
pub fn gaussian_blobs(
    n: usize,
    classes: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, Vec<usize>), DatasetError> {
    if n == 0 || classes == 0 || dim == 0 || !(spread > 0.0) {
        return Err(DatasetError::InvalidParams(format!(
            "gaussian_blobs(n={n}, classes={classes}, dim={dim}, spread={spread})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| rand::Rng::random_range(&mut rng, -5.0..5.0)).collect())
        .collect();
    let gauss = Normal::new(0.0, spread).expect("valid std");
    let mut pts = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        pts.push(centers[c].iter().map(|m| m + gauss.sample(&mut rng)).collect());
        labels.push(c);
    }
    Ok((pts, labels))
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, DatasetError> {
    let io_err = |e: std::io::Error| DatasetError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let bytes = std::fs::read(path).map_err(io_err)?;
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(bytes.as_slice())
            .read_to_end(&mut out)
            .map_err(io_err)?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32, DatasetError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DatasetError::Truncated {
            offset,
            needed: 4,
            len: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<(), DatasetError> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(DatasetError::BadMagic {
            offset: 0,
            found,
            expected,
        });
    }
    Ok(())
}

/// Parses an unsigned-byte 3-D IDX file into `([count, rows, cols], pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<([usize; 3], Vec<u8>), DatasetError> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let needed = n * rows * cols;
    let payload = bytes.get(16..16 + needed).ok_or(DatasetError::Truncated {
        offset: 16,
        needed,
        len: bytes.len(),
    })?;
    Ok(([n, rows, cols], payload.to_vec()))
}

/// Parses an unsigned-byte 1-D IDX label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, DatasetError> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    let payload = bytes.get(8..8 + n).ok_or(DatasetError::Truncated {
        offset: 8,
        needed: n,
        len: bytes.len(),
    })?;
    Ok(payload.to_vec())
}

/// Reads feature rows from a CSV file with a mandatory header containing `label`.
pub fn read_csv_vectors(path: &Path) -> Result<(Vec<Vec<f64>>, Vec<usize>), DatasetError> {
    let file = std::fs::File::open(path).map_err(|e| DatasetError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    parse_csv_vectors(file)
}

pub fn parse_csv_vectors(reader: impl Read) -> Result<(Vec<Vec<f64>>, Vec<usize>), DatasetError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| DatasetError::InvalidParams(e.to_string()))?
        .clone();
    let label_col = header
        .iter()
        .position(|h| h.trim() == "label")
        .ok_or(DatasetError::MissingLabelColumn)?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| DatasetError::InvalidParams(e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(DatasetError::RaggedRow {
                line,
                expected: header.len(),
                got: rec.len(),
            });
        }
        let mut feats = Vec::with_capacity(rec.len() - 1);
        for (column, field) in rec.iter().enumerate() {
            let bad = || DatasetError::BadValue {
                line,
                column,
                value: field.to_string(),
            };
            if column == label_col {
                labels.push(field.trim().parse::<usize>().map_err(|_| bad())?);
            } else {
                let v = field.trim().parse::<f64>().map_err(|_| bad())?;
                if !v.is_finite() {
                    return Err(bad());
                }
                feats.push(v);
            }
        }
        rows.push(feats);
    }
    Ok((rows, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_moons_is_deterministic() {
        let a = two_moons(2000, 0.1, 7).unwrap();
        let b = two_moons(2000, 0.1, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.1.iter().filter(|&&l| l == 1).count(), 1000);
        let c = two_moons(2000, 0.1, 8).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn idx_wrong_magic_names_offset() {
        let mut bytes = vec![0, 0, 8, 1, 0, 0, 0, 2, 0, 0, 0, 2];
        let err = parse_idx_images(&bytes).unwrap_err();
        assert!(matches!(err, DatasetError::BadMagic { offset: 0, .. }));
        assert!(err.to_string().contains("offset 0"));
        bytes[3] = 3;
        bytes.extend_from_slice(&[0, 0, 0, 2, 7]);
        assert!(matches!(parse_idx_images(&bytes), Err(DatasetError::Truncated { .. })));
    }

    #[test]
    fn idx_round_trip() {
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        for v in [2u32, 2, 3] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        img.extend((0..12).map(|v| v as u8));
        let (dims, px) = parse_idx_images(&img).unwrap();
        assert_eq!(dims, [2, 2, 3]);
        assert_eq!(px[11], 11);
        let mut lab = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        lab.extend_from_slice(&2u32.to_be_bytes());
        lab.extend_from_slice(&[7, 3]);
        assert_eq!(parse_idx_labels(&lab).unwrap(), vec![7, 3]);
    }

    #[test]
    fn csv_errors_are_distinct() {
        let ok = "a,label,b\n1.0,0,2.0\n\"3.5\",1,4\n";
        let (rows, labels) = parse_csv_vectors(ok.as_bytes()).unwrap();
        assert_eq!(rows, vec![vec![1.0, 2.0], vec![3.5, 4.0]]);
        assert_eq!(labels, vec![0, 1]);
        assert!(matches!(
            parse_csv_vectors("a,b\n1,2\n".as_bytes()),
            Err(DatasetError::MissingLabelColumn)
        ));
        assert!(matches!(
            parse_csv_vectors("a,label\n1,0\n1,0,3\n".as_bytes()),
            Err(DatasetError::RaggedRow { line: 3, .. })
        ));
        assert!(matches!(
            parse_csv_vectors("a,label\nx,0\n".as_bytes()),
            Err(DatasetError::BadValue { .. })
        ));
    }

    #[test]
    fn label_out_of_range_is_reported() {
        let err = Dataset::new(vec![Tensor::<f64>::zeros(&[2])], vec![3], 2).unwrap_err();
        assert!(matches!(err, DatasetError::LabelOutOfRange { label: 3, .. }));
    }
}
