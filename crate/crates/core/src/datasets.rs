//! Dataset ingestion and generation: IDX image/label files, synthetic
//! Gaussian blobs for fast experiments, and the annotation CSV interchange
//! format.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotator_sim::AnnotationTable;
use crate::error::{Error, Result};
use crate::numkit::RngState;

/// Clean examples: feature vectors plus ground-truth class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    input_dim: usize,
    num_classes: usize,
    features: Vec<Vec<f64>>,
    gt_labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(
        features: Vec<Vec<f64>>,
        gt_labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if features.len() != gt_labels.len() {
            return Err(Error::shape(format!(
                "{} feature vectors vs {} labels",
                features.len(),
                gt_labels.len()
            )));
        }
        let input_dim = features
            .first()
            .ok_or_else(|| Error::invalid("dataset has no examples"))?
            .len();
        if input_dim == 0 {
            return Err(Error::invalid("feature vectors are empty"));
        }
        if let Some(bad) = features.iter().position(|f| f.len() != input_dim) {
            return Err(Error::shape(format!(
                "example {bad} has {} features, expected {input_dim}",
                features[bad].len()
            )));
        }
        if let Some(&bad) = gt_labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(LabeledDataset {
            input_dim,
            num_classes,
            features,
            gt_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.gt_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt_labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self, n: usize) -> &[f64] {
        &self.features[n]
    }

    pub fn label(&self, n: usize) -> usize {
        self.gt_labels[n]
    }

    pub fn labels(&self) -> &[usize] {
        &self.gt_labels
    }

    /// New dataset holding the given examples (cloned), in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<LabeledDataset> {
        if let Some(&bad) = indices.iter().find(|&&n| n >= self.len()) {
            return Err(Error::invalid(format!("subset index {bad} out of range")));
        }
        LabeledDataset::new(
            indices.iter().map(|&n| self.features[n].clone()).collect(),
            indices.iter().map(|&n| self.gt_labels[n]).collect(),
            self.num_classes,
        )
    }

    /// Writes `example_id,f0,...,f_{d-1}` rows.
    pub fn save_features_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let header: Vec<String> = (0..self.input_dim).map(|d| format!("f{d}")).collect();
        writeln!(out, "example_id,{}", header.join(",")).expect("string write");
        for (n, f) in self.features.iter().enumerate() {
            let cells: Vec<String> = f.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{n},{}", cells.join(",")).expect("string write");
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobConfig {
    pub num_classes: usize,
    pub dim: usize,
    /// Distance from the origin to each class center.
    pub separation: f64,
    /// Isotropic within-class standard deviation.
    pub std: f64,
    pub examples_per_class: usize,
    pub seed: u64,
}

impl BlobConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("blobs need at least 2 classes"));
        }
        if self.dim == 0 {
            return Err(Error::invalid("blob dimension must be positive"));
        }
        if self.num_classes > 2 * self.dim {
            return Err(Error::invalid(format!(
                "{} classes need dim >= {} for distinct axis-aligned centers",
                self.num_classes,
                self.num_classes.div_ceil(2)
            )));
        }
        if !(self.separation > 0.0) || !(self.std > 0.0) {
            return Err(Error::invalid("separation and std must be positive"));
        }
        if self.examples_per_class == 0 {
            return Err(Error::invalid("examples_per_class must be positive"));
        }
        Ok(())
    }
}

/// Isotropic Gaussian blobs, one per class, exactly balanced. Class c is
/// centered at +/- separation along axis (c mod dim): +e_d for the first pass
/// over the axes, -e_d for the second, which keeps all centers distinct for
/// L <= 2*dim. Examples are laid out class-interleaved (0,1,...,L-1,0,1,...)
/// so any prefix is near-balanced, then order is fixed per seed.
pub fn gen_blobs(config: &BlobConfig) -> Result<LabeledDataset> {
    config.validate()?;
    let l = config.num_classes;
    let mut rng = RngState::new(config.seed).substream("blobs");
    let mut features = Vec::with_capacity(l * config.examples_per_class);
    let mut labels = Vec::with_capacity(l * config.examples_per_class);
    for _ in 0..config.examples_per_class {
        for c in 0..l {
            let axis = c % config.dim;
            let sign = if c / config.dim == 0 { 1.0 } else { -1.0 };
            let mut x = vec![0.0; config.dim];
            for (d, xd) in x.iter_mut().enumerate() {
                let mean = if d == axis { sign * config.separation } else { 0.0 };
                *xd = rng.normal(mean, config.std);
            }
            features.push(x);
            labels.push(c);
        }
    }
    LabeledDataset::new(features, labels, l)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], offset: usize, what: &str, path: &Path) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Format(format!(
            "{}: truncated while reading {what}",
            path.display()
        )));
    }
    let mut buf = [0u8; 4];
    buf.copy_from_slice(&bytes[offset..end]);
    Ok(u32::from_be_bytes(buf))
}

/// Loads an IDX image file and its IDX label file. Pixels are scaled by
/// 1/255 into [0,1] and flattened row-major.
pub fn load_idx_pair(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let img_bytes = std::fs::read(images_path)?;
    let magic = read_be_u32(&img_bytes, 0, "image magic", images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}",
            images_path.display()
        )));
    }
    let n = read_be_u32(&img_bytes, 4, "image count", images_path)? as usize;
    let rows = read_be_u32(&img_bytes, 8, "row count", images_path)? as usize;
    let cols = read_be_u32(&img_bytes, 12, "column count", images_path)? as usize;
    let pixels = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| {
            Error::Format(format!("{}: image dimensions overflow", images_path.display()))
        })?;
    if img_bytes.len() != 16 + pixels {
        return Err(Error::Format(format!(
            "{}: image payload is {} bytes, expected {pixels}",
            images_path.display(),
            img_bytes.len().saturating_sub(16)
        )));
    }

    let lbl_bytes = std::fs::read(labels_path)?;
    let magic = read_be_u32(&lbl_bytes, 0, "label magic", labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}",
            labels_path.display()
        )));
    }
    let n_labels = read_be_u32(&lbl_bytes, 4, "label count", labels_path)? as usize;
    if n_labels != n {
        return Err(Error::Format(format!(
            "label count {n_labels} does not match image count {n}"
        )));
    }
    if lbl_bytes.len() != 8 + n {
        return Err(Error::Format(format!(
            "{}: label payload is {} bytes, expected {n}",
            labels_path.display(),
            lbl_bytes.len().saturating_sub(8)
        )));
    }

    let dim = rows * cols;
    let features: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            img_bytes[16 + i * dim..16 + (i + 1) * dim]
                .iter()
                .map(|&b| b as f64 / 255.0)
                .collect()
        })
        .collect();
    let labels: Vec<usize> = lbl_bytes[8..].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1).max(2);
    LabeledDataset::new(features, labels, num_classes)
}

/// Writes `example_id,annotator_0,...` rows with -1 for missing labels.
pub fn save_annotations(table: &AnnotationTable, path: &Path) -> Result<()> {
    let r = table.num_annotators();
    let mut out = String::new();
    let header: Vec<String> = (0..r).map(|i| format!("annotator_{i}")).collect();
    writeln!(out, "example_id,{}", header.join(",")).expect("string write");
    for n in 0..table.num_examples() {
        let cells: Vec<String> = table
            .row(n)
            .iter()
            .map(|l| match l {
                Some(c) => c.to_string(),
                None => "-1".to_string(),
            })
            .collect();
        writeln!(out, "{n},{}", cells.join(",")).expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a table written by `save_annotations`. `num_classes` bounds the
/// valid label range; anything outside it (other than -1) is rejected with
/// the offending line number.
pub fn load_annotations(path: &Path, num_classes: usize) -> Result<AnnotationTable> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty file", path.display())))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"example_id") || cols.len() < 2 {
        return Err(Error::Format(format!(
            "{}:1: header must be example_id,annotator_0,...",
            path.display()
        )));
    }
    let r = cols.len() - 1;
    for (i, c) in cols[1..].iter().enumerate() {
        if *c != format!("annotator_{i}") {
            return Err(Error::Format(format!(
                "{}:1: header column {} is {c:?}, expected annotator_{i}",
                path.display(),
                i + 1
            )));
        }
    }
    let mut labels = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != r + 1 {
            return Err(Error::Format(format!(
                "{}:{}: expected {} cells, found {}",
                path.display(),
                lineno + 1,
                r + 1,
                cells.len()
            )));
        }
        let id: usize = cells[0].trim().parse().map_err(|_| {
            Error::Format(format!(
                "{}:{}: bad example id {:?}",
                path.display(),
                lineno + 1,
                cells[0]
            ))
        })?;
        if id != labels.len() {
            return Err(Error::Format(format!(
                "{}:{}: example id {id} out of order, expected {}",
                path.display(),
                lineno + 1,
                labels.len()
            )));
        }
        let mut row = Vec::with_capacity(r);
        for cell in &cells[1..] {
            let v: i64 = cell.trim().parse().map_err(|_| {
                Error::Format(format!(
                    "{}:{}: not an integer: {cell:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            if v == crate::annotator_sim::MISSING_LABEL {
                row.push(None);
            } else if v >= 0 && (v as usize) < num_classes {
                row.push(Some(v as usize));
            } else {
                return Err(Error::Format(format!(
                    "{}:{}: label {v} out of range for {num_classes} classes",
                    path.display(),
                    lineno + 1
                )));
            }
        }
        labels.push(row);
    }
    AnnotationTable::new(labels, num_classes)
}
