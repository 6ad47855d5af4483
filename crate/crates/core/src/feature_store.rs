//! On-disk feature datasets and the per-sample quantities derived from them.
//!
//! A dataset directory holds a `manifest.json` plus little-endian binary
//! blobs:
//!
//! | file               | contents                               |
//! |--------------------|----------------------------------------|
//! | `labels.bin`       | `M` x `u8`, values in {0, 1}           |
//! | `subset_ids.bin`   | `M` x `u16`, values in [1, H]          |
//! | `final_logits.bin` | `M x 2` x `f32`, row-major             |
//! | `layer_<l>.bin`    | `M x d_l` x `f32`, row-major, l = 1..L |

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    #[serde(rename = "M")]
    pub sample_count: usize,
    #[serde(rename = "L")]
    pub layer_count: usize,
    #[serde(rename = "H")]
    pub subset_count: usize,
    pub layer_dims: Vec<usize>,
    pub files: ManifestFiles,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFiles {
    pub labels: String,
    pub final_logits: String,
    pub subset_ids: String,
    pub layers: Vec<String>,
}

impl ManifestFiles {
    fn standard(layer_count: usize) -> Self {
        ManifestFiles {
            labels: "labels.bin".into(),
            final_logits: "final_logits.bin".into(),
            subset_ids: "subset_ids.bin".into(),
            layers: (1..=layer_count).map(|l| format!("layer_{l}.bin")).collect(),
        }
    }
}

/// Layerwise features, final logits, labels and mixture membership of `M`
/// samples evaluated by a fixed binary classifier.
///
/// Immutable once constructed; every constructor validates the full set of
/// shape and value invariants.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    layers: Vec<Array2<f32>>,
    final_logits: Array2<f32>,
    labels: Vec<u8>,
    subset_ids: Vec<u16>,
    subset_count: usize,
    metadata: Option<serde_json::Value>,
}

impl FeatureDataset {
    pub fn new(
        layers: Vec<Array2<f32>>,
        final_logits: Array2<f32>,
        labels: Vec<u8>,
        subset_ids: Vec<u16>,
        subset_count: usize,
    ) -> Result<Self> {
        let m = labels.len();
        if m == 0 {
            return Err(Error::Shape("dataset has no samples".into()));
        }
        if layers.is_empty() {
            return Err(Error::Shape("dataset has no layers".into()));
        }
        if subset_count == 0 {
            return Err(Error::Shape("subset count H must be positive".into()));
        }
        if final_logits.dim() != (m, NUM_CLASSES) {
            return Err(Error::Shape(format!(
                "final logits have shape {:?}, expected ({m}, {NUM_CLASSES})",
                final_logits.dim()
            )));
        }
        if subset_ids.len() != m {
            return Err(Error::Shape(format!(
                "{} subset ids for {m} samples",
                subset_ids.len()
            )));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.nrows() != m || layer.ncols() == 0 {
                return Err(Error::Shape(format!(
                    "layer {} has shape {:?}, expected ({m}, d > 0)",
                    l + 1,
                    layer.dim()
                )));
            }
            check_finite(layer.view(), &format!("layer {}", l + 1))?;
        }
        check_finite(final_logits.view(), "final logits")?;
        for (row, &value) in labels.iter().enumerate() {
            if value > 1 {
                return Err(Error::InvalidLabel { row, value });
            }
        }
        let mut counts = vec![0usize; subset_count];
        for (row, &value) in subset_ids.iter().enumerate() {
            if value == 0 || value as usize > subset_count {
                return Err(Error::InvalidSubset {
                    row,
                    value,
                    subsets: subset_count,
                });
            }
            counts[value as usize - 1] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::EmptySubset(empty + 1));
        }
        Ok(FeatureDataset {
            layers,
            final_logits,
            labels,
            subset_ids,
            subset_count,
            metadata: None,
        })
    }

    pub fn with_metadata(mut self, metadata: serde_json::Value) -> Self {
        self.metadata = Some(metadata);
        self
    }

    pub fn sample_count(&self) -> usize {
        self.labels.len()
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn subset_count(&self) -> usize {
        self.subset_count
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.ncols()).collect()
    }

    /// Features of hidden layer `layer` (1-based).
    pub fn layer(&self, layer: usize) -> ArrayView2<'_, f32> {
        self.layers[layer - 1].view()
    }

    pub fn layers(&self) -> &[Array2<f32>] {
        &self.layers
    }

    pub fn final_logits(&self) -> ArrayView2<'_, f32> {
        self.final_logits.view()
    }

    pub fn final_logit_row(&self, i: usize) -> [f64; NUM_CLASSES] {
        let row = self.final_logits.row(i);
        [row[0] as f64, row[1] as f64]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn subset_ids(&self) -> &[u16] {
        &self.subset_ids
    }

    pub fn metadata(&self) -> Option<&serde_json::Value> {
        self.metadata.as_ref()
    }

    /// Number of samples in each subset, index 0 holding subset 1.
    pub fn subset_sizes(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.subset_count];
        for &id in &self.subset_ids {
            counts[id as usize - 1] += 1;
        }
        counts
    }

    /// SHA-256 over shapes and raw contents; identifies the data a probe set
    /// or score matrix was derived from.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.sample_count() as u64).to_le_bytes());
        hasher.update((self.subset_count as u64).to_le_bytes());
        for layer in &self.layers {
            hasher.update((layer.ncols() as u64).to_le_bytes());
            for v in layer.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        for v in self.final_logits.iter() {
            hasher.update(v.to_le_bytes());
        }
        hasher.update(&self.labels);
        for id in &self.subset_ids {
            hasher.update(id.to_le_bytes());
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: FORMAT_VERSION,
            sample_count: self.sample_count(),
            layer_count: self.layer_count(),
            subset_count: self.subset_count,
            layer_dims: self.layer_dims(),
            files: ManifestFiles::standard(self.layer_count()),
            metadata: self.metadata.clone(),
        }
    }
}

fn check_finite(matrix: ArrayView2<'_, f32>, what: &str) -> Result<()> {
    for (row, values) in matrix.outer_iter().enumerate() {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: what.to_string(),
                row,
            });
        }
    }
    Ok(())
}

/// Writes `dataset` into `dir`, creating the directory if needed.
pub fn write_dataset(dataset: &FeatureDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dataset.manifest();
    write_file(&dir.join(&manifest.files.labels), &dataset.labels)?;
    let subset_bytes: Vec<u8> = dataset
        .subset_ids
        .iter()
        .flat_map(|id| id.to_le_bytes())
        .collect();
    write_file(&dir.join(&manifest.files.subset_ids), &subset_bytes)?;
    write_file(
        &dir.join(&manifest.files.final_logits),
        &f32_bytes(dataset.final_logits.view()),
    )?;
    for (layer, file) in dataset.layers.iter().zip(&manifest.files.layers) {
        write_file(&dir.join(file), &f32_bytes(layer.view()))?;
    }
    let json = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| Error::json(dir.join(MANIFEST_FILE), e))?;
    write_file(&dir.join(MANIFEST_FILE), &json)
}

/// Loads and validates a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<FeatureDataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let raw = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_slice(&raw).map_err(|e| Error::json(&manifest_path, e))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::FormatVersion(manifest.format_version));
    }
    let m = manifest.sample_count;
    let l = manifest.layer_count;
    if manifest.layer_dims.len() != l || manifest.files.layers.len() != l {
        return Err(Error::Shape(format!(
            "manifest declares L = {l} but lists {} dims and {} layer files",
            manifest.layer_dims.len(),
            manifest.files.layers.len()
        )));
    }

    let labels = read_sized(dir, &manifest.files.labels, "labels", m)?;
    let subset_raw = read_sized(dir, &manifest.files.subset_ids, "subset ids", m * 2)?;
    let subset_ids = subset_raw
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    let logits_raw = read_sized(
        dir,
        &manifest.files.final_logits,
        "final logits",
        m * NUM_CLASSES * 4,
    )?;
    let final_logits = f32_matrix(&logits_raw, m, NUM_CLASSES);

    let mut layers = Vec::with_capacity(l);
    for (idx, (file, &d)) in manifest
        .files
        .layers
        .iter()
        .zip(&manifest.layer_dims)
        .enumerate()
    {
        let what = format!("layer {} ({file})", idx + 1);
        let raw = read_sized(dir, file, &what, m * d * 4)?;
        layers.push(f32_matrix(&raw, m, d));
    }

    let dataset = FeatureDataset::new(
        layers,
        final_logits,
        labels,
        subset_ids,
        manifest.subset_count,
    )?;
    Ok(match manifest.metadata {
        Some(meta) => dataset.with_metadata(meta),
        None => dataset,
    })
}

fn read_sized(dir: &Path, file: &str, what: &str, expected: usize) -> Result<Vec<u8>> {
    let path: PathBuf = dir.join(file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() != expected {
        return Err(Error::SizeMismatch {
            what: what.to_string(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn f32_bytes(matrix: ArrayView2<'_, f32>) -> Vec<u8> {
    matrix.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn f32_matrix(bytes: &[u8], rows: usize, cols: usize) -> Array2<f32> {
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Array2::from_shape_vec((rows, cols), values).expect("length checked against shape")
}

/// 0/1 loss of the classifier on every sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrectnessFlags {
    errors: Vec<bool>,
}

impl CorrectnessFlags {
    pub fn from_errors(errors: Vec<bool>) -> Self {
        CorrectnessFlags { errors }
    }

    pub fn errors(&self) -> &[bool] {
        &self.errors
    }

    pub fn len(&self) -> usize {
        self.errors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.errors.is_empty()
    }

    pub fn error_count(&self) -> usize {
        self.errors.iter().filter(|&&e| e).count()
    }

    /// Mass-weighted error rate.
    pub fn error_rate(&self, masses: &SampleMasses) -> f64 {
        self.errors
            .iter()
            .zip(masses.masses())
            .filter(|(&e, _)| e)
            .map(|(_, &w)| w)
            .sum()
    }
}

/// Predicted class of a binary logit row; ties resolve to class 0.
pub fn predicted_class(logits: ArrayView1<'_, f32>) -> u8 {
    if logits[1] > logits[0] {
        1
    } else {
        0
    }
}

pub fn derive_correctness(dataset: &FeatureDataset) -> CorrectnessFlags {
    let errors = dataset
        .final_logits
        .outer_iter()
        .zip(&dataset.labels)
        .map(|(row, &label)| predicted_class(row) != label)
        .collect();
    CorrectnessFlags { errors }
}

/// Per-sample probability masses; each of the `H` subsets carries `1/H`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMasses {
    masses: Vec<f64>,
}

impl SampleMasses {
    pub fn uniform(m: usize) -> Self {
        SampleMasses {
            masses: vec![1.0 / m as f64; m],
        }
    }

    /// Wraps explicit masses; they must be positive and sum to one.
    pub fn from_masses(masses: Vec<f64>) -> Result<Self> {
        if masses.is_empty() || masses.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidArgument(
                "masses must be positive and finite".into(),
            ));
        }
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "masses sum to {total}, expected 1"
            )));
        }
        Ok(SampleMasses { masses })
    }

    /// Masses `1 / (H * N_m)` from subset memberships in `[1, H]`.
    pub fn from_subsets(subset_ids: &[u16], subset_count: usize) -> Result<Self> {
        let mut counts = vec![0usize; subset_count];
        for (row, &id) in subset_ids.iter().enumerate() {
            if id == 0 || id as usize > subset_count {
                return Err(Error::InvalidSubset {
                    row,
                    value: id,
                    subsets: subset_count,
                });
            }
            counts[id as usize - 1] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::EmptySubset(empty + 1));
        }
        let h = subset_count as f64;
        let masses = subset_ids
            .iter()
            .map(|&id| 1.0 / (h * counts[id as usize - 1] as f64))
            .collect();
        Ok(SampleMasses { masses })
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }
}

pub fn compute_masses(dataset: &FeatureDataset) -> SampleMasses {
    SampleMasses::from_subsets(&dataset.subset_ids, dataset.subset_count)
        .expect("subset ids validated at construction")
}

/// Indices of correctly (`U+`) and wrongly (`U-`) classified samples.
pub fn split_by_correctness(flags: &CorrectnessFlags) -> (Vec<usize>, Vec<usize>) {
    let mut correct = Vec::new();
    let mut wrong = Vec::new();
    for (i, &e) in flags.errors.iter().enumerate() {
        if e {
            wrong.push(i);
        } else {
            correct.push(i);
        }
    }
    (correct, wrong)
}
