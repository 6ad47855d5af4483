//! Logit-based confidence score functions and the layerwise score matrix.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::clustering::ProbeSet;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::feature_store::{CorrectnessFlags, FeatureDataset, SampleMasses};
use crate::sc_eval;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CsfKind {
    /// maximum softmax probability
    Msp,
    /// softmax margin
    Sm,
    /// max logit
    Ml,
    /// logit margin
    Lm,
    /// negative entropy
    Ne,
    /// negative Gini index
    Ngi,
}

impl CsfKind {
    pub const ALL: [CsfKind; 6] = [
        CsfKind::Msp,
        CsfKind::Sm,
        CsfKind::Ml,
        CsfKind::Lm,
        CsfKind::Ne,
        CsfKind::Ngi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CsfKind::Msp => "msp",
            CsfKind::Sm => "sm",
            CsfKind::Ml => "ml",
            CsfKind::Lm => "lm",
            CsfKind::Ne => "ne",
            CsfKind::Ngi => "ngi",
        }
    }
}

impl fmt::Display for CsfKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CsfKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CsfKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown confidence function {s:?}")))
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest entry (lowest index on ties) and the largest entry
/// among the remaining ones.
fn top_two(values: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    let runner_up = values
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != best)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    (best, runner_up)
}

/// Confidence of the predicted class `argmax z` under `kind`.
pub fn csf_score(kind: CsfKind, z: &[f64]) -> Result<f64> {
    if z.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "confidence functions need at least 2 logits, got {}",
            z.len()
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite logit".into()));
    }
    let score = match kind {
        CsfKind::Ml => z[top_two(z).0],
        CsfKind::Lm => {
            let (pred, second) = top_two(z);
            z[pred] - second
        }
        CsfKind::Msp => {
            let probs = softmax(z);
            probs[top_two(z).0]
        }
        CsfKind::Sm => {
            let probs = softmax(z);
            let (pred, _) = top_two(z);
            let second = probs
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != pred)
                .map(|(_, &p)| p)
                .fold(f64::NEG_INFINITY, f64::max);
            probs[pred] - second
        }
        CsfKind::Ne => softmax(z)
            .into_iter()
            .filter(|&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum(),
        CsfKind::Ngi => softmax(z).into_iter().map(|p| p * p).sum::<f64>() - 1.0,
    };
    Ok(score)
}

/// Result of centering and `l_p`-normalizing a logit vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PNormed {
    pub values: Vec<f64>,
    /// The input was constant; `values` is the unchanged input.
    pub degenerate: bool,
}

pub fn pnorm_transform(z: &[f64], p: f64) -> Result<PNormed> {
    if !(p > 0.0 && p.is_finite()) {
        return Err(Error::InvalidArgument(format!("p must be positive, got {p}")));
    }
    let mean = z.iter().sum::<f64>() / z.len() as f64;
    let centered: Vec<f64> = z.iter().map(|&v| v - mean).collect();
    let norm = centered
        .iter()
        .map(|v| v.abs().powf(p))
        .sum::<f64>()
        .powf(1.0 / p);
    if !norm.is_finite() || norm <= 0.0 {
        return Ok(PNormed {
            values: z.to_vec(),
            degenerate: true,
        });
    }
    Ok(PNormed {
        values: centered.into_iter().map(|v| v / norm).collect(),
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PNormConfig {
    pub enabled: bool,
    pub p: Option<f64>,
}

impl Default for PNormConfig {
    fn default() -> Self {
        PNormConfig::identity()
    }
}

impl PNormConfig {
    pub const DEFAULT_GRID: [f64; 8] = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];

    pub fn identity() -> Self {
        PNormConfig {
            enabled: false,
            p: None,
        }
    }

    pub fn with_p(p: f64) -> Self {
        PNormConfig {
            enabled: true,
            p: Some(p),
        }
    }

    /// Logits to feed the confidence function; constant vectors pass through.
    pub fn apply(&self, z: &[f64]) -> Result<Vec<f64>> {
        match (self.enabled, self.p) {
            (true, Some(p)) => Ok(pnorm_transform(z, p)?.values),
            _ => Ok(z.to_vec()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PNormCandidate {
    pub p: Option<f64>,
    pub aurc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PNormSearch {
    pub config: PNormConfig,
    pub candidates: Vec<PNormCandidate>,
}

/// Chooses the logit normalization minimizing validation AURC of the final
/// logit score. The identity is evaluated first and grid values in
/// increasing order, and only a strictly smaller AURC replaces the incumbent.
pub fn grid_search_p(
    logits: ArrayView2<'_, f64>,
    grid: &[f64],
    kind: CsfKind,
    masses: &SampleMasses,
    flags: &CorrectnessFlags,
) -> Result<PNormSearch> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty p grid".into()));
    }
    let mut ps: Vec<f64> = grid.to_vec();
    ps.sort_by(f64::total_cmp);
    ps.dedup();

    let configs = std::iter::once(PNormConfig::identity()).chain(ps.into_iter().map(PNormConfig::with_p));
    let mut candidates = Vec::new();
    let mut best: Option<(PNormConfig, f64)> = None;
    for config in configs {
        let scores = logits
            .outer_iter()
            .map(|row| {
                let z = config.apply(row.as_slice().expect("standard layout"))?;
                csf_score(kind, &z)
            })
            .collect::<Result<Vec<f64>>>()?;
        let aurc = sc_eval::aurc(&scores, flags.errors(), masses)?;
        candidates.push(PNormCandidate { p: config.p, aurc });
        if best.is_none_or(|(_, b)| aurc < b) {
            best = Some((config, aurc));
        }
    }
    Ok(PNormSearch {
        config: best.expect("identity always evaluated").0,
        candidates,
    })
}

/// `M x (L + 1)` confidence scores: one column per hidden layer probe plus the
/// classifier's own final logits in the last column.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    rows: usize,
    columns: usize,
    data: Vec<f64>,
    pub kind: CsfKind,
    pub pnorm: PNormConfig,
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ScoreHeader {
    format_version: u32,
    #[serde(rename = "M")]
    rows: usize,
    #[serde(rename = "L")]
    layers: usize,
    csf_kind: CsfKind,
    pnorm: PNormConfig,
    provenance: String,
    blob: String,
}

impl ScoreMatrix {
    pub fn from_rows(
        rows: Vec<Vec<f64>>,
        kind: CsfKind,
        pnorm: PNormConfig,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let columns = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || columns < 2 {
            return Err(Error::Shape("score matrix needs at least one row and two columns".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * columns);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != columns {
                return Err(Error::DimensionMismatch {
                    expected: columns,
                    found: row.len(),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "score matrix".into(),
                    row: i,
                });
            }
            data.extend_from_slice(row);
        }
        Ok(ScoreMatrix {
            rows: rows.len(),
            columns,
            data,
            kind,
            pnorm,
            provenance: provenance.into(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// `L + 1`.
    pub fn columns(&self) -> usize {
        self.columns
    }

    pub fn layer_count(&self) -> usize {
        self.columns - 1
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.columns..(i + 1) * self.columns]
    }

    pub fn get(&self, i: usize, column: usize) -> f64 {
        self.data[i * self.columns + column]
    }

    pub fn column(&self, column: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, column)).collect()
    }

    /// Scores of the classifier's final logits.
    pub fn baseline_column(&self) -> Vec<f64> {
        self.column(self.columns - 1)
    }

    pub fn header_path(blob: &Path) -> PathBuf {
        blob.with_extension("json")
    }

    /// Writes the row-major `f64` blob to `blob` and its JSON header next to it.
    pub fn write(&self, blob: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(blob, bytes).map_err(|e| Error::io(blob, e))?;
        let header = ScoreHeader {
            format_version: 1,
            rows: self.rows,
            layers: self.layer_count(),
            csf_kind: self.kind,
            pnorm: self.pnorm,
            provenance: self.provenance.clone(),
            blob: blob
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
        };
        let header_path = Self::header_path(blob);
        let json = serde_json::to_vec_pretty(&header).map_err(|e| Error::json(&header_path, e))?;
        fs::write(&header_path, json).map_err(|e| Error::io(&header_path, e))
    }

    /// Reads a matrix given either its blob or its JSON header path.
    pub fn read(path: &Path) -> Result<Self> {
        let header_path = if path.extension().is_some_and(|e| e == "json") {
            path.to_path_buf()
        } else {
            Self::header_path(path)
        };
        let raw = fs::read(&header_path).map_err(|e| Error::io(&header_path, e))?;
        let header: ScoreHeader =
            serde_json::from_slice(&raw).map_err(|e| Error::json(&header_path, e))?;
        if header.format_version != 1 {
            return Err(Error::FormatVersion(header.format_version));
        }
        let blob = header_path.with_file_name(&header.blob);
        let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
        let columns = header.layers + 1;
        let expected = header.rows * columns * 8;
        if bytes.len() != expected {
            return Err(Error::SizeMismatch {
                what: format!("score matrix {}", blob.display()),
                expected,
                found: bytes.len(),
            });
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "score matrix".into(),
                row: pos / columns,
            });
        }
        Ok(ScoreMatrix {
            rows: header.rows,
            columns,
            data,
            kind: header.csf_kind,
            pnorm: header.pnorm,
            provenance: header.provenance,
        })
    }
}

/// Scores every sample at every probed layer and at the final logits.
pub fn build_score_matrix(
    dataset: &FeatureDataset,
    probes: &ProbeSet,
    kind: CsfKind,
    pnorm: PNormConfig,
    exec: Exec,
) -> Result<ScoreMatrix> {
    probes.check_compatible(dataset)?;
    let layer_count = dataset.layer_count();
    let rows = exec.map(dataset.sample_count(), |i| -> Result<Vec<f64>> {
        let mut row = Vec::with_capacity(layer_count + 1);
        for (l, probe) in probes.layers().iter().enumerate() {
            let h: Vec<f64> = dataset.layers()[l].row(i).iter().map(|&v| v as f64).collect();
            let z = pnorm.apply(&probe.ulp_logits(&h)?)?;
            row.push(csf_score(kind, &z)?);
        }
        let z = pnorm.apply(&dataset.final_logit_row(i))?;
        row.push(csf_score(kind, &z)?);
        Ok(row)
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    ScoreMatrix::from_rows(rows, kind, pnorm, probes.dataset_hash.clone())
}
