//! Seeded synthetic feature datasets for demos and end-to-end tests.
//!
//! Correctness is drawn first; final logits and hidden-layer features are
//! then generated conditionally on it, so each generator controls exactly how
//! informative every score column is:
//!
//! - `separable`: layer 1 separates correct from wrong samples by a margin;
//!   final logits carry no signal.
//! - `pathological`: final-logit margins are larger for wrong samples, while
//!   layers 1 and 2 each carry an independent, overlapping signal.
//! - `planted-k`: layer `l` holds `k_l` well-separated clusters and nothing
//!   else.
//! - `mixture`: unequal-size subsets with increasing error rates; final
//!   logits are informative on subset 1 and inverted on the shifted subsets.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::FeatureDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    Separable,
    Pathological,
    PlantedK,
    Mixture,
}

impl SyntheticKind {
    pub fn name(self) -> &'static str {
        match self {
            SyntheticKind::Separable => "separable",
            SyntheticKind::Pathological => "pathological",
            SyntheticKind::PlantedK => "planted-k",
            SyntheticKind::Mixture => "mixture",
        }
    }

    fn default_error_rate(self) -> f64 {
        match self {
            SyntheticKind::Separable => 0.1,
            SyntheticKind::Pathological => 0.3,
            SyntheticKind::PlantedK => 0.2,
            SyntheticKind::Mixture => 0.25,
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            SyntheticKind::Separable,
            SyntheticKind::Pathological,
            SyntheticKind::PlantedK,
            SyntheticKind::Mixture,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown synthetic spec {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub samples: usize,
    pub layers: usize,
    pub subsets: usize,
    pub seed: u64,
    pub dim: usize,
    /// Overall error rate; for `mixture` the mean of the per-subset rates.
    pub error_rate: Option<f64>,
    /// Planted cluster counts, repeated cyclically over layers.
    pub ks: Vec<usize>,
}

impl SyntheticSpec {
    pub fn new(kind: SyntheticKind, samples: usize, layers: usize, seed: u64) -> Self {
        SyntheticSpec {
            kind,
            samples,
            layers,
            subsets: 1,
            seed,
            dim: 8,
            error_rate: None,
            ks: vec![3],
        }
    }

    pub fn error_rate(&self) -> f64 {
        self.error_rate.unwrap_or(self.kind.default_error_rate())
    }

    fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.layers == 0 || self.subsets == 0 {
            return Err(Error::InvalidArgument(
                "samples, layers and subsets must be positive".into(),
            ));
        }
        if self.subsets > self.samples {
            return Err(Error::InvalidArgument(format!(
                "{} subsets cannot all be populated by {} samples",
                self.subsets, self.samples
            )));
        }
        if self.subsets > u16::MAX as usize {
            return Err(Error::InvalidArgument("too many subsets".into()));
        }
        let rate = self.error_rate();
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("error rate {rate} outside [0, 1]")));
        }
        let k_max = self.ks.iter().copied().max().unwrap_or(0);
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::InvalidArgument("planted k values must be positive".into()));
        }
        let needed = if self.kind == SyntheticKind::PlantedK { k_max } else { 2 };
        if self.dim < needed {
            return Err(Error::InvalidArgument(format!(
                "feature dimension {} is below the {needed} orthogonal directions needed",
                self.dim
            )));
        }
        Ok(())
    }
}

/// `count` orthonormal directions in `dim` dimensions.
fn orthonormal(rng: &mut ChaCha8Rng, dim: usize, count: usize) -> Vec<Array1<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut basis: Vec<Array1<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = Array1::from_shape_fn(dim, |_| normal.sample(rng));
        for b in &basis {
            let proj = v.dot(b);
            v.scaled_add(-proj, b);
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-6 {
            basis.push(v / norm);
        }
    }
    basis
}

/// How a hidden layer relates to correctness.
#[derive(Debug, Clone, Copy)]
enum LayerSignal {
    /// Mixing weight toward the other class direction: correct in
    /// `[0, correct_max]`, wrong in `[wrong_min, 1]`.
    Mixing { correct_max: f64, wrong_min: f64 },
    Uninformative,
    Planted(usize),
}

const FEATURE_NOISE: f64 = 0.05;

pub fn generate(spec: &SyntheticSpec) -> Result<FeatureDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let m = spec.samples;
    let h = spec.subsets;

    // mixture subsets have sizes proportional to 1..=H so masses differ
    let subset_ids: Vec<u16> = match spec.kind {
        SyntheticKind::Mixture => {
            let total: usize = (1..=h).sum();
            let mut ids = Vec::with_capacity(m);
            for s in 1..=h {
                let share = if s == h { m - ids.len() } else { (m * s / total).max(1) };
                ids.extend(std::iter::repeat_n(s as u16, share));
            }
            ids.truncate(m);
            ids
        }
        _ => (0..m).map(|i| (i % h + 1) as u16).collect(),
    };

    let base_rate = spec.error_rate();
    let subset_rate = |s: u16| -> f64 {
        if spec.kind != SyntheticKind::Mixture || h == 1 {
            return base_rate;
        }
        // spread rates linearly around the base rate
        let frac = (s as f64 - 1.0) / (h as f64 - 1.0);
        (base_rate * (0.2 + 1.6 * frac)).clamp(0.0, 1.0)
    };

    let wrong: Vec<bool> = subset_ids
        .iter()
        .map(|&s| rng.random::<f64>() < subset_rate(s))
        .collect();
    let labels: Vec<u8> = (0..m).map(|_| rng.random_range(0..2u8)).collect();
    let predicted: Vec<usize> = labels
        .iter()
        .zip(&wrong)
        .map(|(&y, &e)| if e { 1 - y as usize } else { y as usize })
        .collect();

    let mut final_logits = Array2::<f32>::zeros((m, 2));
    for i in 0..m {
        let (lo, hi) = match (spec.kind, wrong[i]) {
            (SyntheticKind::Pathological, false) => (0.1, 2.5),
            (SyntheticKind::Pathological, true) => (1.5, 4.0),
            (SyntheticKind::Mixture, e) if subset_ids[i] == 1 => {
                if e {
                    (0.1, 2.0)
                } else {
                    (1.5, 4.0)
                }
            }
            (SyntheticKind::Mixture, e) => {
                if e {
                    (1.5, 4.0)
                } else {
                    (0.1, 2.5)
                }
            }
            _ => (0.1, 4.0),
        };
        let margin = rng.random_range(lo..hi);
        let offset = rng.random_range(-1.0..1.0);
        let p = predicted[i];
        final_logits[[i, p]] = (offset + margin / 2.0) as f32;
        final_logits[[i, 1 - p]] = (offset - margin / 2.0) as f32;
    }

    let signals: Vec<LayerSignal> = (0..spec.layers)
        .map(|l| match spec.kind {
            SyntheticKind::Separable if l == 0 => LayerSignal::Mixing {
                correct_max: 0.3,
                wrong_min: 0.7,
            },
            SyntheticKind::Pathological | SyntheticKind::Mixture if l < 2 => LayerSignal::Mixing {
                correct_max: 0.6,
                wrong_min: 0.4,
            },
            SyntheticKind::PlantedK => LayerSignal::Planted(spec.ks[l % spec.ks.len()]),
            _ => LayerSignal::Uninformative,
        })
        .collect();

    let noise = Normal::new(0.0, FEATURE_NOISE).expect("positive std");
    let mut layers = Vec::with_capacity(spec.layers);
    for signal in signals {
        let directions = match signal {
            LayerSignal::Planted(k) => orthonormal(&mut rng, spec.dim, k),
            _ => orthonormal(&mut rng, spec.dim, 2),
        };
        let mut features = Array2::<f32>::zeros((m, spec.dim));
        for i in 0..m {
            let mut v = match signal {
                LayerSignal::Planted(k) => directions[rng.random_range(0..k)].clone(),
                LayerSignal::Mixing {
                    correct_max,
                    wrong_min,
                } => {
                    let t = if wrong[i] {
                        rng.random_range(wrong_min..=1.0)
                    } else {
                        rng.random_range(0.0..=correct_max)
                    };
                    &directions[predicted[i]] + &(&directions[1 - predicted[i]] * t)
                }
                LayerSignal::Uninformative => {
                    let t = rng.random_range(0.0..=1.0);
                    let c = rng.random_range(0..2usize);
                    &directions[c] + &(&directions[1 - c] * t)
                }
            };
            let norm = v.dot(&v).sqrt();
            v /= norm;
            let scale = rng.random_range(0.5..3.0);
            for (j, x) in v.iter().enumerate() {
                features[[i, j]] = ((x + noise.sample(&mut rng)) * scale) as f32;
            }
        }
        layers.push(features);
    }

    let metadata = serde_json::json!({ "generator": spec });
    Ok(FeatureDataset::new(layers, final_logits, labels, subset_ids, h)?.with_metadata(metadata))
}
