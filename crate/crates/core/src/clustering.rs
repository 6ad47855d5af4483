//! Centroid probes for hidden layers.
//!
//! Each layer's features are l2-normalized and clustered with spherical
//! k-means; the number of centroids is chosen by mean silhouette under cosine
//! distance. Projecting a normalized feature onto the unit centroids gives a
//! vector of cosine similarities that plays the role of logits for that layer.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::feature_store::FeatureDataset;

/// Norms at or below this are treated as zero vectors.
pub const NORM_EPS: f64 = 1e-12;

/// `h / ||h||_2`, or the zero vector when `||h||_2 <= NORM_EPS`.
pub fn normalize(h: &[f64]) -> Result<Vec<f64>> {
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite feature value".into()));
    }
    let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= NORM_EPS {
        return Ok(vec![0.0; h.len()]);
    }
    Ok(h.iter().map(|v| v / norm).collect())
}

fn normalize_rows(features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let mut unit = Array2::zeros(features.dim());
    for (src, mut dst) in features.outer_iter().zip(unit.outer_iter_mut()) {
        let row = normalize(&src.to_vec())?;
        dst.assign(&ArrayView1::from(&row));
    }
    Ok(unit)
}

/// Deterministic child seed for a (base seed, tag) pair (splitmix64 finalizer).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub max_iters: usize,
    pub tol: f64,
    /// Independent seedings per fit; the highest final objective wins.
    pub restarts: usize,
}

impl Default for KMeansParams {
    fn default() -> Self {
        KMeansParams {
            max_iters: 100,
            tol: 1e-6,
            restarts: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    /// `d x K`, unit-norm columns.
    pub centroids: Array2<f64>,
    pub assignments: Vec<usize>,
    /// Total cosine similarity after the initial assignment and after every
    /// update/reassignment round.
    pub objective_trace: Vec<f64>,
}

impl KMeansFit {
    pub fn k(&self) -> usize {
        self.centroids.ncols()
    }

    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("at least one assignment")
    }
}

fn dot(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Best centroid per sample (lowest index on ties) and its cosine similarity.
fn assign(unit: &Array2<f64>, centroids: &Array2<f64>, exec: Exec) -> (Vec<usize>, Vec<f64>) {
    let pairs = exec.map(unit.nrows(), |i| {
        let x = unit.row(i);
        let mut best = (0, dot(x, centroids.column(0)));
        for j in 1..centroids.ncols() {
            let sim = dot(x, centroids.column(j));
            if sim > best.1 {
                best = (j, sim);
            }
        }
        best
    });
    pairs.into_iter().unzip()
}

fn is_nonzero(row: ArrayView1<'_, f64>) -> bool {
    row.iter().any(|&v| v != 0.0)
}

/// k-means++ seeding with cosine distance `1 - cos`.
fn seed_centroids(unit: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let (m, d) = unit.dim();
    let mut centroids = Array2::zeros((d, k));
    let candidates: Vec<usize> = (0..m).filter(|&i| is_nonzero(unit.row(i))).collect();
    if candidates.is_empty() {
        for j in 0..k {
            centroids[[j % d, j]] = 1.0;
        }
        return centroids;
    }
    let first = candidates[rng.random_range(0..candidates.len())];
    centroids.column_mut(0).assign(&unit.row(first));
    let mut best_sim: Vec<f64> = candidates
        .iter()
        .map(|&i| dot(unit.row(i), centroids.column(0)))
        .collect();
    for j in 1..k {
        let weights: Vec<f64> = best_sim.iter().map(|s| (1.0 - s).max(0.0)).collect();
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = candidates.len() - 1;
            for (c, &w) in weights.iter().enumerate() {
                if w > 0.0 && target < w {
                    chosen = c;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            argmin(&best_sim)
        };
        centroids.column_mut(j).assign(&unit.row(candidates[pick]));
        for (c, &i) in candidates.iter().enumerate() {
            best_sim[c] = best_sim[c].max(dot(unit.row(i), centroids.column(j)));
        }
    }
    centroids
}

fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// New centroid directions from the current assignment. Clusters whose
/// member sum vanishes are re-seeded at the non-zero sample least similar to
/// the centroids kept so far.
fn update_centroids(unit: &Array2<f64>, assignments: &[usize], k: usize) -> Array2<f64> {
    let (m, d) = unit.dim();
    let mut sums = Array2::<f64>::zeros((d, k));
    for (i, &a) in assignments.iter().enumerate() {
        let mut col = sums.column_mut(a);
        col += &unit.row(i);
    }
    let mut empty = Vec::new();
    for j in 0..k {
        let norm = sums.column(j).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > NORM_EPS {
            sums.column_mut(j).mapv_inplace(|v| v / norm);
        } else {
            empty.push(j);
        }
    }
    if empty.is_empty() {
        return sums;
    }
    let live: Vec<usize> = (0..k).filter(|j| !empty.contains(j)).collect();
    let candidates: Vec<usize> = (0..m).filter(|&i| is_nonzero(unit.row(i))).collect();
    let mut max_sim: Vec<f64> = candidates
        .iter()
        .map(|&i| {
            live.iter()
                .map(|&j| dot(unit.row(i), sums.column(j)))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    for j in empty {
        if candidates.is_empty() {
            sums.column_mut(j).fill(0.0);
            sums[[j % d, j]] = 1.0;
            continue;
        }
        let pick = argmin(&max_sim);
        sums.column_mut(j).assign(&unit.row(candidates[pick]));
        for (c, &i) in candidates.iter().enumerate() {
            max_sim[c] = max_sim[c].max(dot(unit.row(i), sums.column(j)));
        }
    }
    sums
}

/// Best of `params.restarts` runs; run 0 uses `seed` itself, later runs
/// derived seeds, and earlier runs win ties.
fn fit_unit(
    unit: &Array2<f64>,
    k: usize,
    seed: u64,
    params: &KMeansParams,
    exec: Exec,
) -> KMeansFit {
    let mut best = fit_once(unit, k, seed, params, exec);
    for r in 1..params.restarts {
        let fit = fit_once(unit, k, derive_seed(seed, r as u64), params, exec);
        if fit.objective() > best.objective() {
            best = fit;
        }
    }
    best
}

fn fit_once(
    unit: &Array2<f64>,
    k: usize,
    seed: u64,
    params: &KMeansParams,
    exec: Exec,
) -> KMeansFit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(unit, k, &mut rng);
    let (mut assignments, sims) = assign(unit, &centroids, exec);
    let mut objective: f64 = sims.iter().sum();
    let mut trace = vec![objective];
    for _ in 0..params.max_iters {
        centroids = update_centroids(unit, &assignments, k);
        let (next, sims) = assign(unit, &centroids, exec);
        assignments = next;
        let updated: f64 = sims.iter().sum();
        trace.push(updated);
        let gain = updated - objective;
        objective = updated;
        if gain < params.tol {
            break;
        }
    }
    KMeansFit {
        centroids,
        assignments,
        objective_trace: trace,
    }
}

fn check_k(k: usize, m: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k must be at least 2, got {k}")));
    }
    if k > m {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds the {m} available samples"
        )));
    }
    Ok(())
}

/// Spherical k-means on the l2-normalized rows of `features`.
pub fn spherical_kmeans(
    features: ArrayView2<'_, f64>,
    k: usize,
    seed: u64,
    params: &KMeansParams,
    exec: Exec,
) -> Result<KMeansFit> {
    check_k(k, features.nrows())?;
    let unit = normalize_rows(features)?;
    Ok(fit_unit(&unit, k, seed, params, exec))
}

/// Mean silhouette with cosine distance.
///
/// Singleton clusters contribute 0 for their member, and a clustering with
/// fewer than two non-empty clusters scores 0.
pub fn silhouette_score(
    unit: ArrayView2<'_, f64>,
    assignments: &[usize],
    k: usize,
    exec: Exec,
) -> f64 {
    let m = unit.nrows();
    let mut sizes = vec![0usize; k];
    for &a in assignments {
        sizes[a] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return 0.0;
    }
    let per_sample = exec.map(m, |i| {
        let own = assignments[i];
        if sizes[own] < 2 {
            return 0.0;
        }
        let mut dist = vec![0.0; k];
        let x = unit.row(i);
        for j in 0..m {
            if j != i {
                dist[assignments[j]] += 1.0 - dot(x, unit.row(j));
            }
        }
        let a = dist[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| dist[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let scale = a.max(b);
        if scale > 0.0 {
            (b - a) / scale
        } else {
            0.0
        }
    });
    per_sample.iter().sum::<f64>() / m as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeParams {
    pub k_min: usize,
    pub k_max: usize,
    pub seed: u64,
    pub kmeans: KMeansParams,
    /// Silhouette is computed on a seeded subsample of at most this many rows.
    pub silhouette_cap: usize,
    pub exec: Exec,
}

impl Default for ProbeParams {
    fn default() -> Self {
        ProbeParams {
            k_min: 2,
            k_max: 8,
            seed: 0,
            kmeans: KMeansParams::default(),
            silhouette_cap: 2000,
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KSelection {
    pub best_k: usize,
    pub silhouettes: BTreeMap<usize, f64>,
    pub fit: KMeansFit,
}

fn select_on_unit(unit: &Array2<f64>, params: &ProbeParams) -> Result<KSelection> {
    let m = unit.nrows();
    if params.k_min < 2 || params.k_min > params.k_max {
        return Err(Error::InvalidArgument(format!(
            "invalid k range [{}, {}]",
            params.k_min, params.k_max
        )));
    }
    check_k(params.k_max, m)?;

    let subsample: Option<Vec<usize>> = (m > params.silhouette_cap).then(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, u64::MAX));
        let mut idx = index::sample(&mut rng, m, params.silhouette_cap).into_vec();
        idx.sort_unstable();
        idx
    });
    let sub_unit = subsample.as_ref().map(|idx| unit.select(Axis(0), idx));

    let mut silhouettes = BTreeMap::new();
    let mut best: Option<(f64, KMeansFit)> = None;
    for k in params.k_min..=params.k_max {
        let fit = fit_unit(
            unit,
            k,
            derive_seed(params.seed, k as u64),
            &params.kmeans,
            params.exec,
        );
        let score = match (&subsample, &sub_unit) {
            (Some(idx), Some(rows)) => {
                let labels: Vec<usize> = idx.iter().map(|&i| fit.assignments[i]).collect();
                silhouette_score(rows.view(), &labels, k, params.exec)
            }
            _ => silhouette_score(unit.view(), &fit.assignments, k, params.exec),
        };
        silhouettes.insert(k, score);
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, fit));
        }
    }
    let (_, fit) = best.expect("non-empty k range");
    Ok(KSelection {
        best_k: fit.k(),
        silhouettes,
        fit,
    })
}

/// Fits one clustering per `K` in `[k_min, k_max]` and keeps the one with the
/// highest mean silhouette (smaller `K` on ties).
pub fn silhouette_select_k(
    features: ArrayView2<'_, f64>,
    params: &ProbeParams,
) -> Result<KSelection> {
    let unit = normalize_rows(features)?;
    select_on_unit(&unit, params)
}

/// Unit-norm centroids of one hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCentroids {
    /// 1-based.
    pub layer_index: usize,
    /// `d x K`; column `k` is centroid `k`.
    pub centroids: Array2<f64>,
    pub silhouette: f64,
    pub seed: u64,
}

impl LayerCentroids {
    pub fn k(&self) -> usize {
        self.centroids.ncols()
    }

    pub fn dim(&self) -> usize {
        self.centroids.nrows()
    }

    /// Cosine similarity of `h` to every centroid, each in `[-1, 1]`.
    pub fn ulp_logits(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: h.len(),
            });
        }
        let unit = normalize(h)?;
        let unit = ArrayView1::from(&unit);
        Ok(self
            .centroids
            .columns()
            .into_iter()
            .map(|c| dot(c, unit).clamp(-1.0, 1.0))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    pub seed: u64,
    pub dataset_hash: String,
    layers: Vec<LayerCentroids>,
}

#[derive(Serialize, Deserialize)]
struct ProbeFile {
    seed: u64,
    dataset_hash: String,
    layers: Vec<LayerRecord>,
}

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    layer_index: usize,
    #[serde(rename = "K")]
    k: usize,
    dim: usize,
    silhouette: f64,
    seed: u64,
    /// row-major `dim x K`
    centroids: Vec<f64>,
}

impl ProbeSet {
    pub fn new(seed: u64, dataset_hash: String, layers: Vec<LayerCentroids>) -> Result<Self> {
        for (i, layer) in layers.iter().enumerate() {
            if layer.layer_index != i + 1 {
                return Err(Error::Shape(format!(
                    "probe {} carries layer index {}",
                    i + 1,
                    layer.layer_index
                )));
            }
            if layer.k() < 2 {
                return Err(Error::Shape(format!("layer {} has K < 2", i + 1)));
            }
            for (k, c) in layer.centroids.columns().into_iter().enumerate() {
                let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-6 {
                    return Err(Error::Shape(format!(
                        "layer {} centroid {k} has norm {norm}",
                        i + 1
                    )));
                }
            }
        }
        Ok(ProbeSet {
            seed,
            dataset_hash,
            layers,
        })
    }

    pub fn layers(&self) -> &[LayerCentroids] {
        &self.layers
    }

    pub fn ks(&self) -> Vec<usize> {
        self.layers.iter().map(LayerCentroids::k).collect()
    }

    pub fn check_compatible(&self, dataset: &FeatureDataset) -> Result<()> {
        if self.layers.len() != dataset.layer_count() {
            return Err(Error::DimensionMismatch {
                expected: self.layers.len(),
                found: dataset.layer_count(),
            });
        }
        for (probe, d) in self.layers.iter().zip(dataset.layer_dims()) {
            if probe.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: probe.dim(),
                    found: d,
                });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let file = ProbeFile {
            seed: self.seed,
            dataset_hash: self.dataset_hash.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerRecord {
                    layer_index: l.layer_index,
                    k: l.k(),
                    dim: l.dim(),
                    silhouette: l.silhouette,
                    seed: l.seed,
                    centroids: l.centroids.iter().copied().collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("probe set serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
        let file: ProbeFile = serde_json::from_slice(&raw).map_err(|e| Error::json(path, e))?;
        let layers = file
            .layers
            .into_iter()
            .map(|r| {
                let centroids = Array2::from_shape_vec((r.dim, r.k), r.centroids)
                    .map_err(|e| Error::Shape(format!("layer {}: {e}", r.layer_index)))?;
                Ok(LayerCentroids {
                    layer_index: r.layer_index,
                    centroids,
                    silhouette: r.silhouette,
                    seed: r.seed,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ProbeSet::new(file.seed, file.dataset_hash, layers)
    }
}

/// Fits a probe for every hidden layer of `dataset`.
///
/// The upper end of the `K` range is clamped to the sample count.
pub fn build_probes(dataset: &FeatureDataset, params: &ProbeParams) -> Result<ProbeSet> {
    let m = dataset.sample_count();
    let layer_params = ProbeParams {
        k_max: params.k_max.min(m),
        ..*params
    };
    let fits = params.exec.map(dataset.layer_count(), |l| -> Result<LayerCentroids> {
        let features = dataset.layers()[l].mapv(|v| v as f64);
        let seed = derive_seed(params.seed, l as u64 + 1);
        let selection = silhouette_select_k(
            features.view(),
            &ProbeParams {
                seed,
                ..layer_params
            },
        )?;
        let silhouette = selection.silhouettes[&selection.best_k];
        log::info!(
            "layer {}: K = {} (silhouette {silhouette:.4})",
            l + 1,
            selection.best_k
        );
        Ok(LayerCentroids {
            layer_index: l + 1,
            centroids: selection.fit.centroids,
            silhouette,
            seed,
        })
    });
    let layers = fits.into_iter().collect::<Result<Vec<_>>>()?;
    ProbeSet::new(params.seed, dataset.content_hash(), layers)
}
