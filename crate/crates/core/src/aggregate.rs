//! Linear aggregation of layerwise scores, trained by minimizing the mean
//! pairwise log-loss `ln(1 + exp(g(u-) - g(u+)))` over (correct, wrong)
//! sample pairs.
//!
//! Training starts from the one-hot weight of the single best column and
//! returns the checkpoint with the lowest validation AURC, the starting
//! point included, so the result is never worse than that column on the
//! validation data.

use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::csf::ScoreMatrix;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::feature_store::{split_by_correctness, CorrectnessFlags, SampleMasses};
use crate::sc_eval;

/// Aggregation weights, one per score column (`L + 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidArgument(
                "weights must be non-empty and finite".into(),
            ));
        }
        Ok(WeightVector(weights))
    }

    pub fn zeros(len: usize) -> Self {
        WeightVector(vec![0.0; len])
    }

    /// One-hot weight selecting `layer` (1-based, `len` is `L + 1`).
    pub fn unit(len: usize, layer: usize) -> Self {
        assert!((1..=len).contains(&layer), "layer {layer} outside [1, {len}]");
        let mut w = vec![0.0; len];
        w[layer - 1] = 1.0;
        WeightVector(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn dot(w: &[f64], row: &[f64]) -> f64 {
    w.iter().zip(row).map(|(a, b)| a * b).sum()
}

pub fn aggregate_score(w: &WeightVector, row: &[f64]) -> Result<f64> {
    if row.len() != w.len() {
        return Err(Error::DimensionMismatch {
            expected: w.len(),
            found: row.len(),
        });
    }
    Ok(dot(&w.0, row))
}

pub fn aggregate_scores(w: &WeightVector, matrix: &ScoreMatrix) -> Result<Vec<f64>> {
    if matrix.columns() != w.len() {
        return Err(Error::DimensionMismatch {
            expected: w.len(),
            found: matrix.columns(),
        });
    }
    Ok((0..matrix.rows()).map(|i| dot(&w.0, matrix.row(i))).collect())
}

/// `ln(1 + e^q)` without overflow.
pub fn softplus(q: f64) -> f64 {
    q.max(0.0) + (-q.abs()).exp().ln_1p()
}

pub fn sigmoid(q: f64) -> f64 {
    if q >= 0.0 {
        1.0 / (1.0 + (-q).exp())
    } else {
        let e = q.exp();
        e / (1.0 + e)
    }
}

/// Mean of `softplus(g(u-) - g(u+))` over all pairs of the two score sets.
pub fn pairwise_log_loss(correct: &[f64], wrong: &[f64]) -> Result<f64> {
    pairwise_log_loss_with(Exec::Sequential, correct, wrong)
}

pub fn pairwise_log_loss_with(exec: Exec, correct: &[f64], wrong: &[f64]) -> Result<f64> {
    if correct.is_empty() || wrong.is_empty() {
        return Err(Error::DegenerateSplit {
            wrong: wrong.len(),
            total: correct.len() + wrong.len(),
        });
    }
    let total = exec.sum(correct.len(), |i| {
        let gp = correct[i];
        wrong.iter().map(|&gm| softplus(gm - gp)).sum::<f64>()
    });
    Ok(total / (correct.len() * wrong.len()) as f64)
}

fn check_rows(w: &WeightVector, rows: &[&[f64]]) -> Result<()> {
    match rows.iter().find(|r| r.len() != w.len()) {
        Some(r) => Err(Error::DimensionMismatch {
            expected: w.len(),
            found: r.len(),
        }),
        None => Ok(()),
    }
}

/// Pairwise log-loss of `g_w` between score rows of correct and wrong samples.
pub fn reside_loss(w: &WeightVector, correct: &[&[f64]], wrong: &[&[f64]]) -> Result<f64> {
    check_rows(w, correct)?;
    check_rows(w, wrong)?;
    let gp: Vec<f64> = correct.iter().map(|r| dot(&w.0, r)).collect();
    let gm: Vec<f64> = wrong.iter().map(|r| dot(&w.0, r)).collect();
    pairwise_log_loss(&gp, &gm)
}

/// Gradient of [`reside_loss`] with respect to `w`:
/// mean over pairs of `sigmoid(g(u-) - g(u+)) * (s(u-) - s(u+))`.
pub fn reside_grad(w: &WeightVector, correct: &[&[f64]], wrong: &[&[f64]]) -> Result<Vec<f64>> {
    check_rows(w, correct)?;
    check_rows(w, wrong)?;
    if correct.is_empty() || wrong.is_empty() {
        return Err(Error::DegenerateSplit {
            wrong: wrong.len(),
            total: correct.len() + wrong.len(),
        });
    }
    let gp: Vec<f64> = correct.iter().map(|r| dot(&w.0, r)).collect();
    let gm: Vec<f64> = wrong.iter().map(|r| dot(&w.0, r)).collect();
    let mut plus_weight = vec![0.0; gp.len()];
    let mut minus_weight = vec![0.0; gm.len()];
    for (i, &a) in gp.iter().enumerate() {
        for (j, &b) in gm.iter().enumerate() {
            let c = sigmoid(b - a);
            plus_weight[i] += c;
            minus_weight[j] += c;
        }
    }
    let pairs = (gp.len() * gm.len()) as f64;
    let mut grad = vec![0.0; w.len()];
    for (row, c) in wrong.iter().zip(&minus_weight) {
        for (g, s) in grad.iter_mut().zip(*row) {
            *g += c * s;
        }
    }
    for (row, c) in correct.iter().zip(&plus_weight) {
        for (g, s) in grad.iter_mut().zip(*row) {
            *g -= c * s;
        }
    }
    grad.iter_mut().for_each(|g| *g /= pairs);
    Ok(grad)
}

/// Column (1-based) with the lowest AURC on its own; ties go to the later
/// column. Without wrong samples the final-logit column `L + 1` is returned.
pub fn best_layer(
    matrix: &ScoreMatrix,
    masses: &SampleMasses,
    flags: &CorrectnessFlags,
) -> Result<usize> {
    if flags.len() != matrix.rows() {
        return Err(Error::DimensionMismatch {
            expected: matrix.rows(),
            found: flags.len(),
        });
    }
    if flags.error_count() == 0 {
        return Ok(matrix.columns());
    }
    let mut best = (0, f64::INFINITY);
    for c in 0..matrix.columns() {
        let aurc = sc_eval::aurc(&matrix.column(c), flags.errors(), masses)?;
        if aurc <= best.1 {
            best = (c + 1, aurc);
        }
    }
    Ok(best.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Train on columns standardized by their validation mean and std.
    pub standardize_scores: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            batch_size: 16,
            epochs: 100,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            standardize_scores: false,
        }
    }
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(config: &TrainConfig, len: usize) -> Self {
        Adam {
            lr: config.learning_rate,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Full validation loss at the start and after every epoch.
    pub loss_curve: Vec<f64>,
    /// Validation AURC at the start and after every epoch.
    pub aurc_curve: Vec<f64>,
    pub best_epoch: usize,
    pub best_aurc: f64,
    pub weights: WeightVector,
    /// The returned weights are the starting one-hot vector.
    pub fallback: bool,
    /// Validation had no wrong or no correct samples; nothing was trained.
    pub degenerate: bool,
    /// 1-based best single column on validation.
    pub best_layer: usize,
    pub best_layer_aurc: f64,
    pub config: TrainConfig,
}

impl TrainReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&raw).map_err(|e| Error::json(path, e))
    }
}

/// Per-column affine map applied to scores before training.
struct ColumnScale {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl ColumnScale {
    fn identity(columns: usize) -> Self {
        ColumnScale {
            mean: vec![0.0; columns],
            std: vec![1.0; columns],
        }
    }

    fn fit(matrix: &ScoreMatrix) -> Self {
        let m = matrix.rows() as f64;
        let mut scale = ColumnScale::identity(matrix.columns());
        for c in 0..matrix.columns() {
            let col = matrix.column(c);
            let mean = col.iter().sum::<f64>() / m;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
            scale.mean[c] = mean;
            if var.sqrt() > 0.0 {
                scale.std[c] = var.sqrt();
            }
        }
        scale
    }

    fn transform(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(s, (m, sd))| (s - m) / sd)
            .collect()
    }

    /// Weights on raw scores ranking samples identically to `w` on scaled ones.
    fn to_raw(&self, w: &[f64]) -> Vec<f64> {
        w.iter().zip(&self.std).map(|(w, sd)| w / sd).collect()
    }
}

struct Evaluator<'a> {
    matrix: &'a ScoreMatrix,
    masses: &'a SampleMasses,
    flags: &'a CorrectnessFlags,
    correct: &'a [usize],
    wrong: &'a [usize],
    exec: Exec,
}

impl Evaluator<'_> {
    fn loss_and_aurc(&self, w: &WeightVector) -> Result<(f64, f64)> {
        let g = aggregate_scores(w, self.matrix)?;
        let gp: Vec<f64> = self.correct.iter().map(|&i| g[i]).collect();
        let gm: Vec<f64> = self.wrong.iter().map(|&i| g[i]).collect();
        let loss = pairwise_log_loss_with(self.exec, &gp, &gm)?;
        let aurc = sc_eval::aurc(&g, self.flags.errors(), self.masses)?;
        Ok((loss, aurc))
    }
}

/// Trains aggregation weights on validation scores.
pub fn optimize_weights(
    matrix: &ScoreMatrix,
    masses: &SampleMasses,
    flags: &CorrectnessFlags,
    config: &TrainConfig,
) -> Result<TrainReport> {
    optimize_weights_with(matrix, masses, flags, config, Exec::default())
}

pub fn optimize_weights_with(
    matrix: &ScoreMatrix,
    masses: &SampleMasses,
    flags: &CorrectnessFlags,
    config: &TrainConfig,
    exec: Exec,
) -> Result<TrainReport> {
    if flags.len() != matrix.rows() || masses.len() != matrix.rows() {
        return Err(Error::DimensionMismatch {
            expected: matrix.rows(),
            found: flags.len().min(masses.len()),
        });
    }
    if config.batch_size == 0 || config.learning_rate.is_nan() || config.learning_rate <= 0.0 {
        return Err(Error::InvalidArgument(
            "batch size and learning rate must be positive".into(),
        ));
    }
    let columns = matrix.columns();
    let (correct, wrong) = split_by_correctness(flags);

    if correct.is_empty() || wrong.is_empty() {
        log::warn!(
            "validation has {} wrong of {} samples; returning the final-logit weights untrained",
            wrong.len(),
            matrix.rows()
        );
        let weights = WeightVector::unit(columns, columns);
        let aurc = sc_eval::aurc(&matrix.baseline_column(), flags.errors(), masses)?;
        return Ok(TrainReport {
            loss_curve: Vec::new(),
            aurc_curve: vec![aurc],
            best_epoch: 0,
            best_aurc: aurc,
            weights,
            fallback: true,
            degenerate: true,
            best_layer: columns,
            best_layer_aurc: aurc,
            config: *config,
        });
    }

    let scale = if config.standardize_scores {
        ColumnScale::fit(matrix)
    } else {
        ColumnScale::identity(columns)
    };
    let train_rows: Vec<Vec<f64>> = (0..matrix.rows())
        .map(|i| scale.transform(matrix.row(i)))
        .collect();

    let start_layer = best_layer(matrix, masses, flags)?;
    let mut params = vec![0.0; columns];
    params[start_layer - 1] = scale.std[start_layer - 1];

    let eval = Evaluator {
        matrix,
        masses,
        flags,
        correct: &correct,
        wrong: &wrong,
        exec,
    };
    let start = WeightVector::unit(columns, start_layer);
    let (loss0, aurc0) = eval.loss_and_aurc(&start)?;
    let mut loss_curve = vec![loss0];
    let mut aurc_curve = vec![aurc0];
    let mut best = (0usize, aurc0, start);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config, columns);
    let mut order = wrong.clone();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let partners: Vec<usize> = if correct.len() < config.batch_size {
                (0..chunk.len())
                    .map(|_| correct[rng.random_range(0..correct.len())])
                    .collect()
            } else {
                index::sample(&mut rng, correct.len(), chunk.len())
                    .into_iter()
                    .map(|k| correct[k])
                    .collect()
            };
            let plus: Vec<&[f64]> = partners.iter().map(|&i| train_rows[i].as_slice()).collect();
            let minus: Vec<&[f64]> = chunk.iter().map(|&i| train_rows[i].as_slice()).collect();
            let grad = reside_grad(&WeightVector(params.clone()), &plus, &minus)?;
            adam.step(&mut params, &grad);
        }
        let raw = WeightVector::new(scale.to_raw(&params))?;
        let (loss, aurc) = eval.loss_and_aurc(&raw)?;
        loss_curve.push(loss);
        aurc_curve.push(aurc);
        if aurc < best.1 {
            best = (epoch, aurc, raw);
        }
    }

    let (best_epoch, best_aurc, weights) = best;
    Ok(TrainReport {
        loss_curve,
        aurc_curve,
        best_epoch,
        best_aurc,
        weights,
        fallback: best_epoch == 0,
        degenerate: false,
        best_layer: start_layer,
        best_layer_aurc: aurc0,
        config: *config,
    })
}
