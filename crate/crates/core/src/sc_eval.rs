//! Coverage, selective risk, risk-coverage curves and AURC under per-sample
//! masses, plus the pairwise ranking statistics that bound AURC from above.
//!
//! With uniform masses every quantity reduces to its plain empirical form;
//! with mixture masses `1 / (H * N_m)` each subset contributes equally.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::aggregate::{self, WeightVector};
use crate::csf::ScoreMatrix;
use crate::error::{Error, Result};
use crate::feature_store::{CorrectnessFlags, SampleMasses};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RcPoint {
    pub coverage: f64,
    pub risk: f64,
    pub threshold: f64,
    pub mass: f64,
}

/// One point per sample, sorted by decreasing confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RcCurve {
    pub points: Vec<RcPoint>,
    pub aurc: f64,
}

impl RcCurve {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "coverage,risk,threshold,mass")?;
        for p in &self.points {
            writeln!(out, "{},{},{},{}", p.coverage, p.risk, p.threshold, p.mass)?;
        }
        Ok(())
    }
}

fn check_lengths(scores: &[f64], errors: &[bool], masses: &SampleMasses) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Shape("no samples to evaluate".into()));
    }
    for len in [errors.len(), masses.len()] {
        if len != scores.len() {
            return Err(Error::DimensionMismatch {
                expected: scores.len(),
                found: len,
            });
        }
    }
    Ok(())
}

/// Mass of samples with confidence at least `threshold`.
pub fn coverage(scores: &[f64], masses: &SampleMasses, threshold: f64) -> f64 {
    scores
        .iter()
        .zip(masses.masses())
        .filter(|(&s, _)| s >= threshold)
        .map(|(_, &w)| w)
        .sum()
}

/// Mass-weighted error rate among samples accepted at `threshold`.
pub fn selective_risk(
    scores: &[f64],
    errors: &[bool],
    masses: &SampleMasses,
    threshold: f64,
) -> Result<f64> {
    check_lengths(scores, errors, masses)?;
    let mut covered = 0.0;
    let mut wrong = 0.0;
    for ((&s, &e), &w) in scores.iter().zip(errors).zip(masses.masses()) {
        if s >= threshold {
            covered += w;
            if e {
                wrong += w;
            }
        }
    }
    if covered > 0.0 {
        Ok(wrong / covered)
    } else {
        Err(Error::NoAcceptedSamples { threshold })
    }
}

/// Sample order by decreasing score; equal scores keep their original order.
pub fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

pub fn rc_curve(scores: &[f64], errors: &[bool], masses: &SampleMasses) -> Result<RcCurve> {
    check_lengths(scores, errors, masses)?;
    let mut coverage = 0.0;
    let mut cum_error = 0.0;
    let mut aurc = 0.0;
    let points = descending_order(scores)
        .into_iter()
        .map(|i| {
            let mass = masses.masses()[i];
            coverage += mass;
            if errors[i] {
                cum_error += mass;
            }
            let risk = cum_error / coverage;
            aurc += risk * mass;
            RcPoint {
                coverage,
                risk,
                threshold: scores[i],
                mass,
            }
        })
        .collect();
    Ok(RcCurve { points, aurc })
}

pub fn aurc(scores: &[f64], errors: &[bool], masses: &SampleMasses) -> Result<f64> {
    rc_curve(scores, errors, masses).map(|c| c.aurc)
}

fn split_scores(scores: &[f64], errors: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let mut correct = Vec::new();
    let mut wrong = Vec::new();
    for (&s, &e) in scores.iter().zip(errors) {
        if e {
            wrong.push(s);
        } else {
            correct.push(s);
        }
    }
    (correct, wrong)
}

/// Count of (wrong, other) pairs with `g(wrong) >= g(other)`.
fn count_at_least(wrong: &[f64], others: &[f64]) -> u64 {
    wrong
        .iter()
        .map(|&gw| others.iter().filter(|&&g| gw >= g).count() as u64)
        .sum()
}

/// Fraction of (correct, wrong) pairs where the wrong sample is scored at
/// least as high as the correct one.
pub fn ranking_error(scores: &[f64], errors: &[bool]) -> Result<f64> {
    if scores.len() != errors.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            found: errors.len(),
        });
    }
    let (correct, wrong) = split_scores(scores, errors);
    if correct.is_empty() || wrong.is_empty() {
        return Err(Error::DegenerateSplit {
            wrong: wrong.len(),
            total: scores.len(),
        });
    }
    let pairs = (correct.len() * wrong.len()) as f64;
    Ok(count_at_least(&wrong, &correct) as f64 / pairs)
}

/// Integer indicator counts behind the SELE statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeleCounts {
    /// wrong vs. correct pairs with `g(u-) >= g(u+)`
    pub cross: u64,
    /// wrong vs. wrong pairs (self included) with `g(u-) >= g(u-')`
    pub wrong_wrong: u64,
}

pub fn sele_counts(scores: &[f64], errors: &[bool]) -> SeleCounts {
    let (correct, wrong) = split_scores(scores, errors);
    SeleCounts {
        cross: count_at_least(&wrong, &correct),
        wrong_wrong: count_at_least(&wrong, &wrong),
    }
}

/// `(1/M^2) * sum over wrong u- and all u of 1[g(u-) >= g(u)]`, by direct double sum.
pub fn sele_loss(scores: &[f64], errors: &[bool]) -> f64 {
    let m = scores.len() as f64;
    let total: u64 = scores
        .iter()
        .zip(errors)
        .filter(|(_, &e)| e)
        .map(|(&gw, _)| scores.iter().filter(|&&g| gw >= g).count() as u64)
        .sum();
    total as f64 / (m * m)
}

/// SELE loss rebuilt from the ranking error and the wrong-vs-wrong term.
pub fn sele_from_decomposition(scores: &[f64], errors: &[bool]) -> Result<f64> {
    let m = scores.len() as f64;
    let n = errors.iter().filter(|&&e| e).count() as f64;
    let rank = ranking_error(scores, errors)?;
    let counts = sele_counts(scores, errors);
    Ok((m - n) * n / (m * m) * rank + counts.wrong_wrong as f64 / (m * m))
}

fn wrong_scores_distinct(scores: &[f64], errors: &[bool]) -> bool {
    let (_, mut wrong) = split_scores(scores, errors);
    wrong.sort_by(f64::total_cmp);
    wrong.windows(2).all(|p| p[0] != p[1])
}

/// Every quantity involved in bounding AURC by the pairwise log-loss.
///
/// `aurc` and the bounds use uniform masses; `aurc_reweighted` is the
/// mixture-weighted AURC of the same scores and is not part of any bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub l_reside: f64,
    pub l_rank: f64,
    pub delta_sele: f64,
    pub aurc: f64,
    pub aurc_reweighted: f64,
    pub loose_bound: f64,
    pub tight_bound: f64,
    pub unique_scores_on_errors: bool,
    #[serde(rename = "M")]
    pub m: usize,
    pub n: usize,
    pub loose_holds: bool,
    /// `None` when some wrong samples share a score.
    pub tight_holds: Option<bool>,
    pub sele_bound_holds: bool,
}

impl BoundReport {
    pub fn holds(&self) -> bool {
        self.loose_holds && self.tight_holds.unwrap_or(true)
    }
}

/// Evaluates both AURC bounds on aggregated scores `g`.
pub fn bound_report(g: &[f64], errors: &[bool], masses: &SampleMasses) -> Result<BoundReport> {
    check_lengths(g, errors, masses)?;
    let total = g.len();
    let n_wrong = errors.iter().filter(|&&e| e).count();
    if n_wrong == 0 || n_wrong == total {
        return Err(Error::DegenerateSplit {
            wrong: n_wrong,
            total,
        });
    }
    let (correct, wrong) = split_scores(g, errors);
    let l_reside = aggregate::pairwise_log_loss(&correct, &wrong)?;
    let l_rank = ranking_error(g, errors)?;
    let delta_sele = sele_loss(g, errors);
    let aurc_uniform = aurc(g, errors, &SampleMasses::uniform(total))?;
    let aurc_reweighted = aurc(g, errors, masses)?;

    let m = total as f64;
    let n = n_wrong as f64;
    let slope = 2.0 * (m - n) * n / (m * m * std::f64::consts::LN_2);
    let loose_bound = slope * l_reside + 2.0 * n * n / (m * m);
    let tight_bound = slope * l_reside + n * (n + 1.0) / (m * m);
    let unique = wrong_scores_distinct(g, errors);
    Ok(BoundReport {
        l_reside,
        l_rank,
        delta_sele,
        aurc: aurc_uniform,
        aurc_reweighted,
        loose_bound,
        tight_bound,
        unique_scores_on_errors: unique,
        m: total,
        n: n_wrong,
        loose_holds: aurc_uniform < loose_bound,
        tight_holds: unique.then_some(aurc_uniform < tight_bound),
        sele_bound_holds: aurc_uniform < 2.0 * delta_sele,
    })
}

/// Bound report for the aggregated score `g_w` of every row in `matrix`.
pub fn weighted_bound_report(
    matrix: &ScoreMatrix,
    w: &WeightVector,
    masses: &SampleMasses,
    flags: &CorrectnessFlags,
) -> Result<BoundReport> {
    let g = aggregate::aggregate_scores(w, matrix)?;
    bound_report(&g, flags.errors(), masses)
}
