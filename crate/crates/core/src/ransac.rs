//! Essential-matrix RANSAC scored by the marginalized inlier count.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distribution::{grid_score, marginalized_score};
use crate::geometry::skew;
use crate::init::essential::{
    estimate_essential_eightpoint, estimate_essential_fivepoint, refine_relative_pose, select_pose,
    PointPair,
};

/// Squared Sampson error of a normalized pair under `E`. A vanishing
/// denominator yields `+inf`.
pub fn sampson_residual(e: &Matrix3<f64>, x: &Vector2<f64>, xp: &Vector2<f64>) -> f64 {
    let (x, xp) = (Vector3::new(x.x, x.y, 1.0), Vector3::new(xp.x, xp.y, 1.0));
    let ex = e * x;
    let etxp = e.transpose() * xp;
    let num = xp.dot(&ex);
    let den = ex.x * ex.x + ex.y * ex.y + etxp.x * etxp.x + etxp.y * etxp.y;
    if den <= 0.0 {
        return f64::INFINITY;
    }
    num * num / den
}

/// First-order geometric distance, in normalized units.
pub fn sampson_distance(e: &Matrix3<f64>, x: &Vector2<f64>, xp: &Vector2<f64>) -> f64 {
    sampson_residual(e, x, xp).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MinimalSolver {
    #[default]
    FivePoint,
    EightPoint,
}

impl MinimalSolver {
    pub fn sample_size(self) -> usize {
        match self {
            MinimalSolver::FivePoint => 5,
            MinimalSolver::EightPoint => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub hypotheses: usize,
    /// Largest threshold on the Sampson distance, normalized units.
    pub tau_max: f64,
    pub steps: u32,
    pub seed: u64,
    pub solver: MinimalSolver,
    /// Refit on the winner's inliers and keep the refit if it scores higher.
    pub refine: bool,
    /// Explicit thresholds replacing the uniform grid. The inlier mask then
    /// uses the largest of them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<f64>>,
}

impl RansacConfig {
    /// Threshold separating inliers.
    pub fn inlier_threshold(&self) -> f64 {
        match &self.grid {
            Some(g) => g.iter().copied().fold(0.0, f64::max),
            None => self.tau_max,
        }
    }
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            hypotheses: 64,
            tau_max: 0.005,
            steps: 100,
            seed: 0,
            solver: MinimalSolver::FivePoint,
            refine: true,
            grid: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EssentialEstimate {
    pub essential: Matrix3<f64>,
    pub score: u64,
    /// Sampson distance below the inlier threshold.
    pub inlier_mask: Vec<bool>,
    /// Index of the winning minimal sample; `None` when the refit won.
    pub hypothesis: Option<usize>,
}

impl EssentialEstimate {
    pub fn inlier_count(&self) -> usize {
        self.inlier_mask.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RansacError {
    #[error("need at least {needed} correspondences, got {got}")]
    TooFewCorrespondences { needed: usize, got: usize },
    #[error("no valid hypothesis: every minimal sample was degenerate")]
    NoValidHypothesis,
}

fn distances(e: &Matrix3<f64>, pairs: &[PointPair]) -> Vec<f64> {
    pairs
        .iter()
        .map(|(a, b)| sampson_distance(e, a, b))
        .collect()
}

fn score_of(e: &Matrix3<f64>, pairs: &[PointPair], cfg: &RansacConfig) -> u64 {
    match &cfg.grid {
        Some(g) => grid_score(&distances(e, pairs), g),
        None => marginalized_score(&distances(e, pairs), cfg.tau_max, cfg.steps),
    }
}

/// Draws `cfg.hypotheses` minimal samples, solves each, scores every real
/// solution and returns the maximizer. Ties go to the lower sample index.
pub fn estimate_essential_marginalized(
    pairs: &[PointPair],
    cfg: &RansacConfig,
) -> Result<EssentialEstimate, RansacError> {
    let k = cfg.solver.sample_size();
    if pairs.len() < k {
        return Err(RansacError::TooFewCorrespondences {
            needed: k,
            got: pairs.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let samples: Vec<Vec<usize>> = (0..cfg.hypotheses)
        .map(|_| sample(&mut rng, pairs.len(), k).into_vec())
        .collect();

    let best = samples
        .par_iter()
        .enumerate()
        .filter_map(|(h, idx)| {
            let minimal: Vec<PointPair> = idx.iter().map(|&i| pairs[i]).collect();
            let candidates = match cfg.solver {
                MinimalSolver::FivePoint => estimate_essential_fivepoint(&minimal).ok()?,
                MinimalSolver::EightPoint => vec![estimate_essential_eightpoint(&minimal).ok()?],
            };
            candidates
                .into_iter()
                .map(|e| (score_of(&e, pairs, cfg), h, e))
                .max_by(|a, b| a.0.cmp(&b.0))
        })
        .reduce_with(|a, b| {
            if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) {
                b
            } else {
                a
            }
        });
    let Some((mut score, h, mut essential)) = best else {
        return Err(RansacError::NoValidHypothesis);
    };
    let mut hypothesis = Some(h);

    let tau = cfg.inlier_threshold();
    if cfg.refine {
        for _ in 0..4 {
            let inliers: Vec<PointPair> = pairs
                .iter()
                .filter(|(a, b)| sampson_distance(&essential, a, b) < tau)
                .copied()
                .collect();
            if inliers.len() < 8 {
                break;
            }
            // The linear refit degenerates on near-planar scenes, so the
            // current model is also polished directly.
            let mut starts = vec![essential];
            starts.extend(estimate_essential_eightpoint(&inliers).ok());
            let Some((refit_score, refit)) = starts
                .iter()
                .map(|e| {
                    let (r, t, _) = select_pose(e, inliers.iter());
                    let (r, t) = refine_relative_pose(&r, &t, &inliers, 20);
                    let refit = skew(&t) * r;
                    (score_of(&refit, pairs, cfg), refit)
                })
                .max_by(|a, b| a.0.cmp(&b.0))
            else {
                break;
            };
            if refit_score <= score {
                break;
            }
            score = refit_score;
            essential = refit;
            hypothesis = None;
        }
    }

    let inlier_mask = distances(&essential, pairs)
        .iter()
        .map(|&d| d < tau)
        .collect();
    Ok(EssentialEstimate {
        essential,
        score,
        inlier_mask,
        hypothesis,
    })
}
