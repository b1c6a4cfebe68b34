use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{lower_median, InitError};
use crate::geometry::image_center;
use crate::io::PointMap;

const MIN_POINTS: usize = 100;
const AXIS_MARGIN: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub trials: usize,
    /// Relative deviation for a candidate to count as an inlier.
    pub inlier_tol: f64,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            trials: 200,
            inlier_tol: 0.05,
            seed: 0,
        }
    }
}

/// Focal length from a camera-frame pointmap, principal point at the
/// image center. Each off-axis pixel votes `(u - cx) z / x` and/or
/// `(v - cy) z / y`; RANSAC picks the densest vote and averages its inliers.
pub fn calibrate_from_pointmap(map: &PointMap, cfg: &CalibrationConfig) -> Result<f64, InitError> {
    let c = image_center(map.width, map.height);
    let mut usable = 0;
    let mut votes = Vec::new();
    for v in 0..map.height {
        for u in 0..map.width {
            let Some(p) = map.get(u, v) else { continue };
            let (ix, iy) = (p.x / p.z, p.y / p.z);
            let mut any = false;
            if ix.abs() > AXIS_MARGIN {
                votes.push((u as f64 - c.x) / ix);
                any = true;
            }
            if iy.abs() > AXIS_MARGIN {
                votes.push((v as f64 - c.y) / iy);
                any = true;
            }
            usable += any as usize;
        }
    }
    votes.retain(|f| f.is_finite() && *f > 0.0);
    if usable < MIN_POINTS || votes.is_empty() {
        return Err(InitError::InsufficientCalibrationPoints(usable));
    }
    votes.sort_by(f64::total_cmp);
    let window = |h: f64| {
        let lo = votes.partition_point(|&f| f < h * (1.0 - cfg.inlier_tol));
        let hi = votes.partition_point(|&f| f <= h * (1.0 + cfg.inlier_tol));
        lo..hi
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best = window(votes[votes.len() / 2]);
    for _ in 0..cfg.trials {
        let w = window(votes[rng.random_range(0..votes.len())]);
        if w.len() > best.len() {
            best = w;
        }
    }
    let inliers = &votes[best];
    Ok(inliers.iter().sum::<f64>() / inliers.len() as f64)
}

/// Lower median of per-frame focal estimates.
pub fn shared_focal(focals: &[f64]) -> Option<f64> {
    lower_median(&mut focals.to_vec())
}
