//! Bootstrapping: focal calibration, two-view relative pose, metric scale
//! and depth-scale resolution, and registration along the spanning tree.

mod calibrate;
pub mod essential;
mod register;
mod scale;
mod twoview;

use serde::{Deserialize, Serialize};

pub use calibrate::{calibrate_from_pointmap, shared_focal, CalibrationConfig};
pub use essential::{
    decompose_essential, estimate_essential_eightpoint, estimate_essential_fivepoint, select_pose,
    triangulate_midpoint, PointPair,
};
pub use register::{
    register_frame, register_spanning_tree, RegistrationFailure, RegistrationReport,
};
pub use scale::{resolve_translation_scale, solve_ray_scale, ScaleSample};
pub use twoview::{pixel_pairs, two_view_pose, TwoViewEstimate};

use crate::ransac::MinimalSolver;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InitError {
    #[error("insufficient calibration points: {0} usable, need 100")]
    InsufficientCalibrationPoints(usize),
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("two-view estimation failed: {0}")]
    TwoViewFailure(String),
    #[error("scale resolution failed: {0}")]
    ScaleResolutionFailure(String),
    #[error("registration of frame {frame} failed: {reason}")]
    RegistrationFailure { frame: u32, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoViewConfig {
    pub ransac_iters: usize,
    /// Largest Sampson-distance threshold, pixels.
    pub inlier_tau_px: f64,
    pub steps: u32,
    pub solver: MinimalSolver,
    pub refine: bool,
    /// Matches beyond this count are subsampled before RANSAC.
    pub max_points: usize,
    pub seed: u64,
}

impl Default for TwoViewConfig {
    fn default() -> Self {
        Self {
            ransac_iters: 128,
            inlier_tau_px: 6.0,
            steps: 100,
            solver: MinimalSolver::FivePoint,
            refine: true,
            max_points: 2000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub two_view: TwoViewConfig,
    pub calibration: CalibrationConfig,
    /// Minimum match confidence used during initialization.
    pub chi: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            two_view: TwoViewConfig::default(),
            calibration: CalibrationConfig::default(),
            chi: crate::graph::DEFAULT_CHI,
        }
    }
}

/// Lower median; `None` when empty.
pub fn lower_median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let k = (values.len() - 1) / 2;
    let (_, m, _) = values.select_nth_unstable_by(k, f64::total_cmp);
    Some(*m)
}
