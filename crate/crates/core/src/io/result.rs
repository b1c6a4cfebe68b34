use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::{read_file, write_file, IoError};
use crate::distribution::ResidualHistogram;
use crate::geometry::{
    AffineDepthCorrection, CameraIntrinsics, CameraPose, FrameState, GeometryError, Trainable,
};

/// Per-frame entry of a result document. Pose and correction fields are
/// present only for registered frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_id: u32,
    pub registered: bool,
    pub width: u32,
    pub height: u32,
    pub cx: f64,
    pub cy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation: Option<[f64; 9]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub translation: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub focal: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
}

impl FrameRecord {
    pub fn from_state(state: &FrameState, registered: bool) -> Result<Self, GeometryError> {
        let k = &state.intrinsics;
        let mut rec = FrameRecord {
            frame_id: state.frame_id,
            registered,
            width: k.width,
            height: k.height,
            cx: k.principal_point.x,
            cy: k.principal_point.y,
            rotation: None,
            translation: None,
            focal: None,
            alpha: None,
            beta: None,
        };
        if registered {
            let r = state.pose.rotation()?;
            // row-major
            rec.rotation = Some(std::array::from_fn(|i| r[(i / 3, i % 3)]));
            rec.translation = Some(state.pose.translation.into());
            rec.focal = Some(k.focal);
            rec.alpha = Some(state.correction.alpha());
            rec.beta = Some(state.correction.beta);
        }
        Ok(rec)
    }

    pub fn rotation_matrix(&self) -> Option<Matrix3<f64>> {
        self.rotation.map(|r| Matrix3::from_row_slice(&r))
    }

    /// Rebuild a frame state; `None` for unregistered frames.
    pub fn to_state(&self) -> Result<Option<FrameState>, GeometryError> {
        let (Some(r), Some(t), Some(f), Some(a), Some(b)) = (
            self.rotation_matrix(),
            self.translation,
            self.focal,
            self.alpha,
            self.beta,
        ) else {
            return Ok(None);
        };
        let intrinsics =
            CameraIntrinsics::new(f, Vector2::new(self.cx, self.cy), self.width, self.height)?;
        let pose = CameraPose::from_rotation(&r, Vector3::from(t));
        pose.rotation()?;
        Ok(Some(FrameState {
            frame_id: self.frame_id,
            intrinsics,
            pose,
            correction: AffineDepthCorrection::new(a, b)?,
            trainable: Trainable::ALL,
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramSummary {
    pub tau_max: f64,
    pub bin_count: usize,
    pub total: u64,
    pub inliers: u64,
    pub inlier_fraction: f64,
    pub counts: Vec<u64>,
}

impl From<&ResidualHistogram> for HistogramSummary {
    fn from(h: &ResidualHistogram) -> Self {
        Self {
            tau_max: h.tau_max,
            bin_count: h.bin_count(),
            total: h.total,
            inliers: h.inliers(),
            inlier_fraction: h.inliers() as f64 / h.total as f64,
            counts: h.counts.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMetadata {
    pub seed: u64,
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub histogram: Option<HistogramSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultDocument {
    pub frames: Vec<FrameRecord>,
    pub metadata: RunMetadata,
}

impl ResultDocument {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result document is always serializable")
    }
}

pub fn write_result(doc: &ResultDocument, path: &Path) -> Result<(), IoError> {
    let mut text = doc.to_json();
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn read_result(path: &Path) -> Result<ResultDocument, IoError> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })
}
