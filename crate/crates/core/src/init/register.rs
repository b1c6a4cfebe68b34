use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::Vector3;

use super::{
    lower_median, pixel_pairs, resolve_translation_scale, solve_ray_scale, two_view_pose,
    InitConfig, InitError, ScaleSample,
};
use crate::geometry::{skew, AffineDepthCorrection, CameraPose, FrameState, Trainable};
use crate::graph::{CorrespondenceIndex, PoseGraph, SpanningTree};
use crate::io::{CorrespondenceSet, DepthMap};
use crate::ransac::sampson_distance;

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationFailure {
    pub frame: u32,
    pub error: InitError,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RegistrationReport {
    /// Frames in registration order with the parent actually used.
    pub order: Vec<(u32, Option<u32>)>,
    pub registered: BTreeSet<u32>,
    pub failures: Vec<RegistrationFailure>,
    /// Frames outside the largest connected component.
    pub unreachable: Vec<u32>,
}

fn confident(set: CorrespondenceSet, chi: f64) -> CorrespondenceSet {
    CorrespondenceSet {
        matches: set
            .matches
            .into_iter()
            .filter(|m| m.confidence >= chi as f32)
            .collect(),
        ..set
    }
}

/// Places `frame` relative to the registered `parent`: relative pose from
/// the parent-to-frame matches, metric baseline from the parent's corrected
/// depth, and the frame's depth scale from the reverse matches.
pub fn register_frame(
    frame: &FrameState,
    parent: &FrameState,
    index: &CorrespondenceIndex<'_>,
    depths: &HashMap<u32, &DepthMap>,
    cfg: &InitConfig,
) -> Result<(CameraPose, AffineDepthCorrection), InitError> {
    let (i, j) = (frame.frame_id, parent.frame_id);
    let fail = |reason: String| InitError::RegistrationFailure { frame: i, reason };
    let (ki, kj) = (&frame.intrinsics, &parent.intrinsics);
    let (Some(depth_i), Some(depth_j)) = (depths.get(&i), depths.get(&j)) else {
        return Err(fail("missing depth map".into()));
    };

    let forward = confident(
        index
            .directed(j, i)
            .ok_or_else(|| fail(format!("no matches with frame {j}")))?,
        cfg.chi,
    );
    let mut two_view_cfg = cfg.two_view.clone();
    two_view_cfg.seed = cfg
        .two_view
        .seed
        .wrapping_add(((i as u64) << 32) | j as u64);
    let mut est = two_view_pose(&pixel_pairs(&forward), kj, ki, &two_view_cfg)?;

    let samples: Vec<ScaleSample> = forward
        .matches
        .iter()
        .zip(&est.inlier_mask)
        .filter(|(_, &inlier)| inlier)
        .filter_map(|(m, _)| {
            let d = depth_j.sample_nearest(&m.src_pixel())?;
            Some(ScaleSample {
                src_pixel: m.src_pixel(),
                depth: parent.correction.apply(d),
                dst_pixel: m.dst_pixel(),
            })
        })
        .collect();
    let s = resolve_translation_scale(&est, &samples, kj, ki)?;
    est.scale = Some(s);

    let rj = parent.pose.rotation().map_err(|e| fail(e.to_string()))?;
    let pose = CameraPose::from_rotation(
        &(est.rotation * rj),
        est.rotation * parent.pose.translation + est.translation_dir * s,
    );

    // Reverse direction i -> j: X_j = Rᵀ X_i - s Rᵀ t̂.
    let r_ij = est.rotation.transpose();
    let t_ij = -(r_ij * est.translation_dir) * s;
    let e_ij = skew(&t_ij) * r_ij;
    let tau = cfg.two_view.inlier_tau_px / (ki.focal * kj.focal).sqrt();
    let reverse = confident(
        index
            .directed(i, j)
            .ok_or_else(|| fail(format!("no reverse matches with frame {j}")))?,
        cfg.chi,
    );
    let mut alphas: Vec<f64> = reverse
        .matches
        .iter()
        .filter_map(|m| {
            let raw = depth_i.sample_nearest(&m.src_pixel())?;
            let (x, q) = (ki.normalize(&m.src_pixel()), kj.normalize(&m.dst_pixel()));
            if sampson_distance(&e_ij, &x, &q) >= tau {
                return None;
            }
            let d = solve_ray_scale(&t_ij, &(r_ij * Vector3::new(x.x, x.y, 1.0)), &q)?;
            Some(d / raw)
        })
        .collect();
    let alpha = lower_median(&mut alphas)
        .filter(|a| *a > 0.0 && a.is_finite())
        .ok_or_else(|| {
            InitError::ScaleResolutionFailure(format!("no depth-scale sample for frame {i}"))
        })?;
    let correction = AffineDepthCorrection::new(alpha, 0.0).map_err(|e| fail(e.to_string()))?;
    Ok((pose, correction))
}

/// Registers frames along the greedy tree. The root takes the identity
/// pose with `(alpha, beta) = (1, 0)` and both stay frozen. A frame whose
/// tree parent fails falls back to other registered neighbors in order of
/// decreasing co-visibility.
pub fn register_spanning_tree(
    tree: &SpanningTree,
    graph: &PoseGraph,
    correspondences: &[CorrespondenceSet],
    depths: &HashMap<u32, &DepthMap>,
    states: &mut BTreeMap<u32, FrameState>,
    cfg: &InitConfig,
) -> RegistrationReport {
    let index = CorrespondenceIndex::new(correspondences);
    let mut report = RegistrationReport {
        unreachable: tree.unregistered.clone(),
        ..Default::default()
    };
    for &(frame, tree_parent) in &tree.order {
        let Some(parent) = tree_parent else {
            if let Some(root) = states.get_mut(&frame) {
                root.pose = CameraPose::identity();
                root.correction = AffineDepthCorrection::identity();
                root.trainable = Trainable {
                    pose: false,
                    correction: false,
                    ..root.trainable
                };
                report.registered.insert(frame);
                report.order.push((frame, None));
            }
            continue;
        };
        let mut candidates = vec![parent];
        let mut others: Vec<(f64, u32)> = graph
            .neighbors(frame)
            .into_iter()
            .filter(|n| *n != parent && report.registered.contains(n))
            .map(|n| (graph.covisibility(frame, n).unwrap_or(0.0), n))
            .collect();
        others.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        candidates.extend(others.into_iter().map(|(_, n)| n));

        let mut last_error = None;
        for p in candidates
            .into_iter()
            .filter(|p| report.registered.contains(p))
        {
            let (Some(child), Some(parent_state)) = (states.get(&frame), states.get(&p)) else {
                continue;
            };
            match register_frame(child, parent_state, &index, depths, cfg) {
                Ok((pose, correction)) => {
                    let s = states.get_mut(&frame).unwrap();
                    s.pose = pose;
                    s.correction = correction;
                    report.registered.insert(frame);
                    report.order.push((frame, Some(p)));
                    last_error = None;
                    break;
                }
                Err(e) => last_error = Some(e),
            }
        }
        if !report.registered.contains(&frame) {
            let error = last_error.unwrap_or(InitError::RegistrationFailure {
                frame,
                reason: "no registered parent".into(),
            });
            log::warn!("frame {frame} left unregistered: {error}");
            report.failures.push(RegistrationFailure { frame, error });
        }
    }
    report
}
