//! Pose-accuracy metrics: pairwise relative rotation/translation accuracy,
//! AUC of pose errors, aligned trajectory error and relocalization accuracy.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{rotation_angle_deg, vector_angle_deg, FrameState, GeometryError};
use crate::io::{FrameRecord, ResultDocument};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("insufficient frames: {got}, need {needed}")]
    InsufficientFrames { got: usize, needed: usize },
}

/// A world-to-camera pose used for comparisons.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSample {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl PoseSample {
    pub fn from_state(state: &FrameState) -> Result<Self, GeometryError> {
        Ok(Self {
            rotation: state.pose.rotation()?,
            translation: state.pose.translation,
        })
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// `None` for unregistered records.
    pub fn from_record(rec: &FrameRecord) -> Option<Self> {
        if !rec.registered {
            return None;
        }
        Some(Self {
            rotation: rec.rotation_matrix()?,
            translation: Vector3::from(rec.translation?),
        })
    }
}

/// Poses of the frames present in both maps, in frame-id order.
pub fn common_samples(
    est: &BTreeMap<u32, FrameState>,
    gt: &BTreeMap<u32, FrameState>,
) -> Result<(Vec<PoseSample>, Vec<PoseSample>), GeometryError> {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (id, e) in est {
        if let Some(g) = gt.get(id) {
            a.push(PoseSample::from_state(e)?);
            b.push(PoseSample::from_state(g)?);
        }
    }
    Ok((a, b))
}

/// `y ≈ scale · rotation · x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x * self.scale + self.translation
    }
}

/// Least-squares similarity mapping `src` onto `dst`. The flag is set when
/// the source points are (nearly) collinear, leaving the roll about the
/// line undetermined.
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> (Similarity, bool) {
    let n = src.len() as f64;
    let mu_x = src.iter().sum::<Vector3<f64>>() / n;
    let mu_y = dst.iter().sum::<Vector3<f64>>() / n;
    let var_x = src.iter().map(|x| (x - mu_x).norm_squared()).sum::<f64>() / n;
    let mut cov = Matrix3::zeros();
    let mut scatter = Matrix3::zeros();
    for (x, y) in src.iter().zip(dst) {
        cov += (y - mu_y) * (x - mu_x).transpose();
        scatter += (x - mu_x) * (x - mu_x).transpose();
    }
    cov /= n;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = Matrix3::identity();
    if u.determinant() * vt.determinant() < 0.0 {
        // Flip the axis of the smallest singular value.
        let k = (0..3)
            .min_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]))
            .unwrap();
        s[(k, k)] = -1.0;
    }
    let rotation = u * s * vt;
    let trace: f64 = (0..3).map(|k| svd.singular_values[k] * s[(k, k)]).sum();
    let scale = if var_x > 0.0 { trace / var_x } else { 1.0 };
    let translation = mu_y - rotation * mu_x * scale;
    let mut ev: Vec<f64> = scatter
        .symmetric_eigenvalues()
        .iter()
        .map(|v| v.abs())
        .collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    let collinear = ev[1] <= 1e-12 * ev[0].max(f64::MIN_POSITIVE);
    (
        Similarity {
            scale,
            rotation,
            translation,
        },
        collinear,
    )
}

/// Per-pair relative rotation and translation-direction errors, degrees.
pub fn pairwise_errors(est: &[PoseSample], gt: &[PoseSample]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for i in 0..est.len() {
        for j in i + 1..est.len() {
            let rel = |p: &[PoseSample]| {
                let r = p[j].rotation * p[i].rotation.transpose();
                (r, p[j].translation - r * p[i].translation)
            };
            let (re, te) = rel(est);
            let (rg, tg) = rel(gt);
            out.push((rotation_angle_deg(&re, &rg), vector_angle_deg(&te, &tg)));
        }
    }
    out
}

/// Percentages of frame pairs with relative rotation (RRA) and translation
/// direction (RTA) errors below `tau_deg`.
pub fn rra_rta(
    est: &[PoseSample],
    gt: &[PoseSample],
    tau_deg: f64,
) -> Result<(f64, f64), EvalError> {
    if est.len() < 2 || est.len() != gt.len() {
        return Err(EvalError::InsufficientFrames {
            got: est.len().min(gt.len()),
            needed: 2,
        });
    }
    let errs = pairwise_errors(est, gt);
    let n = errs.len() as f64;
    let rra = errs.iter().filter(|e| e.0 < tau_deg).count() as f64 / n * 100.0;
    let rta = errs.iter().filter(|e| e.1 < tau_deg).count() as f64 / n * 100.0;
    Ok((rra, rta))
}

/// Normalized area under the step CDF of `errors` on `[0, tau]`.
pub fn auc_pose(errors: &[f64], tau: f64) -> f64 {
    if errors.is_empty() || tau <= 0.0 {
        return 0.0;
    }
    let area: f64 = errors.iter().map(|&e| (tau - e).max(0.0)).sum();
    area / (errors.len() as f64 * tau)
}

/// AUC over frame pairs of the larger of the two relative errors.
pub fn auc_rt(est: &[PoseSample], gt: &[PoseSample], tau_deg: f64) -> f64 {
    let errs: Vec<f64> = pairwise_errors(est, gt)
        .iter()
        .map(|e| e.0.max(e.1))
        .collect();
    auc_pose(&errs, tau_deg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AteResult {
    /// RMSE of aligned centers divided by the ground-truth diameter.
    pub ate: f64,
    pub degenerate: bool,
}

pub fn diameter(points: &[Vector3<f64>]) -> f64 {
    let mut d: f64 = 0.0;
    for (k, a) in points.iter().enumerate() {
        for b in &points[k + 1..] {
            d = d.max((a - b).norm());
        }
    }
    d
}

pub fn ate(
    est_centers: &[Vector3<f64>],
    gt_centers: &[Vector3<f64>],
) -> Result<AteResult, EvalError> {
    if est_centers.len() < 3 || est_centers.len() != gt_centers.len() {
        return Err(EvalError::InsufficientFrames {
            got: est_centers.len().min(gt_centers.len()),
            needed: 3,
        });
    }
    let (sim, degenerate) = umeyama(est_centers, gt_centers);
    let mse = est_centers
        .iter()
        .zip(gt_centers)
        .map(|(e, g)| (sim.apply(e) - g).norm_squared())
        .sum::<f64>()
        / est_centers.len() as f64;
    let d = diameter(gt_centers);
    Ok(AteResult {
        ate: if d > 0.0 { mse.sqrt() / d } else { mse.sqrt() },
        degenerate,
    })
}

/// Percentage of queries whose absolute center error is below `trans_tol`
/// and rotation error below `rot_tol_deg`.
pub fn reloc_accuracy(
    est: &[PoseSample],
    gt: &[PoseSample],
    trans_tol: f64,
    rot_tol_deg: f64,
) -> f64 {
    if est.is_empty() {
        return 0.0;
    }
    let ok = est
        .iter()
        .zip(gt)
        .filter(|(e, g)| {
            (e.center() - g.center()).norm() < trans_tol
                && rotation_angle_deg(&e.rotation, &g.rotation) < rot_tol_deg
        })
        .count();
    ok as f64 / est.len() as f64 * 100.0
}

/// Metrics of an estimate against ground truth. Pairs and ATE use frames
/// registered in both; the registration rate is over ground-truth frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tau_deg: f64,
    pub gt_frames: usize,
    pub common_frames: usize,
    pub registration_rate: f64,
    pub rra: Option<f64>,
    pub rta: Option<f64>,
    pub auc: Option<f64>,
    pub ate: Option<f64>,
    pub ate_degenerate: bool,
}

pub fn evaluate_documents(est: &ResultDocument, gt: &ResultDocument, tau_deg: f64) -> EvalReport {
    let est_by_id: BTreeMap<u32, PoseSample> = est
        .frames
        .iter()
        .filter_map(|f| Some((f.frame_id, PoseSample::from_record(f)?)))
        .collect();
    let gt_by_id: BTreeMap<u32, PoseSample> = gt
        .frames
        .iter()
        .filter_map(|f| Some((f.frame_id, PoseSample::from_record(f)?)))
        .collect();
    let (mut e, mut g) = (Vec::new(), Vec::new());
    for (id, p) in &gt_by_id {
        if let Some(q) = est_by_id.get(id) {
            e.push(*q);
            g.push(*p);
        }
    }
    let pairs = rra_rta(&e, &g, tau_deg).ok();
    let ate_result = ate(
        &e.iter().map(PoseSample::center).collect::<Vec<_>>(),
        &g.iter().map(PoseSample::center).collect::<Vec<_>>(),
    )
    .ok();
    EvalReport {
        tau_deg,
        gt_frames: gt_by_id.len(),
        common_frames: e.len(),
        registration_rate: if gt_by_id.is_empty() {
            0.0
        } else {
            e.len() as f64 / gt_by_id.len() as f64 * 100.0
        },
        rra: pairs.map(|p| p.0),
        rta: pairs.map(|p| p.1),
        auc: pairs.map(|_| auc_rt(&e, &g, tau_deg) * 100.0),
        ate: ate_result.map(|a| a.ate),
        ate_degenerate: ate_result.is_some_and(|a| a.degenerate),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::axis_angle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ring(n: usize) -> Vec<PoseSample> {
        (0..n)
            .map(|k| {
                let a = k as f64 * 0.4;
                let r = axis_angle(&Vector3::new(0.1, 1.0, 0.2), a);
                let c = Vector3::new(3.0 * a.cos(), 0.5 * k as f64, 3.0 * a.sin());
                PoseSample {
                    rotation: r,
                    translation: -(r * c),
                }
            })
            .collect()
    }

    fn transform(p: &[PoseSample], s: f64, r: Matrix3<f64>, t: Vector3<f64>) -> Vec<PoseSample> {
        // World points map as X' = s r X + t; the camera sees the same image.
        p.iter()
            .map(|q| {
                let rot = q.rotation * r.transpose();
                let center = r * q.center() * s + t;
                PoseSample {
                    rotation: rot,
                    translation: -(rot * center),
                }
            })
            .collect()
    }

    #[test]
    fn identical_and_similar() {
        let gt = ring(6);
        assert_eq!(rra_rta(&gt, &gt, 5.0).unwrap(), (100.0, 100.0));
        let est = transform(
            &gt,
            7.0,
            axis_angle(&Vector3::new(1.0, 2.0, 3.0), 1.1),
            Vector3::new(4.0, -1.0, 2.0),
        );
        assert_eq!(rra_rta(&est, &gt, 5.0).unwrap(), (100.0, 100.0));
        let centers = |p: &[PoseSample]| p.iter().map(|x| x.center()).collect::<Vec<_>>();
        assert!(ate(&centers(&gt), &centers(&gt)).unwrap().ate < 1e-12);
        assert!(ate(&centers(&est), &centers(&gt)).unwrap().ate < 1e-9);
    }

    #[test]
    fn one_rotated_frame() {
        let gt = ring(3);
        let mut est = gt.clone();
        let c = est[2].center();
        est[2].rotation =
            axis_angle(&Vector3::new(0.0, 1.0, 0.0), 10f64.to_radians()) * est[2].rotation;
        est[2].translation = -(est[2].rotation * c);
        let (rra, _) = rra_rta(&est, &gt, 5.0).unwrap();
        assert!((rra - 100.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn auc_examples() {
        assert!((auc_pose(&[1.0, 2.0, 10.0], 5.0) - 7.0 / 15.0).abs() < 1e-12);
        assert_eq!(auc_pose(&[0.0, 0.0], 5.0), 1.0);
        assert_eq!(auc_pose(&[6.0, 7.0], 5.0), 0.0);
        let errs = [0.5, 3.0, 4.0, 9.0];
        assert!(auc_pose(&errs, 2.0) <= auc_pose(&errs, 5.0));
    }

    #[test]
    fn ate_single_displacement() {
        // Many points on a circle of diameter 2; one displaced by d along z.
        let n = 400;
        let gt: Vec<Vector3<f64>> = (0..n)
            .map(|k| {
                let a = k as f64 / n as f64 * std::f64::consts::TAU;
                Vector3::new(a.cos(), a.sin(), 0.0)
            })
            .collect();
        let mut est = gt.clone();
        let d = 0.01;
        est[0].z += d;
        let r = ate(&est, &gt).unwrap().ate;
        let expected = d / (2.0 * (n as f64).sqrt());
        assert!((r - expected).abs() < 0.05 * expected, "{r} vs {expected}");
    }

    #[test]
    fn ate_collinear_flagged() {
        let gt: Vec<_> = (0..5).map(|k| Vector3::new(k as f64, 0.0, 0.0)).collect();
        let res = ate(&gt, &gt).unwrap();
        assert!(res.degenerate);
        assert!(res.ate < 1e-12);
        assert!(matches!(
            ate(&gt[..2], &gt[..2]),
            Err(EvalError::InsufficientFrames { .. })
        ));
    }

    #[test]
    fn reloc_examples() {
        let gt = ring(4);
        assert_eq!(reloc_accuracy(&gt, &gt, 0.1, 5.0), 100.0);
        let mut est = gt.clone();
        let c = est[1].center() + Vector3::new(0.2, 0.0, 0.0);
        est[1].translation = -(est[1].rotation * c);
        assert_eq!(reloc_accuracy(&est, &gt, 0.1, 5.0), 75.0);
        let mut est = gt.clone();
        let c = est[2].center();
        est[2].rotation = axis_angle(&Vector3::z(), 6f64.to_radians()) * est[2].rotation;
        est[2].translation = -(est[2].rotation * c);
        assert_eq!(reloc_accuracy(&est, &gt, 0.1, 5.0), 75.0);
    }

    #[test]
    fn gauge_invariance_random() {
        let gt = ring(5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = pairwise_errors(&gt, &gt);
        for _ in 0..20 {
            let axis = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let est = transform(
                &gt,
                rng.random_range(0.1..10.0),
                axis_angle(&axis, rng.random_range(0.0..3.0)),
                Vector3::new(1.0, 2.0, 3.0),
            );
            for (a, b) in pairwise_errors(&est, &gt).iter().zip(&base) {
                assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn auc_rt_uses_the_larger_error() {
        let gt = ring(3);
        assert!((auc_rt(&gt, &gt, 5.0) - 1.0).abs() < 1e-12);
        let mut est = gt.clone();
        let c = est[0].center();
        est[0].rotation = axis_angle(&Vector3::x(), 2f64.to_radians()) * est[0].rotation;
        est[0].translation = -(est[0].rotation * c);
        let errs: Vec<f64> = pairwise_errors(&est, &gt)
            .iter()
            .map(|e| e.0.max(e.1))
            .collect();
        assert_eq!(auc_rt(&est, &gt, 5.0), auc_pose(&errs, 5.0));
        assert!(auc_rt(&est, &gt, 5.0) < 1.0);
    }

    #[test]
    fn document_report() {
        use crate::geometry::{CameraIntrinsics, CameraPose, FrameState};
        let k = CameraIntrinsics::centered(50.0, 64, 48).unwrap();
        let records = |poses: &[PoseSample], registered: &[bool]| ResultDocument {
            frames: poses
                .iter()
                .zip(registered)
                .enumerate()
                .map(|(i, (p, &reg))| {
                    let mut s = FrameState::new(i as u32, k);
                    s.pose = CameraPose::from_rotation(&p.rotation, p.translation);
                    FrameRecord::from_state(&s, reg).unwrap()
                })
                .collect(),
            metadata: Default::default(),
        };
        let gt = ring(5);
        let all = [true; 5];
        let r = evaluate_documents(&records(&gt, &all), &records(&gt, &all), 5.0);
        assert_eq!((r.rra, r.rta), (Some(100.0), Some(100.0)));
        assert_eq!(r.registration_rate, 100.0);
        assert!(r.ate.unwrap() < 1e-9);
        let partial = [true, true, false, false, false];
        let r = evaluate_documents(&records(&gt, &partial), &records(&gt, &all), 5.0);
        assert_eq!(r.common_frames, 2);
        assert_eq!(r.registration_rate, 40.0);
        assert_eq!(r.rra, Some(100.0));
        assert_eq!(r.ate, None);
    }
}
