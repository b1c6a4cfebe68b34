use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::essential::{select_pose, PointPair};
use super::{InitError, TwoViewConfig};
use crate::geometry::CameraIntrinsics;
use crate::io::CorrespondenceSet;
use crate::ransac::{estimate_essential_marginalized, sampson_distance, RansacConfig};

/// Relative pose `X_dst = R X_src + scale · translation_dir`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoViewEstimate {
    pub rotation: Matrix3<f64>,
    pub translation_dir: Vector3<f64>,
    /// One flag per input correspondence.
    pub inlier_mask: Vec<bool>,
    pub scale: Option<f64>,
}

impl TwoViewEstimate {
    pub fn inlier_count(&self) -> usize {
        self.inlier_mask.iter().filter(|&&b| b).count()
    }
}

/// Pixel pairs of a correspondence set, source first.
pub fn pixel_pairs(corrs: &CorrespondenceSet) -> Vec<PointPair> {
    corrs
        .matches
        .iter()
        .map(|m| (m.src_pixel(), m.dst_pixel()))
        .collect()
}

/// Relative pose from pixel matches via marginalized-score RANSAC and
/// cheirality-based decomposition.
pub fn two_view_pose(
    pixels: &[PointPair],
    k_src: &CameraIntrinsics,
    k_dst: &CameraIntrinsics,
    cfg: &TwoViewConfig,
) -> Result<TwoViewEstimate, InitError> {
    let pairs: Vec<PointPair> = pixels
        .iter()
        .map(|(a, b)| (k_src.normalize(a), k_dst.normalize(b)))
        .collect();
    if pairs.len() < 5 {
        return Err(InitError::TwoViewFailure(format!(
            "{} correspondences, need 5",
            pairs.len()
        )));
    }
    let subset: Vec<PointPair> = if pairs.len() > cfg.max_points {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
        let mut idx = sample(&mut rng, pairs.len(), cfg.max_points).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| pairs[i]).collect()
    } else {
        pairs.clone()
    };
    let tau = cfg.inlier_tau_px / (k_src.focal * k_dst.focal).sqrt();
    let ransac = RansacConfig {
        hypotheses: cfg.ransac_iters,
        tau_max: tau,
        steps: cfg.steps,
        seed: cfg.seed,
        solver: cfg.solver,
        refine: cfg.refine,
        grid: None,
    };
    let est = estimate_essential_marginalized(&subset, &ransac)
        .map_err(|e| InitError::TwoViewFailure(e.to_string()))?;
    let inlier_mask: Vec<bool> = pairs
        .iter()
        .map(|(a, b)| sampson_distance(&est.essential, a, b) < tau)
        .collect();
    let inliers = pairs
        .iter()
        .zip(&inlier_mask)
        .filter(|(_, &m)| m)
        .map(|(p, _)| p);
    let (rotation, translation_dir, positive) = select_pose(&est.essential, inliers);
    if positive < 5 {
        return Err(InitError::TwoViewFailure(format!(
            "only {positive} cheirality-consistent inliers"
        )));
    }
    Ok(TwoViewEstimate {
        rotation,
        translation_dir,
        inlier_mask,
        scale: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{axis_angle, rotation_angle_deg, vector_angle_deg};
    use nalgebra::Vector2;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    struct Pair {
        r: Matrix3<f64>,
        t: Vector3<f64>,
        pixels: Vec<PointPair>,
    }

    fn synth(n: usize, outliers: f64, noise_px: f64, seed: u64) -> (Pair, CameraIntrinsics) {
        let k = CameraIntrinsics::centered(500.0, 640, 480).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = axis_angle(&Vector3::new(0.3, 1.0, -0.2), 0.25);
        let t = Vector3::new(1.0, 0.2, 0.1).normalize();
        let noise = Normal::new(0.0, noise_px.max(1e-300)).unwrap();
        let mut pixels = Vec::new();
        while pixels.len() < n {
            let p = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            let d = rng.random_range(4.0..10.0);
            let x = k.normalize(&p);
            let y = r * (Vector3::new(x.x, x.y, 1.0) * d) + t;
            let mut q = k.denormalize(&(y.xy() / y.z));
            if !(0.0..640.0).contains(&q.x) || !(0.0..480.0).contains(&q.y) {
                continue;
            }
            if rng.random_bool(outliers) {
                q = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            } else if noise_px > 0.0 {
                q += Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
            }
            pixels.push((p, q));
        }
        (Pair { r, t, pixels }, k)
    }

    #[test]
    fn noiseless_pair() {
        let (pair, k) = synth(100, 0.0, 0.0, 1);
        let est = two_view_pose(&pair.pixels, &k, &k, &TwoViewConfig::default()).unwrap();
        assert!(rotation_angle_deg(&est.rotation, &pair.r) < 1e-6);
        assert!(vector_angle_deg(&est.translation_dir, &pair.t) < 1e-6);
        assert!((est.translation_dir.norm() - 1.0).abs() < 1e-12);
        assert!(est.scale.is_none());
    }

    #[test]
    fn outliers_and_noise() {
        let (pair, k) = synth(1000, 0.5, 1.0, 2);
        let est = two_view_pose(&pair.pixels, &k, &k, &TwoViewConfig::default()).unwrap();
        assert!(rotation_angle_deg(&est.rotation, &pair.r) < 0.5);
    }

    #[test]
    fn coplanar_through_centers_fails() {
        let k = CameraIntrinsics::centered(500.0, 640, 480).unwrap();
        let t = Vector3::new(-1.0, 0.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pixels: Vec<PointPair> = (0..50)
            .map(|_| {
                let x = Vector3::new(rng.random_range(-2.0..2.0), 0.0, rng.random_range(3.0..8.0));
                let y = x + t;
                (
                    k.denormalize(&(x.xy() / x.z)),
                    k.denormalize(&(y.xy() / y.z)),
                )
            })
            .collect();
        assert!(matches!(
            two_view_pose(&pixels, &k, &k, &TwoViewConfig::default()),
            Err(InitError::TwoViewFailure(_))
        ));
    }
}
