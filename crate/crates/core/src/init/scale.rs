use nalgebra::{Vector2, Vector3};

use super::{lower_median, InitError, TwoViewEstimate};
use crate::geometry::CameraIntrinsics;

const SEARCH_LO: f64 = 1e-4;
const SEARCH_HI: f64 = 1e4;

fn reprojection_cost(p: &Vector3<f64>, q: &Vector3<f64>, target: &Vector2<f64>, s: f64) -> f64 {
    let x = p + q * s;
    if x.z <= 0.0 {
        return f64::INFINITY;
    }
    (x.xy() / x.z - target).norm_squared()
}

fn search_scale(p: &Vector3<f64>, q: &Vector3<f64>, target: &Vector2<f64>) -> Option<f64> {
    let cost = |u: f64| reprojection_cost(p, q, target, u.exp());
    let (lo, hi) = (SEARCH_LO.ln(), SEARCH_HI.ln());
    let n = 96;
    let step = (hi - lo) / n as f64;
    let (k, c) = (0..=n)
        .map(|k| (k, cost(lo + k as f64 * step)))
        .min_by(|a, b| a.1.total_cmp(&b.1))?;
    if !c.is_finite() {
        return None;
    }
    let (mut a, mut b) = (
        lo + (k.max(1) - 1) as f64 * step,
        lo + (k + 1).min(n) as f64 * step,
    );
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut x1, mut x2) = (b - g * (b - a), a + g * (b - a));
    let (mut f1, mut f2) = (cost(x1), cost(x2));
    for _ in 0..80 {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = cost(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = cost(x2);
        }
    }
    Some((0.5 * (a + b)).exp())
}

/// Positive `s` minimizing the normalized-image distance between the
/// projection of `p + s·q` and `target`. Closed form when well
/// conditioned, otherwise a bracketed search over `s ∈ [1e-4, 1e4]`.
pub fn solve_ray_scale(p: &Vector3<f64>, q: &Vector3<f64>, target: &Vector2<f64>) -> Option<f64> {
    // proj(p + s q) - target = (a + s b) / (p_z + s q_z); the stationarity
    // condition is linear in s.
    let a = p.xy() - target * p.z;
    let b = q.xy() - target * q.z;
    let num = q.z * a.dot(&a) - p.z * a.dot(&b);
    let den = p.z * b.dot(&b) - q.z * a.dot(&b);
    let magnitude = p.z.abs() * b.dot(&b) + q.z.abs() * a.norm() * b.norm();
    if magnitude == 0.0 || den.abs() <= 1e-9 * magnitude {
        return search_scale(p, q, target);
    }
    let s = num / den;
    (s > 0.0 && p.z + s * q.z > 0.0 && s.is_finite()).then_some(s)
}

/// A source pixel with its metric depth and the matched destination pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleSample {
    pub src_pixel: Vector2<f64>,
    pub depth: f64,
    pub dst_pixel: Vector2<f64>,
}

/// Baseline length making `X_dst = R X_src + s t̂` agree with the source
/// depths: the median of per-sample ray solutions.
pub fn resolve_translation_scale(
    estimate: &TwoViewEstimate,
    samples: &[ScaleSample],
    k_src: &CameraIntrinsics,
    k_dst: &CameraIntrinsics,
) -> Result<f64, InitError> {
    let mut scales: Vec<f64> = samples
        .iter()
        .filter(|s| s.depth.is_finite() && s.depth > 0.0)
        .filter_map(|s| {
            let ray = k_src.normalize(&s.src_pixel);
            let x = Vector3::new(ray.x, ray.y, 1.0) * s.depth;
            solve_ray_scale(
                &(estimate.rotation * x),
                &estimate.translation_dir,
                &k_dst.normalize(&s.dst_pixel),
            )
        })
        .collect();
    lower_median(&mut scales).ok_or_else(|| {
        InitError::ScaleResolutionFailure("no sample yields a positive-depth minimizer".into())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::axis_angle;
    use nalgebra::Matrix3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scene(
        r: Matrix3<f64>,
        t: Vector3<f64>,
        k: &CameraIntrinsics,
        n: usize,
        seed: u64,
    ) -> Vec<ScaleSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        while out.len() < n {
            let p = Vector2::new(rng.random_range(0.0..64.0), rng.random_range(0.0..48.0));
            let d = rng.random_range(4.0..9.0);
            let n = k.normalize(&p);
            let y = r * (Vector3::new(n.x, n.y, 1.0) * d) + t;
            if y.z > 0.1 {
                out.push(ScaleSample {
                    src_pixel: p,
                    depth: d,
                    dst_pixel: k.denormalize(&(y.xy() / y.z)),
                });
            }
        }
        out
    }

    fn estimate(r: Matrix3<f64>, t: Vector3<f64>) -> TwoViewEstimate {
        TwoViewEstimate {
            rotation: r,
            translation_dir: t.normalize(),
            inlier_mask: vec![],
            scale: None,
        }
    }

    #[test]
    fn recovers_baseline() {
        let k = CameraIntrinsics::centered(60.0, 64, 48).unwrap();
        let r = axis_angle(&Vector3::new(0.1, 1.0, 0.0), 0.2);
        let t = Vector3::new(1.2, 0.3, -0.4).normalize() * 2.0;
        let samples = scene(r, t, &k, 200, 1);
        let s = resolve_translation_scale(&estimate(r, t), &samples, &k, &k).unwrap();
        assert!((s - 2.0).abs() < 1e-6, "{s}");

        // Equivariance in the source depth scale.
        let scaled: Vec<_> = samples
            .iter()
            .map(|x| ScaleSample {
                depth: x.depth * 3.0,
                ..*x
            })
            .collect();
        let s3 = resolve_translation_scale(&estimate(r, t), &scaled, &k, &k).unwrap();
        assert!((s3 - 3.0 * s).abs() < 1e-9 * s3);

        // Junk depths on 30% of samples.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let junk: Vec<_> = samples
            .iter()
            .map(|x| {
                if rng.random_bool(0.3) {
                    ScaleSample {
                        depth: x.depth * rng.random_range(0.2..5.0),
                        ..*x
                    }
                } else {
                    *x
                }
            })
            .collect();
        let sj = resolve_translation_scale(&estimate(r, t), &junk, &k, &k).unwrap();
        assert!((sj - 2.0).abs() < 0.04, "{sj}");
    }

    #[test]
    fn forward_motion() {
        let k = CameraIntrinsics::centered(60.0, 64, 48).unwrap();
        let r = Matrix3::identity();
        let t = Vector3::new(0.0, 0.0, -1.5);
        let mut samples = scene(r, t, &k, 200, 3);
        // A pixel exactly on the optical axis cannot be resolved in closed form.
        samples.push(ScaleSample {
            src_pixel: k.principal_point,
            depth: 5.0,
            dst_pixel: k.principal_point,
        });
        let s = resolve_translation_scale(&estimate(r, t), &samples, &k, &k).unwrap();
        assert!((s - 1.5).abs() < 0.015, "{s}");
    }

    #[test]
    fn search_fallback_finds_minimum() {
        let p = Vector3::new(0.5, 0.0, 4.0);
        let q = Vector3::new(0.0, 0.0, -1.0);
        let target = Vector2::new(0.25, 0.0);
        let s = search_scale(&p, &q, &target).unwrap();
        assert!((s - 2.0).abs() < 1e-6, "{s}");
        assert!((solve_ray_scale(&p, &q, &target).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn no_valid_samples() {
        let k = CameraIntrinsics::centered(60.0, 64, 48).unwrap();
        let est = estimate(Matrix3::identity(), Vector3::x());
        let bad = [ScaleSample {
            src_pixel: Vector2::new(1.0, 1.0),
            depth: -1.0,
            dst_pixel: Vector2::new(2.0, 1.0),
        }];
        assert!(matches!(
            resolve_translation_scale(&est, &bad, &k, &k),
            Err(InitError::ScaleResolutionFailure(_))
        ));
    }
}
