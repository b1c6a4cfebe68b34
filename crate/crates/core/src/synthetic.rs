//! Ground-truth scene generator: cameras over an analytic surface, exact
//! depths published through a known inverse affine map, and dense
//! cross-projected correspondences with noise and confident outliers.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::eval::{diameter, umeyama, PoseSample};
use crate::geometry::{
    rotation_angle_deg, AffineDepthCorrection, CameraIntrinsics, CameraPose, FrameState,
};
use crate::io::{
    write_correspondences, write_depth, write_pointmap, write_result, CorrespondenceSet, DepthMap,
    FrameEntry, FrameRecord, IntrinsicsEntry, IoError, Match, PairEntry, PointMap, ResultDocument,
    RunMetadata, SceneData, SceneFrame, SceneManifest,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trajectory {
    /// Arc around the origin at constant height, looking at the origin.
    Orbit,
    /// Straight line parallel to the x axis, looking across the surface.
    Line,
    /// Random positions in a ball above the origin, looking near it.
    RandomInsideSphere,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Surface {
    Plane,
    SinusoidHeightfield,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutlierMode {
    /// Destination replaced by a uniformly random pixel.
    UniformPixel,
    /// Destination taken from the point's projection into another frame.
    WrongFrame,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub frame_count: usize,
    pub image_size: (u32, u32),
    pub focal_true: f64,
    pub trajectory: Trajectory,
    pub surface: Surface,
    /// Peak height of the sinusoid heightfield.
    pub surface_amplitude: f64,
    /// Radius of the orbit (or half-length of the line).
    pub radius: f64,
    /// Camera height above the surface's mean level.
    pub height: f64,
    /// Angular extent of the orbit, degrees.
    pub arc_degrees: f64,
    /// Relative Gaussian noise on the true depth before publishing.
    pub depth_noise_sigma: f64,
    pub affine_alpha_range: (f64, f64),
    /// Shift range as a fraction of the scene's median depth.
    pub affine_beta_range: (f64, f64),
    pub corr_noise_px: f64,
    pub outlier_fraction: f64,
    pub outlier_mode: OutlierMode,
    /// Pairs sharing fewer than this fraction of source pixels get no file.
    pub min_pair_overlap: f64,
    /// Write per-frame intrinsics into the manifest.
    pub emit_intrinsics: bool,
    pub shared_intrinsics: bool,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            frame_count: 20,
            image_size: (96, 72),
            focal_true: 80.0,
            trajectory: Trajectory::Orbit,
            surface: Surface::SinusoidHeightfield,
            surface_amplitude: 0.5,
            radius: 4.0,
            height: 3.0,
            arc_degrees: 360.0,
            depth_noise_sigma: 0.0,
            affine_alpha_range: (0.8, 1.2),
            affine_beta_range: (-0.05, 0.05),
            corr_noise_px: 2.0,
            outlier_fraction: 0.2,
            outlier_mode: OutlierMode::UniformPixel,
            min_pair_overlap: 0.05,
            emit_intrinsics: true,
            shared_intrinsics: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SyntheticError {
    #[error("infeasible configuration: {0}")]
    ConfigInfeasible(String),
    #[error("oracle alignment impossible: {0} registered frames, need 3")]
    AlignmentImpossible(usize),
}

#[derive(Debug, Clone)]
pub struct SyntheticFrame {
    /// Ground-truth state: true intrinsics, pose and correction.
    pub truth: FrameState,
    /// Exact camera depth per pixel, row-major; NaN where the ray misses.
    pub true_depth: Vec<f64>,
    pub published: DepthMap,
    /// Camera-frame points from the true depth.
    pub pointmap: PointMap,
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub config: SyntheticConfig,
    pub frames: Vec<SyntheticFrame>,
    /// One set per ordered pair with enough overlap.
    pub correspondences: Vec<CorrespondenceSet>,
    /// Median true depth over all frames.
    pub depth_scale: f64,
}

const WAVENUMBER: f64 = 1.3;

fn surface_height(surface: Surface, amplitude: f64, x: f64, y: f64) -> f64 {
    match surface {
        Surface::Plane => 0.0,
        Surface::SinusoidHeightfield => amplitude * (WAVENUMBER * x).sin() * (WAVENUMBER * y).cos(),
    }
}

/// Camera-frame depth of the first surface hit along the pixel ray
/// `center + λ·dir` (dir has unit camera z), or `None`.
fn ray_cast(
    surface: Surface,
    amplitude: f64,
    center: &Vector3<f64>,
    dir: &Vector3<f64>,
) -> Option<f64> {
    let f = |l: f64| {
        let p = center + dir * l;
        p.z - surface_height(surface, amplitude, p.x, p.y)
    };
    if f(0.0) <= 0.0 {
        return None;
    }
    if surface == Surface::Plane {
        return (dir.z < 0.0).then(|| -center.z / dir.z);
    }
    let (mut lo, mut step) = (0.0, 0.02);
    let mut hi = None;
    while lo < 200.0 {
        let next = lo + step;
        if f(next) <= 0.0 {
            hi = Some(next);
            break;
        }
        lo = next;
        step = (step * 1.05).min(0.1);
    }
    let mut hi = hi?;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// World-to-camera pose looking from `center` at `target` with world +z up
/// (camera x right, y down, z forward).
pub fn look_at(center: &Vector3<f64>, target: &Vector3<f64>) -> CameraPose {
    let forward = (target - center).normalize();
    let right = forward.cross(&Vector3::z()).normalize();
    let down = forward.cross(&right);
    let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    CameraPose::from_rotation(&r, -(r * center))
}

fn camera_centers(
    cfg: &SyntheticConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    let n = cfg.frame_count;
    (0..n)
        .map(|k| {
            // A closed orbit must not place the last camera on the first.
            let closed = cfg.trajectory == Trajectory::Orbit && cfg.arc_degrees >= 360.0;
            let u = match n {
                1 => 0.5,
                _ if closed => k as f64 / n as f64,
                _ => k as f64 / (n - 1) as f64,
            };
            match cfg.trajectory {
                Trajectory::Orbit => {
                    let a = (u - 0.5) * cfg.arc_degrees.to_radians();
                    (
                        Vector3::new(cfg.radius * a.cos(), cfg.radius * a.sin(), cfg.height),
                        Vector3::zeros(),
                    )
                }
                Trajectory::Line => {
                    let x = (u - 0.5) * 2.0 * cfg.radius;
                    (
                        Vector3::new(x, -cfg.radius, cfg.height),
                        Vector3::new(x, 0.0, 0.0),
                    )
                }
                Trajectory::RandomInsideSphere => {
                    let c = loop {
                        let v = Vector3::new(
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                        );
                        if v.norm() <= 1.0 {
                            break v * cfg.radius * 0.5 + Vector3::new(0.0, 0.0, cfg.height);
                        }
                    };
                    let target = Vector3::new(
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.5..0.5),
                        0.0,
                    );
                    (c, target)
                }
            }
        })
        .collect()
}

impl SyntheticFrame {
    fn true_depth_at(&self, p: &Vector2<f64>) -> Option<f64> {
        let k = &self.truth.intrinsics;
        let (u, v) = (p.x.round(), p.y.round());
        if u < 0.0 || v < 0.0 || u >= k.width as f64 || v >= k.height as f64 {
            return None;
        }
        let d = self.true_depth[v as usize * k.width as usize + u as usize];
        d.is_finite().then_some(d)
    }

    fn rotation(&self) -> Matrix3<f64> {
        self.truth
            .pose
            .rotation()
            .expect("synthetic poses are valid")
    }

    fn world_point(&self, u: u32, v: u32) -> Option<Vector3<f64>> {
        let k = &self.truth.intrinsics;
        let d = self.true_depth[v as usize * k.width as usize + u as usize];
        if !d.is_finite() {
            return None;
        }
        let n = k.normalize(&Vector2::new(u as f64, v as f64));
        let x_cam = Vector3::new(n.x, n.y, 1.0) * d;
        Some(self.rotation().transpose() * (x_cam - self.truth.pose.translation))
    }

    /// Visible projection of a world point, with occlusion check.
    fn observe(&self, x: &Vector3<f64>) -> Option<Vector2<f64>> {
        let k = &self.truth.intrinsics;
        let c = self.rotation() * x + self.truth.pose.translation;
        if c.z <= 1e-6 {
            return None;
        }
        let q = k.denormalize(&(c.xy() / c.z));
        let (w, h) = (k.width as f64 - 1.0, k.height as f64 - 1.0);
        if !(0.0..=w).contains(&q.x) || !(0.0..=h).contains(&q.y) {
            return None;
        }
        let seen = self.true_depth_at(&q)?;
        ((seen - c.z).abs() <= 0.05 * c.z).then_some(q)
    }
}

impl SyntheticScene {
    pub fn ground_truth(&self) -> Vec<FrameState> {
        self.frames.iter().map(|f| f.truth).collect()
    }

    pub fn frame(&self, id: u32) -> Option<&SyntheticFrame> {
        self.frames.iter().find(|f| f.truth.frame_id == id)
    }

    /// Noise-free matches `i -> j` in f64, before file quantization.
    pub fn exact_correspondences(&self, i: u32, j: u32) -> Vec<(Vector2<f64>, Vector2<f64>)> {
        let (Some(a), Some(b)) = (self.frame(i), self.frame(j)) else {
            return Vec::new();
        };
        let k = &a.truth.intrinsics;
        let mut out = Vec::new();
        for v in 0..k.height {
            for u in 0..k.width {
                if let Some(q) = a.world_point(u, v).and_then(|x| b.observe(&x)) {
                    out.push((Vector2::new(u as f64, v as f64), q));
                }
            }
        }
        out
    }

    pub fn ground_truth_map(&self) -> BTreeMap<u32, FrameState> {
        self.frames
            .iter()
            .map(|f| (f.truth.frame_id, f.truth))
            .collect()
    }

    /// The scene as the pipeline sees it after loading from disk.
    pub fn to_scene_data(&self) -> SceneData {
        SceneData {
            frames: self
                .frames
                .iter()
                .map(|f| {
                    let k = &f.truth.intrinsics;
                    SceneFrame {
                        frame_id: f.truth.frame_id,
                        width: k.width,
                        height: k.height,
                        depth: f.published.clone(),
                        pointmap: Some(f.pointmap.clone()),
                        intrinsics: self.config.emit_intrinsics.then_some(IntrinsicsEntry {
                            focal: k.focal,
                            cx: k.principal_point.x,
                            cy: k.principal_point.y,
                        }),
                    }
                })
                .collect(),
            correspondences: self.correspondences.clone(),
            shared_intrinsics: self.config.shared_intrinsics,
        }
    }

    pub fn depth_maps(&self) -> HashMap<u32, &DepthMap> {
        self.frames
            .iter()
            .map(|f| (f.truth.frame_id, &f.published))
            .collect()
    }

    pub fn centers(&self) -> Vec<Vector3<f64>> {
        self.frames
            .iter()
            .map(|f| f.truth.pose.center().unwrap())
            .collect()
    }

    pub fn diameter(&self) -> f64 {
        diameter(&self.centers())
    }

    /// Writes depth, pointmap and correspondence files, `manifest.json`
    /// and the ground truth as `ground_truth.json`. Returns the manifest path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf, IoError> {
        std::fs::create_dir_all(dir).map_err(|e| IoError::file(dir, e))?;
        let mut frames = Vec::new();
        for f in &self.frames {
            let id = f.truth.frame_id;
            let k = &f.truth.intrinsics;
            let depth_path = PathBuf::from(format!("frame_{id:04}_depth.bin"));
            let pointmap_path = PathBuf::from(format!("frame_{id:04}_points.bin"));
            write_depth(&dir.join(&depth_path), &f.published)?;
            write_pointmap(&dir.join(&pointmap_path), &f.pointmap)?;
            frames.push(FrameEntry {
                frame_id: id,
                width: k.width,
                height: k.height,
                depth_path,
                pointmap_path: Some(pointmap_path),
                intrinsics: self.config.emit_intrinsics.then_some(IntrinsicsEntry {
                    focal: k.focal,
                    cx: k.principal_point.x,
                    cy: k.principal_point.y,
                }),
            });
        }
        let mut pairs = Vec::new();
        for c in &self.correspondences {
            let path = PathBuf::from(format!("corr_{:04}_{:04}.bin", c.frame_i, c.frame_j));
            write_correspondences(&dir.join(&path), c)?;
            pairs.push(PairEntry {
                i: c.frame_i,
                j: c.frame_j,
                correspondence_path: path,
            });
        }
        let manifest = SceneManifest {
            frames,
            pairs,
            shared_intrinsics: self.config.shared_intrinsics,
        };
        let manifest_path = dir.join("manifest.json");
        manifest.write(&manifest_path)?;
        let truth = ResultDocument {
            frames: self
                .frames
                .iter()
                .map(|f| FrameRecord::from_state(&f.truth, true).expect("valid synthetic state"))
                .collect(),
            metadata: RunMetadata {
                seed: self.config.seed,
                config: serde_json::to_value(&self.config).unwrap_or_default(),
                histogram: None,
                notes: vec!["ground truth".into()],
            },
        };
        write_result(&truth, &dir.join("ground_truth.json"))?;
        Ok(manifest_path)
    }
}

/// Builds a scene deterministically from `cfg.seed`.
pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticScene, SyntheticError> {
    if !(0.0..1.0).contains(&cfg.outlier_fraction) {
        return Err(SyntheticError::ConfigInfeasible(
            "outlier_fraction must lie in [0, 1)".into(),
        ));
    }
    if cfg.frame_count == 0 || cfg.image_size.0 == 0 || cfg.image_size.1 == 0 {
        return Err(SyntheticError::ConfigInfeasible(
            "empty frame set or image".into(),
        ));
    }
    let (lo, hi) = cfg.affine_alpha_range;
    if lo <= 0.0 || hi < lo {
        return Err(SyntheticError::ConfigInfeasible(
            "alpha range must be positive and ordered".into(),
        ));
    }
    let intrinsics = CameraIntrinsics::centered(cfg.focal_true, cfg.image_size.0, cfg.image_size.1)
        .map_err(|e| SyntheticError::ConfigInfeasible(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (w, h) = cfg.image_size;
    let pixels = (w * h) as usize;

    let mut frames = Vec::with_capacity(cfg.frame_count);
    for (k, (center, target)) in camera_centers(cfg, &mut rng).into_iter().enumerate() {
        let pose = look_at(&center, &target);
        let r = pose.rotation().unwrap();
        let mut depth = Vec::with_capacity(pixels);
        for v in 0..h {
            for u in 0..w {
                let n = intrinsics.normalize(&Vector2::new(u as f64, v as f64));
                let dir = r.transpose() * Vector3::new(n.x, n.y, 1.0);
                depth.push(
                    ray_cast(cfg.surface, cfg.surface_amplitude, &center, &dir).unwrap_or(f64::NAN),
                );
            }
        }
        let hits = depth.iter().filter(|d| d.is_finite()).count();
        if (hits as f64) < 0.8 * pixels as f64 {
            return Err(SyntheticError::ConfigInfeasible(format!(
                "frame {k} sees the surface in only {hits} of {pixels} pixels"
            )));
        }
        let mut state = FrameState::new(k as u32, intrinsics);
        state.pose = pose;
        frames.push(SyntheticFrame {
            truth: state,
            true_depth: depth,
            published: DepthMap::new(w, h, vec![f32::NAN; pixels]),
            pointmap: PointMap::new(w, h, vec![[0.0; 3]; pixels]),
        });
    }

    let mut all: Vec<f64> = frames
        .iter()
        .flat_map(|f| f.true_depth.iter().copied())
        .filter(|d| d.is_finite())
        .collect();
    let depth_scale = crate::init::lower_median(&mut all).unwrap_or(1.0);

    let noise = Normal::new(0.0, 1.0).unwrap();
    for f in &mut frames {
        let alpha = rng.random_range(cfg.affine_alpha_range.0..=cfg.affine_alpha_range.1);
        let beta =
            depth_scale * rng.random_range(cfg.affine_beta_range.0..=cfg.affine_beta_range.1);
        f.truth.correction = AffineDepthCorrection::new(alpha, beta).expect("alpha is positive");
        let k = f.truth.intrinsics;
        let mut published = Vec::with_capacity(pixels);
        let mut points = Vec::with_capacity(pixels);
        for (idx, &d) in f.true_depth.iter().enumerate() {
            if !d.is_finite() {
                published.push(f32::NAN);
                points.push([0.0, 0.0, f32::NAN]);
                continue;
            }
            let noisy = d * (1.0 + cfg.depth_noise_sigma * noise.sample(&mut rng));
            published.push(((noisy - beta) / alpha) as f32);
            let (u, v) = ((idx % w as usize) as f64, (idx / w as usize) as f64);
            let n = k.normalize(&Vector2::new(u, v));
            points.push([(n.x * d) as f32, (n.y * d) as f32, d as f32]);
        }
        f.published = DepthMap::new(w, h, published);
        f.pointmap = PointMap::new(w, h, points);
    }

    let mut scene = SyntheticScene {
        config: cfg.clone(),
        frames,
        correspondences: Vec::new(),
        depth_scale,
    };
    let ids: Vec<u32> = scene.frames.iter().map(|f| f.truth.frame_id).collect();
    let pixel_noise = Normal::new(0.0, cfg.corr_noise_px.max(0.0)).unwrap();
    let mut sets = Vec::new();
    for &i in &ids {
        for &j in &ids {
            if i == j {
                continue;
            }
            let exact = scene.exact_correspondences(i, j);
            if (exact.len() as f64) < cfg.min_pair_overlap * pixels as f64 {
                continue;
            }
            let src_frame = scene.frame(i).unwrap();
            let matches = exact
                .iter()
                .map(|(p, q)| {
                    let confidence = rng.random_range(0.5f32..=1.0);
                    let mut dst = *q;
                    if cfg.corr_noise_px > 0.0 {
                        dst += Vector2::new(
                            pixel_noise.sample(&mut rng),
                            pixel_noise.sample(&mut rng),
                        );
                    }
                    if rng.random_bool(cfg.outlier_fraction) {
                        dst = outlier_destination(cfg, &scene, src_frame, i, j, p, &mut rng);
                    }
                    Match {
                        src: [p.x as f32, p.y as f32],
                        dst: [dst.x as f32, dst.y as f32],
                        confidence,
                    }
                })
                .collect();
            sets.push(CorrespondenceSet {
                frame_i: i,
                frame_j: j,
                matches,
            });
        }
    }
    scene.correspondences = sets;
    Ok(scene)
}

fn outlier_destination(
    cfg: &SyntheticConfig,
    scene: &SyntheticScene,
    src: &SyntheticFrame,
    i: u32,
    j: u32,
    p: &Vector2<f64>,
    rng: &mut ChaCha8Rng,
) -> Vector2<f64> {
    let (w, h) = cfg.image_size;
    let uniform = |rng: &mut ChaCha8Rng| {
        Vector2::new(
            rng.random_range(0.0..(w - 1) as f64),
            rng.random_range(0.0..(h - 1) as f64),
        )
    };
    match cfg.outlier_mode {
        OutlierMode::UniformPixel => uniform(rng),
        OutlierMode::WrongFrame => {
            let others: Vec<&SyntheticFrame> = scene
                .frames
                .iter()
                .filter(|f| f.truth.frame_id != i && f.truth.frame_id != j)
                .collect();
            if others.is_empty() {
                return uniform(rng);
            }
            let other = others[rng.random_range(0..others.len())];
            src.world_point(p.x as u32, p.y as u32)
                .and_then(|x| other.observe(&x))
                .unwrap_or_else(|| uniform(rng))
        }
    }
}

/// Per-frame comparison against ground truth after similarity alignment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameOracle {
    pub frame_id: u32,
    pub rotation_error_deg: f64,
    /// Aligned center distance in ground-truth units.
    pub translation_error: f64,
    /// Relative error of `scale · alpha_est` against the true alpha.
    pub alpha_error: f64,
    /// `|scale · beta_est - beta_true|` divided by the scene depth scale.
    pub beta_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub frames: Vec<FrameOracle>,
    /// Global scale mapping estimated units to ground-truth units.
    pub scale: f64,
    pub diameter: f64,
}

impl OracleReport {
    pub fn max_rotation_error(&self) -> f64 {
        self.frames
            .iter()
            .map(|f| f.rotation_error_deg)
            .fold(0.0, f64::max)
    }

    pub fn max_translation_error(&self) -> f64 {
        self.frames
            .iter()
            .map(|f| f.translation_error)
            .fold(0.0, f64::max)
    }
}

/// Compares registered estimates with the scene's ground truth.
pub fn oracle_metrics(
    scene: &SyntheticScene,
    estimates: &BTreeMap<u32, FrameState>,
) -> Result<OracleReport, SyntheticError> {
    let pairs: Vec<(&SyntheticFrame, &FrameState)> = scene
        .frames
        .iter()
        .filter_map(|f| estimates.get(&f.truth.frame_id).map(|e| (f, e)))
        .collect();
    if pairs.len() < 3 {
        return Err(SyntheticError::AlignmentImpossible(pairs.len()));
    }
    let sample = |s: &FrameState| {
        PoseSample::from_state(s).unwrap_or(PoseSample {
            rotation: Matrix3::identity(),
            translation: s.pose.translation,
        })
    };
    let est_centers: Vec<Vector3<f64>> = pairs.iter().map(|(_, e)| sample(e).center()).collect();
    let gt_centers: Vec<Vector3<f64>> = pairs
        .iter()
        .map(|(f, _)| sample(&f.truth).center())
        .collect();
    let (sim, _) = umeyama(&est_centers, &gt_centers);
    let frames = pairs
        .iter()
        .zip(&est_centers)
        .map(|((f, e), c)| {
            let (gt, est) = (sample(&f.truth), sample(e));
            // Aligned world-to-camera rotation of the estimate.
            let aligned = est.rotation * sim.rotation.transpose();
            FrameOracle {
                frame_id: f.truth.frame_id,
                rotation_error_deg: rotation_angle_deg(&aligned, &gt.rotation),
                translation_error: (sim.apply(c) - gt.center()).norm(),
                alpha_error: (sim.scale * e.correction.alpha() - f.truth.correction.alpha()).abs()
                    / f.truth.correction.alpha(),
                beta_error: (sim.scale * e.correction.beta - f.truth.correction.beta).abs()
                    / scene.depth_scale,
            }
        })
        .collect();
    Ok(OracleReport {
        frames,
        scale: sim.scale,
        diameter: diameter(&gt_centers),
    })
}
