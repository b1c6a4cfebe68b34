//! End-to-end reconstruction: graph, data matrix, tree registration, then
//! coarse and fine optimization.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::distribution::ResidualHistogram;
use crate::geometry::{CameraIntrinsics, FrameState, GeometryError};
use crate::graph::{
    build_pose_graph, greedy_spanning_tree, sample_data_matrix, star_decomposition, PoseGraph,
    DEFAULT_CHI, DEFAULT_KAPPA, DEFAULT_NU,
};
use crate::init::{
    calibrate_from_pointmap, register_spanning_tree, shared_focal, InitConfig, InitError,
    RegistrationReport,
};
use crate::io::{DepthMap, FrameRecord, HistogramSummary, ResultDocument, RunMetadata, SceneData};
use crate::solver::{coarse_stage, fine_stage, Hooks, OptimizerConfig, SolverError, StageReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SfmConfig {
    pub kappa: usize,
    pub nu: f64,
    pub chi: f64,
    /// Force one shared focal even if the manifest does not ask for it.
    pub shared_intrinsics: bool,
    pub init: InitConfig,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for SfmConfig {
    fn default() -> Self {
        Self {
            kappa: DEFAULT_KAPPA,
            nu: DEFAULT_NU,
            chi: DEFAULT_CHI,
            shared_intrinsics: false,
            init: InitConfig::default(),
            optimizer: OptimizerConfig::default(),
            seed: 0,
        }
    }
}

impl SfmConfig {
    pub fn validate(&self) -> Result<(), SfmError> {
        if self.kappa == 0 {
            return Err(SfmError::InvalidConfig("kappa must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.nu) || !(0.0..=1.0).contains(&self.chi) {
            return Err(SfmError::InvalidConfig(
                "nu and chi must lie in [0, 1]".into(),
            ));
        }
        self.optimizer.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SfmError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("scene has no frames")]
    NoFrames,
    #[error("frame {0} has neither manifest intrinsics nor a pointmap")]
    MissingIntrinsics(u32),
    #[error("calibration of frame {frame} failed: {source}")]
    Calibration { frame: u32, source: InitError },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SfmResult {
    /// Every frame; unregistered ones keep their initial state.
    pub states: BTreeMap<u32, FrameState>,
    pub registered: BTreeSet<u32>,
    pub registration: RegistrationReport,
    pub edge_count: usize,
    pub dropped_edges: Vec<(u32, u32)>,
    pub coarse: Option<StageReport>,
    pub fine: Option<StageReport>,
    /// Non-fatal stage errors, in order.
    pub issues: Vec<String>,
    pub cancelled: bool,
}

impl SfmResult {
    pub fn unregistered(&self) -> Vec<u32> {
        self.states
            .keys()
            .filter(|id| !self.registered.contains(id))
            .copied()
            .collect()
    }

    /// Final linear-residual histogram of the last stage that ran.
    pub fn histogram(&self) -> Option<&ResidualHistogram> {
        [&self.fine, &self.coarse]
            .into_iter()
            .flatten()
            .find_map(|r| r.histogram.as_ref())
    }

    pub fn registered_states(&self) -> BTreeMap<u32, FrameState> {
        self.states
            .iter()
            .filter(|(id, _)| self.registered.contains(id))
            .map(|(&id, s)| (id, *s))
            .collect()
    }

    pub fn to_document(
        &self,
        seed: u64,
        config: serde_json::Value,
    ) -> Result<ResultDocument, GeometryError> {
        let frames = self
            .states
            .values()
            .map(|s| FrameRecord::from_state(s, self.registered.contains(&s.frame_id)))
            .collect::<Result<_, _>>()?;
        let mut notes = self.issues.clone();
        if self.cancelled {
            notes.push("interrupted: partial result".into());
        }
        Ok(ResultDocument {
            frames,
            metadata: RunMetadata {
                seed,
                config,
                histogram: self.histogram().map(HistogramSummary::from),
                notes,
            },
        })
    }
}

/// Intrinsics from the manifest when given, otherwise calibrated from the
/// pointmap. With `shared`, every frame takes the median focal.
pub fn initial_intrinsics(
    scene: &SceneData,
    cfg: &SfmConfig,
) -> Result<BTreeMap<u32, CameraIntrinsics>, SfmError> {
    let mut out = BTreeMap::new();
    for f in &scene.frames {
        let k = match (&f.intrinsics, &f.pointmap) {
            (Some(e), _) => CameraIntrinsics::new(
                e.focal,
                nalgebra::Vector2::new(e.cx, e.cy),
                f.width,
                f.height,
            )?,
            (None, Some(pm)) => {
                let mut cal = cfg.init.calibration.clone();
                cal.seed = cal.seed.wrapping_add(cfg.seed ^ f.frame_id as u64);
                let focal =
                    calibrate_from_pointmap(pm, &cal).map_err(|source| SfmError::Calibration {
                        frame: f.frame_id,
                        source,
                    })?;
                CameraIntrinsics::centered(focal, f.width, f.height)?
            }
            (None, None) => return Err(SfmError::MissingIntrinsics(f.frame_id)),
        };
        out.insert(f.frame_id, k);
    }
    if scene.shared_intrinsics || cfg.shared_intrinsics {
        let focals: Vec<f64> = out.values().map(|k| k.focal).collect();
        if let Some(f) = shared_focal(&focals) {
            for k in out.values_mut() {
                k.focal = f;
            }
        }
    }
    Ok(out)
}

/// Runs the whole pipeline. Stage failures after registration are
/// collected in [`SfmResult::issues`] and the partial result is returned.
pub fn run_sfm(
    scene: &SceneData,
    cfg: &SfmConfig,
    hooks: &mut Hooks<'_>,
) -> Result<SfmResult, SfmError> {
    cfg.validate()?;
    if scene.frames.is_empty() {
        return Err(SfmError::NoFrames);
    }
    let intrinsics = initial_intrinsics(scene, cfg)?;
    let mut states: BTreeMap<u32, FrameState> = intrinsics
        .iter()
        .map(|(&id, k)| (id, FrameState::new(id, *k)))
        .collect();
    let pixels: BTreeMap<u32, usize> = intrinsics
        .iter()
        .map(|(&id, k)| (id, k.pixel_count()))
        .collect();
    let depths: HashMap<u32, &DepthMap> = scene
        .frames
        .iter()
        .map(|f| (f.frame_id, &f.depth))
        .collect();

    let mut graph = build_pose_graph(&scene.correspondences, &pixels, cfg.nu, cfg.chi);
    let data = sample_data_matrix(
        &graph,
        &scene.correspondences,
        &depths,
        cfg.kappa,
        cfg.chi,
        cfg.seed,
    );
    for &(i, j) in &data.dropped {
        graph.remove_edge(i, j);
    }
    let mut issues = Vec::new();
    if graph.edge_count() == 0 {
        issues.push("pose graph has no edges".to_string());
    }

    let tree = greedy_spanning_tree(&graph);
    let mut init = cfg.init.clone();
    init.chi = cfg.chi;
    init.two_view.seed = init.two_view.seed.wrapping_add(cfg.seed);
    let registration = register_spanning_tree(
        &tree,
        &graph,
        &scene.correspondences,
        &depths,
        &mut states,
        &init,
    );
    for f in &registration.failures {
        issues.push(format!("frame {}: {}", f.frame, f.error));
    }

    let mut working: BTreeMap<u32, FrameState> = states
        .iter()
        .filter(|(id, _)| registration.registered.contains(id))
        .map(|(&id, s)| (id, *s))
        .collect();
    let mut optimizer = cfg.optimizer.clone();
    optimizer.shared_focal |= scene.shared_intrinsics || cfg.shared_intrinsics;

    let mut result = SfmResult {
        states: BTreeMap::new(),
        registered: registration.registered.clone(),
        registration,
        edge_count: graph.edge_count(),
        dropped_edges: data.dropped.clone(),
        coarse: None,
        fine: None,
        issues,
        cancelled: false,
    };
    if working.len() > 1 {
        let stars = star_decomposition(&graph);
        match coarse_stage(&mut working, &data, &stars, &optimizer, hooks) {
            Ok(r) => {
                result.cancelled = r.cancelled;
                result.coarse = Some(r);
            }
            Err(e) => result.issues.push(format!("coarse stage: {e}")),
        }
        if !result.cancelled {
            match fine_stage(&mut working, &data, &optimizer, hooks) {
                Ok(r) => {
                    result.cancelled = r.cancelled;
                    result.fine = Some(r);
                }
                Err(e) => result.issues.push(format!("fine stage: {e}")),
            }
        }
    }
    states.extend(working);
    result.states = states;
    Ok(result)
}

/// Pose graph over the given frames, exposed for tooling.
pub fn scene_graph(scene: &SceneData, nu: f64, chi: f64) -> PoseGraph {
    let pixels: BTreeMap<u32, usize> = scene
        .frames
        .iter()
        .map(|f| (f.frame_id, f.width as usize * f.height as usize))
        .collect();
    build_pose_graph(&scene.correspondences, &pixels, nu, chi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{common_samples, rra_rta};
    use crate::synthetic::{generate, SyntheticConfig};

    fn quick(iters: usize) -> SfmConfig {
        SfmConfig {
            optimizer: OptimizerConfig {
                iterations_coarse: iters,
                iterations_fine: iters,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn small_scene(seed: u64) -> crate::synthetic::SyntheticScene {
        generate(&SyntheticConfig {
            frame_count: 5,
            corr_noise_px: 0.0,
            outlier_fraction: 0.0,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn empty_edge_set_registers_only_the_root() {
        let mut data = small_scene(1).to_scene_data();
        data.correspondences.clear();
        let r = run_sfm(&data, &quick(10), &mut Hooks::default()).unwrap();
        assert_eq!(r.registered.len(), 1);
        assert!(!r.issues.is_empty());
        assert_eq!(r.unregistered().len(), 4);
    }

    #[test]
    fn deterministic_under_fixed_seed() {
        let data = small_scene(2).to_scene_data();
        let a = run_sfm(&data, &quick(30), &mut Hooks::default()).unwrap();
        let b = run_sfm(&data, &quick(30), &mut Hooks::default()).unwrap();
        assert_eq!(a.states, b.states);
    }

    #[test]
    fn noiseless_small_scene_is_recovered() {
        let scene = small_scene(3);
        let r = run_sfm(&scene.to_scene_data(), &quick(300), &mut Hooks::default()).unwrap();
        assert_eq!(r.registered.len(), 5);
        let (est, gt) = common_samples(&r.registered_states(), &scene.ground_truth_map()).unwrap();
        let (rra, rta) = rra_rta(&est, &gt, 5.0).unwrap();
        assert_eq!((rra, rta), (100.0, 100.0));
    }

    #[test]
    fn missing_intrinsics_is_fatal() {
        let mut data = small_scene(4).to_scene_data();
        data.frames[0].intrinsics = None;
        data.frames[0].pointmap = None;
        assert_eq!(
            run_sfm(&data, &quick(1), &mut Hooks::default()).unwrap_err(),
            SfmError::MissingIntrinsics(0)
        );
    }
}
