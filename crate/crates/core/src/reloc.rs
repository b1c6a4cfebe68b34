//! Registration of query frames against a frozen, already-registered map.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::geometry::{FrameState, GeometryError, Trainable};
use crate::graph::{
    build_pose_graph, sample_data_matrix, star_decomposition, CorrespondenceIndex, PoseGraph,
    DEFAULT_CHI, DEFAULT_KAPPA, DEFAULT_NU,
};
use crate::init::{register_frame, InitConfig};
use crate::io::{CorrespondenceSet, DepthMap, SceneData};
use crate::sfm::{initial_intrinsics, SfmConfig, SfmError};
use crate::solver::{coarse_stage, fine_stage, Hooks, OptimizerConfig, SolverError, StageReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RelocConfig {
    pub kappa: usize,
    pub nu: f64,
    pub chi: f64,
    /// Use query-to-query edges. When off, every query is solved on its own
    /// and the result for one query never depends on the others.
    pub query_query: bool,
    pub init: InitConfig,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for RelocConfig {
    fn default() -> Self {
        Self {
            kappa: DEFAULT_KAPPA,
            nu: DEFAULT_NU,
            chi: DEFAULT_CHI,
            query_query: true,
            init: InitConfig::default(),
            optimizer: OptimizerConfig {
                iterations_coarse: 5_000,
                iterations_fine: 5_000,
                ..Default::default()
            },
            seed: 0,
        }
    }
}

impl RelocConfig {
    pub fn validate(&self) -> Result<(), RelocError> {
        if self.kappa == 0 {
            return Err(RelocError::InvalidConfig("kappa must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.nu) || !(0.0..=1.0).contains(&self.chi) {
            return Err(RelocError::InvalidConfig(
                "nu and chi must lie in [0, 1]".into(),
            ));
        }
        self.optimizer.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RelocError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("map is empty")]
    EmptyMap,
    #[error("map frame {0} is missing from the scene")]
    MapFrameMissing(u32),
    #[error("scene has no query frames")]
    NoQueries,
    #[error(transparent)]
    Intrinsics(#[from] SfmError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QueryOutcome {
    Registered,
    /// No edge to any map frame above the co-visibility threshold.
    Unreachable,
    InitializationFailed(String),
}

impl QueryOutcome {
    pub fn success(&self) -> bool {
        matches!(self, QueryOutcome::Registered)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelocResult {
    /// Every query frame; failed ones keep their initial state.
    pub queries: BTreeMap<u32, FrameState>,
    pub outcomes: BTreeMap<u32, QueryOutcome>,
    /// Map parent used to initialize each registered query.
    pub parents: BTreeMap<u32, u32>,
    pub coarse: Vec<StageReport>,
    pub fine: Vec<StageReport>,
    pub issues: Vec<String>,
    pub cancelled: bool,
}

impl RelocResult {
    pub fn registered(&self) -> BTreeSet<u32> {
        self.outcomes
            .iter()
            .filter(|(_, o)| o.success())
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn unreachable(&self) -> Vec<u32> {
        self.outcomes
            .iter()
            .filter(|(_, o)| **o == QueryOutcome::Unreachable)
            .map(|(&id, _)| id)
            .collect()
    }
}

/// Keeps the pairs that touch at least one query, and query pairs only when
/// `query_query` is set. Map-to-map residuals carry no gradient.
fn relevant_pairs(
    correspondences: &[CorrespondenceSet],
    map: &BTreeMap<u32, FrameState>,
    queries: &BTreeSet<u32>,
    query_query: bool,
) -> Vec<CorrespondenceSet> {
    correspondences
        .iter()
        .filter(|c| {
            let (qi, qj) = (queries.contains(&c.frame_i), queries.contains(&c.frame_j));
            let (mi, mj) = (map.contains_key(&c.frame_i), map.contains_key(&c.frame_j));
            (qi && mj) || (mi && qj) || (query_query && qi && qj)
        })
        .cloned()
        .collect()
}

/// Relocalizes every scene frame that is not in `map`. Map frames are
/// frozen and come back bit-identical; they are not part of the result.
pub fn relocalize(
    map: &BTreeMap<u32, FrameState>,
    scene: &SceneData,
    cfg: &RelocConfig,
    hooks: &mut Hooks<'_>,
) -> Result<RelocResult, RelocError> {
    cfg.validate()?;
    if map.is_empty() {
        return Err(RelocError::EmptyMap);
    }
    let scene_ids: BTreeSet<u32> = scene.frames.iter().map(|f| f.frame_id).collect();
    if let Some(&id) = map.keys().find(|id| !scene_ids.contains(id)) {
        return Err(RelocError::MapFrameMissing(id));
    }
    let query_ids: BTreeSet<u32> = scene_ids
        .iter()
        .filter(|id| !map.contains_key(id))
        .copied()
        .collect();
    if query_ids.is_empty() {
        return Err(RelocError::NoQueries);
    }

    let query_scene = SceneData {
        frames: scene
            .frames
            .iter()
            .filter(|f| query_ids.contains(&f.frame_id))
            .cloned()
            .collect(),
        correspondences: Vec::new(),
        shared_intrinsics: false,
    };
    let sfm_cfg = SfmConfig {
        init: cfg.init.clone(),
        seed: cfg.seed,
        ..Default::default()
    };
    let intrinsics = initial_intrinsics(&query_scene, &sfm_cfg)?;

    let mut frozen = map.clone();
    for s in frozen.values_mut() {
        s.trainable = Trainable::NONE;
    }
    // Query intrinsics are given, so only pose and depth correction move.
    let query_trainable = Trainable {
        pose: true,
        focal: false,
        correction: true,
    };
    let mut queries: BTreeMap<u32, FrameState> = intrinsics
        .iter()
        .map(|(&id, k)| {
            let mut s = FrameState::new(id, *k);
            s.trainable = query_trainable;
            (id, s)
        })
        .collect();

    let pairs = relevant_pairs(&scene.correspondences, map, &query_ids, cfg.query_query);
    let pixels: BTreeMap<u32, usize> = scene
        .frames
        .iter()
        .map(|f| (f.frame_id, f.width as usize * f.height as usize))
        .collect();
    let depths: HashMap<u32, &DepthMap> = scene
        .frames
        .iter()
        .map(|f| (f.frame_id, &f.depth))
        .collect();
    let graph = build_pose_graph(&pairs, &pixels, cfg.nu, cfg.chi);

    let mut result = RelocResult {
        queries: BTreeMap::new(),
        outcomes: BTreeMap::new(),
        parents: BTreeMap::new(),
        coarse: Vec::new(),
        fine: Vec::new(),
        issues: Vec::new(),
        cancelled: false,
    };

    let index = CorrespondenceIndex::new(&pairs);
    let mut init = cfg.init.clone();
    init.chi = cfg.chi;
    init.two_view.seed = init.two_view.seed.wrapping_add(cfg.seed);
    for (&q, state) in queries.iter_mut() {
        let mut parents: Vec<(u32, f64)> = graph
            .neighbors(q)
            .into_iter()
            .filter(|n| map.contains_key(n))
            .map(|n| (n, graph.covisibility(q, n).unwrap_or(0.0)))
            .collect();
        if parents.is_empty() {
            result.outcomes.insert(q, QueryOutcome::Unreachable);
            continue;
        }
        parents.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut last_error = String::new();
        for &(p, _) in &parents {
            match register_frame(state, &frozen[&p], &index, &depths, &init) {
                Ok((pose, correction)) => {
                    state.pose = pose;
                    state.correction = correction;
                    result.parents.insert(q, p);
                    break;
                }
                Err(e) => last_error = e.to_string(),
            }
        }
        let outcome = if result.parents.contains_key(&q) {
            QueryOutcome::Registered
        } else {
            QueryOutcome::InitializationFailed(last_error)
        };
        result.outcomes.insert(q, outcome);
    }

    let registered = result.registered();
    let groups: Vec<BTreeSet<u32>> = if cfg.query_query {
        vec![registered.clone()]
    } else {
        registered.iter().map(|&q| BTreeSet::from([q])).collect()
    };
    for group in groups.into_iter().filter(|g| !g.is_empty()) {
        if result.cancelled {
            break;
        }
        let sub = restrict(&graph, &group, map);
        // Seeded by the group's first query so a query solved alone does not
        // depend on which other queries exist.
        let seed = cfg.seed ^ (*group.first().unwrap() as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let data = sample_data_matrix(&sub, &pairs, &depths, cfg.kappa, cfg.chi, seed);
        let mut sub = sub;
        for &(i, j) in &data.dropped {
            sub.remove_edge(i, j);
        }
        let mut working: BTreeMap<u32, FrameState> = sub
            .nodes()
            .map(|id| (id, queries.get(&id).copied().unwrap_or_else(|| frozen[&id])))
            .collect();
        let stars = star_decomposition(&sub);
        match coarse_stage(&mut working, &data, &stars, &cfg.optimizer, hooks) {
            Ok(r) => {
                result.cancelled |= r.cancelled;
                result.coarse.push(r);
            }
            Err(e) => result.issues.push(format!("coarse stage: {e}")),
        }
        if !result.cancelled {
            match fine_stage(&mut working, &data, &cfg.optimizer, hooks) {
                Ok(r) => {
                    result.cancelled |= r.cancelled;
                    result.fine.push(r);
                }
                Err(e) => result.issues.push(format!("fine stage: {e}")),
            }
        }
        for q in &group {
            if let Some(s) = working.get(q) {
                queries.insert(*q, *s);
            }
        }
    }
    for (id, o) in &result.outcomes {
        match o {
            QueryOutcome::Unreachable => result
                .issues
                .push(format!("query {id}: unreachable from the map")),
            QueryOutcome::InitializationFailed(e) => result.issues.push(format!("query {id}: {e}")),
            QueryOutcome::Registered => {}
        }
    }
    result.queries = queries;
    Ok(result)
}

/// The group's queries, their map neighbors, and the edges among them.
fn restrict(
    graph: &PoseGraph,
    group: &BTreeSet<u32>,
    map: &BTreeMap<u32, FrameState>,
) -> PoseGraph {
    let mut nodes: BTreeSet<u32> = group.clone();
    for &q in group {
        nodes.extend(
            graph
                .neighbors(q)
                .into_iter()
                .filter(|n| map.contains_key(n)),
        );
    }
    let mut sub = PoseGraph::new(nodes.iter().copied());
    for (i, j, c) in graph.edges() {
        if (group.contains(&i) || group.contains(&j)) && nodes.contains(&i) && nodes.contains(&j) {
            sub.add_edge(i, j, c);
        }
    }
    sub
}
