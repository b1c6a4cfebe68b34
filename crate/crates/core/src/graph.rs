//! Co-visibility pose graph, data-matrix subsampling, star decomposition
//! and the greedy registration tree.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::io::{CorrespondenceSet, DepthMap};

pub const DEFAULT_KAPPA: usize = 200;
pub const DEFAULT_NU: f64 = 0.15;
pub const DEFAULT_CHI: f64 = 0.2;

/// One sampled measurement for a directed frame pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataRecord {
    pub src_pixel: Vector2<f64>,
    pub dst_pixel: Vector2<f64>,
    /// Raw (uncorrected) source depth.
    pub src_depth: f64,
}

fn key(i: u32, j: u32) -> (u32, u32) {
    if i < j {
        (i, j)
    } else {
        (j, i)
    }
}

/// Undirected graph over frame ids, weighted by co-visibility.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PoseGraph {
    nodes: BTreeSet<u32>,
    edges: BTreeMap<(u32, u32), f64>,
}

impl PoseGraph {
    pub fn new(nodes: impl IntoIterator<Item = u32>) -> Self {
        Self {
            nodes: nodes.into_iter().collect(),
            edges: BTreeMap::new(),
        }
    }

    /// Adds or replaces an undirected edge. Self loops are ignored.
    pub fn add_edge(&mut self, i: u32, j: u32, covisibility: f64) {
        if i == j {
            return;
        }
        self.nodes.insert(i);
        self.nodes.insert(j);
        self.edges.insert(key(i, j), covisibility);
    }

    pub fn remove_edge(&mut self, i: u32, j: u32) {
        self.edges.remove(&key(i, j));
    }

    pub fn frame_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> impl Iterator<Item = u32> + '_ {
        self.nodes.iter().copied()
    }

    /// Edges as `(i, j, covisibility)` with `i < j`, sorted.
    pub fn edges(&self) -> impl Iterator<Item = (u32, u32, f64)> + '_ {
        self.edges.iter().map(|(&(i, j), &c)| (i, j, c))
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn covisibility(&self, i: u32, j: u32) -> Option<f64> {
        self.edges.get(&key(i, j)).copied()
    }

    pub fn neighbors(&self, i: u32) -> Vec<u32> {
        self.edges
            .keys()
            .filter_map(|&(a, b)| {
                if a == i {
                    Some(b)
                } else if b == i {
                    Some(a)
                } else {
                    None
                }
            })
            .collect()
    }

    pub fn degree(&self, i: u32) -> usize {
        self.edges
            .keys()
            .filter(|&&(a, b)| a == i || b == i)
            .count()
    }

    fn adjacency(&self) -> HashMap<u32, Vec<u32>> {
        let mut adj: HashMap<u32, Vec<u32>> = self.nodes.iter().map(|&n| (n, Vec::new())).collect();
        for &(a, b) in self.edges.keys() {
            adj.get_mut(&a).unwrap().push(b);
            adj.get_mut(&b).unwrap().push(a);
        }
        for v in adj.values_mut() {
            v.sort_unstable();
        }
        adj
    }

    /// Connected components, each sorted, ordered by their smallest id.
    pub fn components(&self) -> Vec<Vec<u32>> {
        let adj = self.adjacency();
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for &start in &self.nodes {
            if !seen.insert(start) {
                continue;
            }
            let mut comp = vec![start];
            let mut queue = VecDeque::from([start]);
            while let Some(n) = queue.pop_front() {
                for &m in &adj[&n] {
                    if seen.insert(m) {
                        comp.push(m);
                        queue.push_back(m);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }
}

/// Looks up the matches for the ordered pair `a -> b`, reversing a stored
/// `b -> a` set when needed.
pub struct CorrespondenceIndex<'a> {
    by_pair: HashMap<(u32, u32), &'a CorrespondenceSet>,
}

impl<'a> CorrespondenceIndex<'a> {
    pub fn new(sets: &'a [CorrespondenceSet]) -> Self {
        let mut by_pair = HashMap::new();
        for s in sets {
            if s.frame_i != s.frame_j {
                by_pair.entry((s.frame_i, s.frame_j)).or_insert(s);
            }
        }
        Self { by_pair }
    }

    /// Matches oriented `a -> b`; `None` when neither direction is stored.
    pub fn directed(&self, a: u32, b: u32) -> Option<CorrespondenceSet> {
        if let Some(s) = self.by_pair.get(&(a, b)) {
            return Some((*s).clone());
        }
        self.by_pair.get(&(b, a)).map(|s| s.reversed())
    }

    fn count_confident(&self, a: u32, b: u32, chi: f64) -> Option<usize> {
        let count = |s: &CorrespondenceSet| {
            s.matches
                .iter()
                .filter(|m| m.confidence > chi as f32)
                .count()
        };
        self.by_pair
            .get(&(a, b))
            .or_else(|| self.by_pair.get(&(b, a)))
            .map(|s| count(s))
    }

    pub fn unordered_pairs(&self) -> BTreeSet<(u32, u32)> {
        self.by_pair.keys().map(|&(a, b)| key(a, b)).collect()
    }
}

/// Co-visibility of `{i, j}`: over both directions, the larger share of the
/// source frame's pixels matched with confidence above `chi`.
pub fn build_pose_graph(
    correspondences: &[CorrespondenceSet],
    frame_pixels: &BTreeMap<u32, usize>,
    nu: f64,
    chi: f64,
) -> PoseGraph {
    let index = CorrespondenceIndex::new(correspondences);
    let mut graph = PoseGraph::new(frame_pixels.keys().copied());
    for (i, j) in index.unordered_pairs() {
        let (Some(&pi), Some(&pj)) = (frame_pixels.get(&i), frame_pixels.get(&j)) else {
            continue;
        };
        let ratio = |a: u32, b: u32, pixels: usize| {
            index.count_confident(a, b, chi).unwrap_or(0) as f64 / pixels.max(1) as f64
        };
        let covis = ratio(i, j, pi).max(ratio(j, i, pj));
        if covis >= nu {
            graph.add_edge(i, j, covis);
        }
    }
    graph
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectedBlock {
    pub src: u32,
    pub dst: u32,
    pub records: Vec<DataRecord>,
}

/// The fixed optimization working set: `kappa` records per directed edge.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    pub kappa: usize,
    pub seed: u64,
    pub blocks: Vec<DirectedBlock>,
    /// Undirected edges without eligible samples in some direction.
    pub dropped: Vec<(u32, u32)>,
}

impl DataMatrix {
    pub fn record_count(&self) -> usize {
        self.blocks.iter().map(|b| b.records.len()).sum()
    }

    /// Little-endian dump, for reproducibility checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend_from_slice(&b.src.to_le_bytes());
            out.extend_from_slice(&b.dst.to_le_bytes());
            for r in &b.records {
                for v in [
                    r.src_pixel.x,
                    r.src_pixel.y,
                    r.dst_pixel.x,
                    r.dst_pixel.y,
                    r.src_depth,
                ] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("no valid samples for edge ({0}, {1})")]
    NoValidSamples(u32, u32),
}

fn eligible_records(set: &CorrespondenceSet, depth: &DepthMap, chi: f64) -> Vec<DataRecord> {
    set.matches
        .iter()
        .filter(|m| m.confidence >= chi as f32)
        .filter_map(|m| {
            let src = m.src_pixel();
            depth.sample_nearest(&src).map(|d| DataRecord {
                src_pixel: src,
                dst_pixel: m.dst_pixel(),
                src_depth: d,
            })
        })
        .collect()
}

/// Uniform sampling with replacement of `kappa` records per direction of
/// every edge. Edges with no eligible match in either direction are
/// dropped and reported in [`DataMatrix::dropped`].
pub fn sample_data_matrix(
    graph: &PoseGraph,
    correspondences: &[CorrespondenceSet],
    depths: &HashMap<u32, &DepthMap>,
    kappa: usize,
    chi: f64,
    seed: u64,
) -> DataMatrix {
    let index = CorrespondenceIndex::new(correspondences);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks = Vec::with_capacity(2 * graph.edge_count());
    let mut dropped = Vec::new();
    for (i, j, _) in graph.edges() {
        let mut pair = Vec::with_capacity(2);
        for (a, b) in [(i, j), (j, i)] {
            let eligible = match (index.directed(a, b), depths.get(&a)) {
                (Some(set), Some(depth)) => eligible_records(&set, depth, chi),
                _ => Vec::new(),
            };
            pair.push((a, b, eligible));
        }
        if pair.iter().any(|(_, _, e)| e.is_empty()) {
            log::warn!("{}", GraphError::NoValidSamples(i, j));
            dropped.push((i, j));
            continue;
        }
        for (a, b, eligible) in pair {
            let records = (0..kappa)
                .map(|_| eligible[rng.random_range(0..eligible.len())])
                .collect();
            blocks.push(DirectedBlock {
                src: a,
                dst: b,
                records,
            });
        }
    }
    DataMatrix {
        kappa,
        seed,
        blocks,
        dropped,
    }
}

/// Frame `center`, its neighbors, and the edges incident to it.
#[derive(Debug, Clone, PartialEq)]
pub struct StarSubgraph {
    pub center: u32,
    pub vertices: Vec<u32>,
    /// `(i, j)` with `i < j`.
    pub edges: Vec<(u32, u32)>,
}

pub fn star_decomposition(graph: &PoseGraph) -> Vec<StarSubgraph> {
    graph
        .nodes()
        .map(|c| {
            let nb = graph.neighbors(c);
            let mut vertices = vec![c];
            vertices.extend(&nb);
            vertices.sort_unstable();
            StarSubgraph {
                center: c,
                vertices,
                edges: nb.iter().map(|&n| key(c, n)).collect(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpanningTree {
    /// Registration order; the root has no parent.
    pub order: Vec<(u32, Option<u32>)>,
    pub unregistered: Vec<u32>,
}

impl SpanningTree {
    pub fn root(&self) -> Option<u32> {
        self.order.first().map(|&(n, _)| n)
    }
}

/// Greedy registration order over the largest connected component.
///
/// The root is the highest-degree frame; each step adds the frontier frame
/// of highest degree, parented to its registered neighbor of highest
/// co-visibility. Ties go to the lowest frame id.
pub fn greedy_spanning_tree(graph: &PoseGraph) -> SpanningTree {
    let components = graph.components();
    let Some(largest) = components
        .iter()
        .max_by(|a, b| a.len().cmp(&b.len()).then(b[0].cmp(&a[0])))
    else {
        return SpanningTree {
            order: vec![],
            unregistered: vec![],
        };
    };
    let adj = graph.adjacency();
    let degree = |n: u32| adj[&n].len();
    let best = |cands: &mut dyn Iterator<Item = u32>| {
        cands.max_by(|&a, &b| degree(a).cmp(&degree(b)).then(b.cmp(&a)))
    };
    let root = best(&mut largest.iter().copied()).unwrap();
    let mut registered = BTreeSet::from([root]);
    let mut order = vec![(root, None)];
    while registered.len() < largest.len() {
        let frontier: BTreeSet<u32> = registered
            .iter()
            .flat_map(|n| adj[n].iter().copied())
            .filter(|m| !registered.contains(m))
            .collect();
        let next = best(&mut frontier.into_iter()).unwrap();
        let parent = adj[&next]
            .iter()
            .copied()
            .filter(|m| registered.contains(m))
            .max_by(|&a, &b| {
                let (ca, cb) = (
                    graph.covisibility(next, a).unwrap(),
                    graph.covisibility(next, b).unwrap(),
                );
                ca.total_cmp(&cb).then(b.cmp(&a))
            })
            .unwrap();
        registered.insert(next);
        order.push((next, Some(parent)));
    }
    let unregistered = graph.nodes().filter(|n| !registered.contains(n)).collect();
    SpanningTree {
        order,
        unregistered,
    }
}
