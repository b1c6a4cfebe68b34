//! Coarse (log-residual, per star) and fine (global) marginalized bundle
//! adjustment, optimized with Adam over a flat parameter vector.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distribution::{
    robust_loss_baseline, DescentTable, DistributionError, HistogramAccumulator, LossKind,
    Normalization, ResidualHistogram,
};
use crate::geometry::{
    residual_view, residual_with_jacobian, rotation_6d_backward, FrameState, FrameView,
    GeometryError, ProjectionFloors, ResidualJacobian,
};
use crate::graph::{DataMatrix, DataRecord, StarSubgraph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub iterations_coarse: usize,
    pub iterations_fine: usize,
    pub lr: f64,
    pub intrinsics_lr_multiplier: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Fine-stage histogram range, pixels.
    pub tau_max_fine: f64,
    /// Coarse-stage histogram range, in `ln(1 + r)` units.
    pub tau_bar_max_coarse: f64,
    pub bin_count: usize,
    pub loss_kind: LossKind,
    /// Scale of the robust baselines, pixels. Unused by `mba` and `l2`.
    pub robust_scale: f64,
    pub histogram_rebuild_interval: usize,
    /// One focal length shared by every trainable frame.
    pub shared_focal: bool,
    pub floors: ProjectionFloors,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            iterations_coarse: 25_000,
            iterations_fine: 25_000,
            lr: 1e-3,
            intrinsics_lr_multiplier: 50.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            tau_max_fine: 20.0,
            tau_bar_max_coarse: 10.0,
            bin_count: crate::distribution::DEFAULT_BIN_COUNT,
            loss_kind: LossKind::Mba,
            robust_scale: 5.0,
            histogram_rebuild_interval: 1,
            shared_focal: false,
            floors: ProjectionFloors::default(),
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        let positive = [
            ("lr", self.lr),
            ("intrinsics_lr_multiplier", self.intrinsics_lr_multiplier),
            ("adam_eps", self.adam_eps),
            ("tau_max_fine", self.tau_max_fine),
            ("tau_bar_max_coarse", self.tau_bar_max_coarse),
            ("robust_scale", self.robust_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(SolverError::InvalidConfig(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        for (name, v) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(SolverError::InvalidConfig(format!(
                    "{name} must lie in [0, 1), got {v}"
                )));
            }
        }
        if self.bin_count < 2 {
            return Err(SolverError::InvalidConfig(
                "bin_count must be at least 2".into(),
            ));
        }
        if self.histogram_rebuild_interval == 0 {
            return Err(SolverError::InvalidConfig(
                "histogram_rebuild_interval must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SolverError {
    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),
    #[error("no subgraph has a finite log-residual below the coarse threshold")]
    AllSubgraphsEmpty,
    #[error(transparent)]
    Distribution(#[from] DistributionError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Coarse,
    Fine,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Coarse => "coarse",
            Stage::Fine => "fine",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Progress {
    pub stage: Stage,
    pub iteration: usize,
    pub iterations: usize,
    pub loss: f64,
    /// Finite residuals below the fine threshold, as a fraction.
    pub inlier_fraction: f64,
}

/// Caller-side observation and interruption of a running stage.
#[derive(Default)]
pub struct Hooks<'a> {
    pub progress: Option<Box<dyn FnMut(&Progress) + 'a>>,
    /// Report every this many iterations; 0 means never.
    pub report_every: usize,
    pub cancel: Option<&'a AtomicBool>,
}

impl Hooks<'_> {
    fn cancelled(&self) -> bool {
        self.cancel.is_some_and(|c| c.load(Ordering::Relaxed))
    }

    fn report(&mut self, p: Progress) {
        let last = p.iteration + 1 == p.iterations;
        if let Some(cb) = self.progress.as_mut() {
            if self.report_every > 0 && (p.iteration.is_multiple_of(self.report_every) || last) {
                cb(&p);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: Stage,
    pub iterations_run: usize,
    /// Loss before each step.
    pub loss_history: Vec<f64>,
    /// Histogram of linear residuals at the final parameters.
    pub histogram: Option<ResidualHistogram>,
    pub cancelled: bool,
}

impl StageReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.loss_history.last().copied()
    }
}

/// Adam moments for every parameter slot.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// One update. Slots with a zero learning rate are left untouched.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: &[f64], cfg: &OptimizerConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for k in 0..params.len() {
            if lr[k] == 0.0 {
                continue;
            }
            let g = grad[k];
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g;
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g;
            let m_hat = self.m[k] / c1;
            let v_hat = self.v[k] / c2;
            params[k] -= lr[k] * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
}

const SLOTS_PER_FRAME: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq)]
struct FrameSlots {
    /// Six rotation seeds then three translation entries.
    pose: usize,
    focal: usize,
    /// `ln(alpha)` then `beta`.
    correction: usize,
}

/// Maps frames to slots of a flat parameter vector, with per-slot learning
/// rates (zero for frozen slots).
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterLayout {
    base: Vec<FrameState>,
    index: HashMap<u32, usize>,
    slots: Vec<FrameSlots>,
    lr: Vec<f64>,
}

impl ParameterLayout {
    pub fn new(states: &BTreeMap<u32, FrameState>, cfg: &OptimizerConfig) -> Self {
        let base: Vec<FrameState> = states.values().copied().collect();
        let index = base
            .iter()
            .enumerate()
            .map(|(k, s)| (s.frame_id, k))
            .collect();
        let mut slots = Vec::with_capacity(base.len());
        let mut lr = Vec::with_capacity(base.len() * SLOTS_PER_FRAME);
        let mut shared = None;
        let focal_lr = cfg.lr * cfg.intrinsics_lr_multiplier;
        for s in &base {
            let t = s.trainable;
            let pose = lr.len();
            lr.extend([if t.pose { cfg.lr } else { 0.0 }; 9]);
            let focal = match (cfg.shared_focal && t.focal, shared) {
                (true, Some(k)) => k,
                (share, _) => {
                    let k = lr.len();
                    lr.push(if t.focal { focal_lr } else { 0.0 });
                    if share {
                        shared = Some(k);
                    }
                    k
                }
            };
            let correction = lr.len();
            lr.extend([if t.correction { cfg.lr } else { 0.0 }; 2]);
            slots.push(FrameSlots {
                pose,
                focal,
                correction,
            });
        }
        Self {
            base,
            index,
            slots,
            lr,
        }
    }

    pub fn len(&self) -> usize {
        self.lr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lr.is_empty()
    }

    pub fn learning_rates(&self) -> &[f64] {
        &self.lr
    }

    pub fn frame_index(&self, frame_id: u32) -> Option<usize> {
        self.index.get(&frame_id).copied()
    }

    pub fn frame_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.base.iter().map(|s| s.frame_id)
    }

    /// Current values of every slot. A shared focal starts at the mean.
    pub fn pack(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.len()];
        let mut focal_sum: HashMap<usize, (f64, usize)> = HashMap::new();
        for (s, slot) in self.base.iter().zip(&self.slots) {
            p[slot.pose..slot.pose + 6].copy_from_slice(&s.pose.rotation_6d);
            p[slot.pose + 6..slot.pose + 9].copy_from_slice(s.pose.translation.as_slice());
            let e = focal_sum.entry(slot.focal).or_insert((0.0, 0));
            e.0 += s.intrinsics.focal;
            e.1 += 1;
            p[slot.correction] = s.correction.log_alpha;
            p[slot.correction + 1] = s.correction.beta;
        }
        for (k, (sum, n)) in focal_sum {
            p[k] = if n == 1 { sum } else { sum / n as f64 };
        }
        p
    }

    /// Frame states for `params`. Frozen groups keep their stored values
    /// bit for bit.
    pub fn states(&self, params: &[f64]) -> Vec<FrameState> {
        self.base
            .iter()
            .zip(&self.slots)
            .map(|(s, slot)| {
                let mut s = *s;
                if self.lr[slot.pose] != 0.0 {
                    s.pose
                        .rotation_6d
                        .copy_from_slice(&params[slot.pose..slot.pose + 6]);
                    s.pose.translation =
                        Vector3::from_column_slice(&params[slot.pose + 6..slot.pose + 9]);
                }
                if self.lr[slot.focal] != 0.0 {
                    s.intrinsics.focal = params[slot.focal];
                }
                if self.lr[slot.correction] != 0.0 {
                    s.correction.log_alpha = params[slot.correction];
                    s.correction.beta = params[slot.correction + 1];
                }
                s
            })
            .collect()
    }

    /// Writes trainable groups back into `states`.
    pub fn write_back(&self, params: &[f64], states: &mut BTreeMap<u32, FrameState>) {
        for s in self.states(params) {
            if let Some(dst) = states.get_mut(&s.frame_id) {
                *dst = s;
            }
        }
    }

    fn views(&self, params: &[f64]) -> Result<Vec<FrameView>, GeometryError> {
        self.states(params).iter().map(FrameView::new).collect()
    }

    /// Chains per-frame accumulated derivatives into slot gradients.
    fn scatter(&self, params: &[f64], frames: &[FrameGrad]) -> Vec<f64> {
        let mut g = vec![0.0; self.len()];
        for (slot, fg) in self.slots.iter().zip(frames) {
            let mut seed = [0.0; 6];
            seed.copy_from_slice(&params[slot.pose..slot.pose + 6]);
            let rot = rotation_6d_backward(&seed, &fg.rotation);
            for k in 0..6 {
                g[slot.pose + k] += rot[k];
            }
            for k in 0..3 {
                g[slot.pose + 6 + k] += fg.translation[k];
            }
            g[slot.focal] += fg.focal;
            // d/d ln(alpha) and d/d beta
            g[slot.correction] += fg.log_alpha;
            g[slot.correction + 1] += fg.beta;
        }
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct FrameGrad {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    focal: f64,
    log_alpha: f64,
    beta: f64,
}

impl FrameGrad {
    fn zero() -> Self {
        Self {
            rotation: Matrix3::zeros(),
            translation: Vector3::zeros(),
            focal: 0.0,
            log_alpha: 0.0,
            beta: 0.0,
        }
    }

    fn add(&mut self, o: &FrameGrad) {
        self.rotation += o.rotation;
        self.translation += o.translation;
        self.focal += o.focal;
        self.log_alpha += o.log_alpha;
        self.beta += o.beta;
    }
}

/// Records per reduction chunk. Fixed so that sums do not depend on the
/// number of workers.
const CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy)]
struct IndexedRecord {
    src: usize,
    dst: usize,
    record: DataRecord,
}

/// Frozen per-step histograms.
#[derive(Debug, Clone, PartialEq)]
pub enum Histograms {
    /// One histogram over linear residuals; `None` for robust baselines.
    Fine(Option<ResidualHistogram>),
    /// One per star over `ln(1 + r)`; `None` for stars with no residual
    /// below the threshold.
    Coarse(Vec<Option<ResidualHistogram>>),
}

/// The data term over a fixed data matrix.
#[derive(Debug, Clone)]
pub struct Objective {
    layout: ParameterLayout,
    records: Vec<IndexedRecord>,
    /// Record indices of each star, for the coarse stage.
    stars: Option<Vec<Vec<usize>>>,
    cfg: OptimizerConfig,
}

impl Objective {
    /// Global objective over linear residuals.
    pub fn fine(
        states: &BTreeMap<u32, FrameState>,
        data: &DataMatrix,
        cfg: &OptimizerConfig,
    ) -> Result<Self, SolverError> {
        cfg.validate()?;
        let layout = ParameterLayout::new(states, cfg);
        let (records, _) = index_records(&layout, data);
        Ok(Self {
            layout,
            records,
            stars: None,
            cfg: cfg.clone(),
        })
    }

    /// Per-star objective over log residuals.
    pub fn coarse(
        states: &BTreeMap<u32, FrameState>,
        data: &DataMatrix,
        stars: &[StarSubgraph],
        cfg: &OptimizerConfig,
    ) -> Result<Self, SolverError> {
        cfg.validate()?;
        let layout = ParameterLayout::new(states, cfg);
        let (records, by_edge) = index_records(&layout, data);
        let members = stars
            .iter()
            .map(|s| {
                s.edges
                    .iter()
                    .flat_map(|e| by_edge.get(e).into_iter().flatten().copied())
                    .collect::<Vec<usize>>()
            })
            .filter(|m| !m.is_empty())
            .collect();
        Ok(Self {
            layout,
            records,
            stars: Some(members),
            cfg: cfg.clone(),
        })
    }

    pub fn layout(&self) -> &ParameterLayout {
        &self.layout
    }

    pub fn record_count(&self) -> usize {
        self.records.len()
    }

    /// Linear projective residuals, `+inf` where projection fails.
    pub fn residuals(&self, params: &[f64]) -> Result<Vec<f64>, SolverError> {
        let views = self.layout.views(params)?;
        let floors = self.cfg.floors;
        Ok(self
            .records
            .par_iter()
            .with_min_len(CHUNK)
            .map(|r| residual_view(&r.record, &views[r.src], &views[r.dst], &floors))
            .collect())
    }

    pub fn histograms(&self, residuals: &[f64]) -> Result<Histograms, SolverError> {
        let cfg = &self.cfg;
        match &self.stars {
            None => match cfg.loss_kind {
                LossKind::Mba => Ok(Histograms::Fine(Some(histogram_of(
                    residuals.iter().copied(),
                    cfg.tau_max_fine,
                    cfg.bin_count,
                    Normalization::AllFinite,
                )?))),
                _ => {
                    if !residuals.iter().any(|r| r.is_finite()) {
                        return Err(DistributionError::EmptyResidualSet.into());
                    }
                    Ok(Histograms::Fine(None))
                }
            },
            Some(stars) => {
                let logs = log_residuals(residuals);
                let hists: Vec<Option<ResidualHistogram>> = stars
                    .par_iter()
                    .map(|members| {
                        histogram_of(
                            members.iter().map(|&k| logs[k]),
                            cfg.tau_bar_max_coarse,
                            cfg.bin_count,
                            Normalization::BelowTauMax,
                        )
                        .ok()
                    })
                    .collect();
                if hists.iter().all(Option::is_none) {
                    return Err(SolverError::AllSubgraphsEmpty);
                }
                Ok(Histograms::Coarse(hists))
            }
        }
    }

    /// Loss and dL/dr per record for the given residuals and histograms.
    fn weights(&self, residuals: &[f64], hists: &Histograms) -> (f64, Vec<f64>) {
        let cfg = &self.cfg;
        match hists {
            Histograms::Fine(Some(h)) => {
                let table = DescentTable::new(h);
                let terms: Vec<(f64, f64)> = residuals.iter().map(|&r| table.term(r)).collect();
                (
                    chunked_sum(terms.iter().map(|t| t.0)),
                    terms.into_iter().map(|t| t.1).collect(),
                )
            }
            Histograms::Fine(None) => {
                let kind = cfg.loss_kind.baseline().expect("robust baseline");
                let n = residuals.iter().filter(|r| r.is_finite()).count().max(1) as f64;
                let terms: Vec<(f64, f64)> = residuals
                    .iter()
                    .map(|&r| {
                        if r.is_finite() {
                            let (l, g) = robust_loss_baseline(r, kind, cfg.robust_scale);
                            (l / n, g / n)
                        } else {
                            (0.0, 0.0)
                        }
                    })
                    .collect();
                (
                    chunked_sum(terms.iter().map(|t| t.0)),
                    terms.into_iter().map(|t| t.1).collect(),
                )
            }
            Histograms::Coarse(hists) => {
                let stars = self.stars.as_ref().expect("coarse objective");
                let n = stars.len() as f64;
                let logs = log_residuals(residuals);
                let mut loss = 0.0;
                let mut w = vec![0.0; residuals.len()];
                for (members, h) in stars.iter().zip(hists) {
                    let Some(h) = h else { continue };
                    let table = DescentTable::new(h);
                    for &k in members {
                        let r = residuals[k];
                        let (l, g) = table.term(logs[k]);
                        loss += l / n;
                        if g != 0.0 {
                            w[k] += g / n / (1.0 + r);
                        }
                    }
                }
                (loss, w)
            }
        }
    }

    /// Loss and gradient over every parameter slot with `hists` held fixed.
    pub fn evaluate(
        &self,
        params: &[f64],
        hists: &Histograms,
    ) -> Result<(f64, Vec<f64>), SolverError> {
        let residuals = self.residuals(params)?;
        let (loss, weights) = self.weights(&residuals, hists);
        Ok((loss, self.gradient(params, &weights)?))
    }

    fn gradient(&self, params: &[f64], weights: &[f64]) -> Result<Vec<f64>, SolverError> {
        let views = self.layout.views(params)?;
        let floors = self.cfg.floors;
        let frames = views.len();
        let partials: Vec<Vec<FrameGrad>> = self
            .records
            .par_chunks(CHUNK)
            .zip(weights.par_chunks(CHUNK))
            .map(|(records, ws)| {
                let mut acc = vec![FrameGrad::zero(); frames];
                for (r, &w) in records.iter().zip(ws) {
                    if w == 0.0 {
                        continue;
                    }
                    let Some((_, j)) =
                        residual_with_jacobian(&r.record, &views[r.src], &views[r.dst], &floors)
                    else {
                        continue;
                    };
                    accumulate(&mut acc, r, &j, w);
                }
                acc
            })
            .collect();
        let mut total = vec![FrameGrad::zero(); frames];
        for p in &partials {
            for (t, g) in total.iter_mut().zip(p) {
                t.add(g);
            }
        }
        Ok(self.layout.scatter(params, &total))
    }
}

fn accumulate(acc: &mut [FrameGrad], r: &IndexedRecord, j: &ResidualJacobian, w: f64) {
    let s = &mut acc[r.src];
    s.rotation += j.src_rotation * w;
    s.translation += j.src_translation * w;
    s.focal += j.src_focal * w;
    s.log_alpha += j.src_log_alpha * w;
    s.beta += j.src_beta * w;
    let d = &mut acc[r.dst];
    d.rotation += j.dst_rotation * w;
    d.translation += j.dst_translation * w;
    d.focal += j.dst_focal * w;
}

fn log_residuals(residuals: &[f64]) -> Vec<f64> {
    residuals
        .par_iter()
        .with_min_len(CHUNK)
        .map(|r| r.ln_1p())
        .collect()
}

fn chunked_sum(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.chunks(CHUNK)
        .map(|c| c.iter().sum::<f64>())
        .fold(0.0, |a, b| a + b)
}

fn histogram_of(
    values: impl Iterator<Item = f64>,
    tau_max: f64,
    bins: usize,
    normalization: Normalization,
) -> Result<ResidualHistogram, DistributionError> {
    let mut acc = HistogramAccumulator::new(tau_max, bins)?;
    for r in values {
        acc.add(r);
    }
    acc.finish(normalization)
}

/// Records whose endpoints are both in the layout, plus the record indices
/// of each undirected edge.
fn index_records(
    layout: &ParameterLayout,
    data: &DataMatrix,
) -> (Vec<IndexedRecord>, HashMap<(u32, u32), Vec<usize>>) {
    let mut records = Vec::with_capacity(data.record_count());
    let mut by_edge: HashMap<(u32, u32), Vec<usize>> = HashMap::new();
    for block in &data.blocks {
        let (Some(src), Some(dst)) = (layout.frame_index(block.src), layout.frame_index(block.dst))
        else {
            continue;
        };
        let key = (block.src.min(block.dst), block.src.max(block.dst));
        let slot = by_edge.entry(key).or_default();
        for rec in &block.records {
            slot.push(records.len());
            records.push(IndexedRecord {
                src,
                dst,
                record: *rec,
            });
        }
    }
    (records, by_edge)
}

fn linear_histogram(residuals: &[f64], cfg: &OptimizerConfig) -> Option<ResidualHistogram> {
    histogram_of(
        residuals.iter().copied(),
        cfg.tau_max_fine,
        cfg.bin_count,
        Normalization::AllFinite,
    )
    .ok()
}

fn inlier_fraction(residuals: &[f64], tau: f64) -> f64 {
    let finite = residuals.iter().filter(|r| r.is_finite()).count();
    if finite == 0 {
        return 0.0;
    }
    residuals.iter().filter(|&&r| r < tau).count() as f64 / finite as f64
}

fn run_stage(
    objective: &Objective,
    stage: Stage,
    iterations: usize,
    states: &mut BTreeMap<u32, FrameState>,
    hooks: &mut Hooks<'_>,
) -> Result<StageReport, SolverError> {
    let cfg = &objective.cfg;
    let layout = &objective.layout;
    let mut params = layout.pack();
    let mut adam = AdamState::new(params.len());
    let mut report = StageReport {
        stage,
        iterations_run: 0,
        loss_history: Vec::with_capacity(iterations),
        histogram: None,
        cancelled: false,
    };
    let trainable = layout.learning_rates().iter().any(|&l| l != 0.0);
    let mut hists = None;
    for it in 0..iterations {
        if hooks.cancelled() {
            report.cancelled = true;
            break;
        }
        let residuals = objective.residuals(&params)?;
        if it % cfg.histogram_rebuild_interval == 0 || hists.is_none() {
            hists = Some(objective.histograms(&residuals)?);
        }
        let (loss, weights) = objective.weights(&residuals, hists.as_ref().unwrap());
        report.loss_history.push(loss);
        hooks.report(Progress {
            stage,
            iteration: it,
            iterations,
            loss,
            inlier_fraction: inlier_fraction(&residuals, cfg.tau_max_fine),
        });
        if trainable {
            let grad = objective.gradient(&params, &weights)?;
            adam.step(&mut params, &grad, layout.learning_rates(), cfg);
        }
        report.iterations_run += 1;
    }
    if report.iterations_run > 0 {
        layout.write_back(&params, states);
        report.histogram = linear_histogram(&objective.residuals(&params)?, cfg);
    }
    Ok(report)
}

/// Log-residual optimization with one histogram per star.
pub fn coarse_stage(
    states: &mut BTreeMap<u32, FrameState>,
    data: &DataMatrix,
    stars: &[StarSubgraph],
    cfg: &OptimizerConfig,
    hooks: &mut Hooks<'_>,
) -> Result<StageReport, SolverError> {
    let objective = Objective::coarse(states, data, stars, cfg)?;
    run_stage(
        &objective,
        Stage::Coarse,
        cfg.iterations_coarse,
        states,
        hooks,
    )
}

/// Linear-residual optimization with one global histogram, or the chosen
/// robust baseline.
pub fn fine_stage(
    states: &mut BTreeMap<u32, FrameState>,
    data: &DataMatrix,
    cfg: &OptimizerConfig,
    hooks: &mut Hooks<'_>,
) -> Result<StageReport, SolverError> {
    let objective = Objective::fine(states, data, cfg)?;
    run_stage(&objective, Stage::Fine, cfg.iterations_fine, states, hooks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, CameraPose, Trainable};
    use crate::graph::DirectedBlock;
    use nalgebra::Vector2;

    fn two_frames() -> (BTreeMap<u32, FrameState>, DataMatrix) {
        let k = CameraIntrinsics::centered(100.0, 64, 48).unwrap();
        let mut a = FrameState::new(0, k);
        a.trainable = Trainable::NONE;
        let mut b = FrameState::new(1, k);
        b.pose = CameraPose::from_rotation(&Matrix3::identity(), Vector3::new(-0.5, 0.0, 0.0));
        let records = (0..40)
            .map(|n| {
                let p = Vector2::new((n % 8) as f64 * 7.0 + 3.0, (n / 8) as f64 * 9.0 + 2.0);
                let depth = 4.0 + (n % 3) as f64 * 0.5;
                let x = Vector3::new(
                    (p.x - 32.0) / 100.0 * depth - 0.5,
                    (p.y - 24.0) / 100.0 * depth,
                    depth,
                );
                DataRecord {
                    src_pixel: p,
                    dst_pixel: Vector2::new(100.0 * x.x / x.z + 32.0, 100.0 * x.y / x.z + 24.0),
                    src_depth: depth,
                }
            })
            .collect();
        let data = DataMatrix {
            kappa: 40,
            seed: 0,
            blocks: vec![DirectedBlock {
                src: 0,
                dst: 1,
                records,
            }],
            dropped: vec![],
        };
        (BTreeMap::from([(0, a), (1, b)]), data)
    }

    fn short(iters: usize) -> OptimizerConfig {
        OptimizerConfig {
            iterations_coarse: iters,
            iterations_fine: iters,
            ..Default::default()
        }
    }

    #[test]
    fn adam_moves_against_the_gradient() {
        let cfg = OptimizerConfig::default();
        let mut adam = AdamState::new(2);
        let mut p = [1.0, 1.0];
        adam.step(&mut p, &[2.0, -3.0], &[0.1, 0.0], &cfg);
        // The first bias-corrected step has magnitude lr.
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert_eq!(p[1], 1.0);
        assert!(adam.v.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn frozen_frames_stay_bit_identical() {
        let (mut states, data) = two_frames();
        for s in states.values_mut() {
            s.trainable = Trainable::NONE;
        }
        let before = states.clone();
        fine_stage(&mut states, &data, &short(20), &mut Hooks::default()).unwrap();
        assert_eq!(states, before);
    }

    #[test]
    fn zero_iterations_is_a_no_op() {
        let (mut states, data) = two_frames();
        states.get_mut(&1).unwrap().pose.translation.x = -0.45;
        let before = states.clone();
        let r = fine_stage(&mut states, &data, &short(0), &mut Hooks::default()).unwrap();
        assert_eq!(r.iterations_run, 0);
        assert_eq!(states, before);
    }

    #[test]
    fn fine_stage_reduces_misalignment() {
        let (mut states, data) = two_frames();
        let b = states.get_mut(&1).unwrap();
        b.pose.translation.x = -0.45;
        b.trainable = Trainable {
            pose: true,
            focal: false,
            correction: false,
        };
        let cfg = short(400);
        let mean = |states: &BTreeMap<u32, FrameState>| {
            let obj = Objective::fine(states, &data, &cfg).unwrap();
            let res = obj.residuals(&obj.layout().pack()).unwrap();
            res.iter().sum::<f64>() / res.len() as f64
        };
        let before = mean(&states);
        let r = fine_stage(&mut states, &data, &cfg, &mut Hooks::default()).unwrap();
        let after = mean(&states);
        assert!(after < 0.05 * before, "{before} -> {after}");
        assert!(r.final_loss().unwrap() < r.loss_history[0]);
    }

    #[test]
    fn coarse_gradient_survives_large_displacement() {
        let (mut states, data) = two_frames();
        // Push residuals to roughly e^5 pixels.
        states.get_mut(&1).unwrap().pose.translation.x = 3.0;
        let stars = vec![StarSubgraph {
            center: 0,
            vertices: vec![0, 1],
            edges: vec![(0, 1)],
        }];
        let obj = Objective::coarse(&states, &data, &stars, &short(1)).unwrap();
        let p = obj.layout().pack();
        let res = obj.residuals(&p).unwrap();
        assert!(res.iter().all(|r| r.ln_1p() > 4.0 && r.ln_1p() < 10.0));
        let h = obj.histograms(&res).unwrap();
        let (_, g) = obj.evaluate(&p, &h).unwrap();
        assert!(g.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn empty_coarse_problem_is_reported() {
        let (mut states, data) = two_frames();
        states.get_mut(&1).unwrap().pose.translation.z = -100.0;
        let stars = vec![StarSubgraph {
            center: 0,
            vertices: vec![0, 1],
            edges: vec![(0, 1)],
        }];
        assert_eq!(
            coarse_stage(&mut states, &data, &stars, &short(5), &mut Hooks::default()),
            Err(SolverError::AllSubgraphsEmpty)
        );
    }

    #[test]
    fn cancellation_stops_early() {
        let (mut states, data) = two_frames();
        let flag = AtomicBool::new(true);
        let mut hooks = Hooks {
            cancel: Some(&flag),
            ..Default::default()
        };
        let r = fine_stage(&mut states, &data, &short(50), &mut hooks).unwrap();
        assert!(r.cancelled);
        assert_eq!(r.iterations_run, 0);
    }

    #[test]
    fn shared_focal_uses_one_slot() {
        let (mut states, _) = two_frames();
        for s in states.values_mut() {
            s.trainable = Trainable::ALL;
        }
        let cfg = OptimizerConfig {
            shared_focal: true,
            ..Default::default()
        };
        let layout = ParameterLayout::new(&states, &cfg);
        assert_eq!(layout.len(), 2 * SLOTS_PER_FRAME - 1);
        let focal_lr = layout
            .learning_rates()
            .iter()
            .filter(|&&l| l == cfg.lr * 50.0)
            .count();
        assert_eq!(focal_lr, 1);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (mut states, data) = two_frames();
        let b = states.get_mut(&1).unwrap();
        b.pose = CameraPose::from_rotation(
            &crate::geometry::axis_angle(&Vector3::new(0.2, 1.0, 0.1), 0.02),
            Vector3::new(-0.43, 0.03, 0.05),
        );
        b.correction = crate::geometry::AffineDepthCorrection::new(1.05, 0.02).unwrap();
        for loss_kind in [LossKind::Mba, LossKind::Cauchy] {
            let cfg = OptimizerConfig {
                loss_kind,
                ..short(1)
            };
            let obj = Objective::fine(&states, &data, &cfg).unwrap();
            let p = obj.layout().pack();
            let h = obj.histograms(&obj.residuals(&p).unwrap()).unwrap();
            let (_, g) = obj.evaluate(&p, &h).unwrap();
            let scale = g.iter().fold(0.0f64, |a, b| a.max(b.abs()));
            for k in 0..p.len() {
                if obj.layout().learning_rates()[k] == 0.0 {
                    continue;
                }
                let step = 1e-6;
                let (mut up, mut dn) = (p.clone(), p.clone());
                up[k] += step;
                dn[k] -= step;
                let fd = (obj.evaluate(&up, &h).unwrap().0 - obj.evaluate(&dn, &h).unwrap().0)
                    / (2.0 * step);
                assert!(
                    (fd - g[k]).abs() <= 1e-3 * g[k].abs().max(1e-3 * scale),
                    "{loss_kind:?} slot {k}: {fd} vs {}",
                    g[k]
                );
            }
        }
    }

    #[test]
    fn config_validation() {
        let bad = OptimizerConfig {
            lr: 0.0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(SolverError::InvalidConfig(_))));
        assert!(OptimizerConfig::default().validate().is_ok());
    }
}
