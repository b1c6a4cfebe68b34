use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};

use clap::{Args, Parser, Subcommand};
use mba_core::distribution::{LossKind, ResidualHistogram};
use mba_core::eval::evaluate_documents;
use mba_core::geometry::{CameraIntrinsics, FrameState};
use mba_core::init::{pixel_pairs, select_pose};
use mba_core::io::{
    export_ply, load_scene, read_correspondences, read_result, write_result, FrameRecord,
    HistogramSummary, IoError, PlyFrame, ResultDocument, RunMetadata, SceneData,
};
use mba_core::ransac::{estimate_essential_marginalized, RansacConfig, RansacError};
use mba_core::reloc::{relocalize, QueryOutcome, RelocConfig, RelocError};
use mba_core::sfm::{run_sfm, SfmConfig, SfmError};
use mba_core::solver::{Hooks, OptimizerConfig, Progress};
use mba_core::synthetic::{generate, SyntheticConfig};

static INTERRUPTED: AtomicBool = AtomicBool::new(false);

const LOSSES: [&str; 5] = ["mba", "soft_l1", "cauchy", "tukey", "l2"];

#[derive(Parser)]
#[command(
    name = "mba",
    version,
    about = "Dense-correspondence structure from motion over monocular depth maps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register every frame of a scene and write the poses.
    Sfm(SfmArgs),
    /// Register query frames against a fixed map.
    Reloc(RelocArgs),
    /// Two-view essential-matrix RANSAC on one correspondence file.
    Ransac2v(RansacArgs),
    /// Write a synthetic scene with ground truth.
    Synth(SynthArgs),
    /// Compare an estimate with ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SolverArgs {
    /// Fine-stage loss.
    #[arg(long, default_value = "mba", value_parser = LOSSES)]
    loss: String,
    /// Records sampled per directed edge.
    #[arg(long, default_value_t = 200)]
    kappa: usize,
    /// Co-visibility threshold for pose-graph edges.
    #[arg(long, default_value_t = 0.15)]
    nu: f64,
    /// Minimum match confidence.
    #[arg(long, default_value_t = 0.2)]
    chi: f64,
    /// Fine-stage histogram range, pixels.
    #[arg(long, default_value_t = 20.0)]
    tau_max: f64,
    /// Coarse-stage histogram range, log-residual units.
    #[arg(long, default_value_t = 10.0)]
    tau_bar_max: f64,
    /// Histogram bin count.
    #[arg(long, default_value_t = 100)]
    bins: usize,
    /// Coarse iterations [default: 25000 for sfm, 5000 for reloc].
    #[arg(long)]
    iters_coarse: Option<usize>,
    /// Fine iterations [default: 25000 for sfm, 5000 for reloc].
    #[arg(long)]
    iters_fine: Option<usize>,
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Learning-rate multiplier for focal lengths.
    #[arg(long, default_value_t = 50.0)]
    intrinsics_lr_mult: f64,
    /// Worker threads, 0 for one per core. MBA_WORKERS takes precedence.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Seed for sampling and RANSAC.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SolverArgs {
    fn optimizer(&self, default_iters: usize) -> Result<OptimizerConfig, Failure> {
        let loss_kind: LossKind = self.loss.parse().map_err(|e: String| Failure::usage(e))?;
        Ok(OptimizerConfig {
            iterations_coarse: self.iters_coarse.unwrap_or(default_iters),
            iterations_fine: self.iters_fine.unwrap_or(default_iters),
            lr: self.lr,
            intrinsics_lr_multiplier: self.intrinsics_lr_mult,
            tau_max_fine: self.tau_max,
            tau_bar_max_coarse: self.tau_bar_max,
            bin_count: self.bins,
            loss_kind,
            seed: self.seed,
            ..Default::default()
        })
    }
}

#[derive(Args)]
struct SfmArgs {
    /// Scene manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// One focal length for every frame.
    #[arg(long)]
    shared_intrinsics: bool,
    /// Also write a point cloud, keeping every n-th pixel.
    #[arg(long, value_name = "STRIDE")]
    ply: Option<u32>,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct RelocArgs {
    /// Result document whose registered frames form the map.
    #[arg(long)]
    map: PathBuf,
    /// Manifest listing map and query frames with their pairs.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Drop query-to-query edges and solve each query on its own.
    #[arg(long)]
    no_query_query: bool,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct RansacArgs {
    /// Correspondence file.
    #[arg(long)]
    corrs: PathBuf,
    /// Focal length in pixels, shared by both views.
    #[arg(long)]
    fx: f64,
    /// Principal point x.
    #[arg(long)]
    cx: f64,
    /// Principal point y.
    #[arg(long)]
    cy: f64,
    /// Minimal samples drawn.
    #[arg(long, default_value_t = 64)]
    hypotheses: usize,
    /// Largest Sampson-distance threshold, normalized units.
    #[arg(long, default_value_t = 0.005, conflicts_with = "grid")]
    tau_max: f64,
    /// Explicit threshold list, normalized units, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0)]
    /// Sampling seed.
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    /// JSON generator settings; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Estimated result document.
    #[arg(long)]
    est: PathBuf,
    /// Ground-truth result document.
    #[arg(long)]
    gt: PathBuf,
    /// Accuracy threshold, degrees.
    #[arg(long, default_value_t = 5.0)]
    tau: f64,
    /// Print the metrics as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Debug)]
struct Failure {
    code: &'static str,
    exit: u8,
    message: String,
}

impl Failure {
    fn new(code: &'static str, exit: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            exit,
            message: message.into(),
        }
    }

    fn usage(message: impl Into<String>) -> Self {
        Self::new("USAGE", 1, message)
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        let code = if e.is_not_found() {
            "IO_NOT_FOUND"
        } else {
            match e {
                IoError::BadMagic { .. } => "IO_BAD_MAGIC",
                IoError::UnsupportedVersion(_) => "IO_VERSION",
                IoError::TruncatedFile { .. } => "IO_TRUNCATED",
                IoError::TrailingData { .. } => "IO_TRAILING_DATA",
                IoError::DimensionOverflow { .. } => "IO_DIMENSIONS",
                IoError::ConfidenceOutOfRange { .. } => "IO_CONFIDENCE",
                IoError::InvalidManifest(_) => "IO_MANIFEST",
                IoError::Json { .. } => "IO_JSON",
                IoError::File { .. } | IoError::Io(_) => "IO_ERROR",
            }
        };
        Failure::new(code, 1, e.to_string())
    }
}

impl From<SfmError> for Failure {
    fn from(e: SfmError) -> Self {
        let (code, exit) = match &e {
            SfmError::InvalidConfig(_) => ("CONFIG_INVALID", 1),
            SfmError::NoFrames => ("NO_FRAMES", 1),
            SfmError::MissingIntrinsics(_) => ("MISSING_INTRINSICS", 1),
            SfmError::Calibration { .. } => ("CALIBRATION_FAILED", 2),
            SfmError::Geometry(_) => ("GEOMETRY", 2),
            SfmError::Solver(_) => ("SOLVER", 2),
        };
        Failure::new(code, exit, e.to_string())
    }
}

impl From<RelocError> for Failure {
    fn from(e: RelocError) -> Self {
        let (code, exit) = match &e {
            RelocError::InvalidConfig(_) => ("CONFIG_INVALID", 1),
            RelocError::EmptyMap => ("MAP_EMPTY", 1),
            RelocError::MapFrameMissing(_) => ("MAP_FRAME_MISSING", 1),
            RelocError::NoQueries => ("NO_QUERIES", 1),
            RelocError::Intrinsics(inner) => return Failure::from(inner.clone()),
            RelocError::Geometry(_) => ("GEOMETRY", 2),
            RelocError::Solver(_) => ("SOLVER", 2),
        };
        Failure::new(code, exit, e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!("error[USAGE]: {first}");
            eprint!(
                "{}",
                text.lines()
                    .skip(1)
                    .map(|l| format!("{l}\n"))
                    .collect::<String>()
            );
            return ExitCode::from(1);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error[{}]: {}", f.code, f.message);
            ExitCode::from(f.exit)
        }
    }
}

fn run(command: Command) -> Result<u8, Failure> {
    match command {
        Command::Sfm(a) => cmd_sfm(a),
        Command::Reloc(a) => cmd_reloc(a),
        Command::Ransac2v(a) => cmd_ransac(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

/// `MBA_WORKERS` wins over the flag.
fn setup_workers(flag: usize) -> Result<(), Failure> {
    let workers = match std::env::var("MBA_WORKERS") {
        Ok(v) => v.trim().parse::<usize>().map_err(|_| {
            Failure::usage(format!(
                "MBA_WORKERS must be a non-negative integer, got {v:?}"
            ))
        })?,
        Err(_) => flag,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .map_err(|e| Failure::new("WORKERS", 1, e.to_string()))?;
    ctrlc::set_handler(|| INTERRUPTED.store(true, Ordering::SeqCst))
        .map_err(|e| Failure::new("SIGNAL", 1, e.to_string()))?;
    Ok(())
}

fn hooks() -> Hooks<'static> {
    Hooks {
        progress: Some(Box::new(|p: &Progress| {
            log::info!(
                "{} {}/{} loss {:.6e} inliers {:.1}%",
                p.stage,
                p.iteration + 1,
                p.iterations,
                p.loss,
                100.0 * p.inlier_fraction
            )
        })),
        report_every: 1000,
        cancel: Some(&INTERRUPTED),
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Failure::new("IO_ERROR", 1, format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text)
        .map_err(|e| Failure::new("IO_ERROR", 1, format!("{}: {e}", path.display())))
}

fn histogram_csv(h: &ResidualHistogram) -> String {
    let mut out = String::from("bin_start,bin_end,count,cdf,pdf\n");
    let w = h.bin_width();
    for (b, &c) in h.counts.iter().enumerate() {
        let (lo, hi) = (b as f64 * w, (b + 1) as f64 * w);
        let _ = writeln!(out, "{lo},{hi},{c},{},{}", h.cdf_at(hi), h.pdf_at(lo));
    }
    out
}

fn cmd_sfm(a: SfmArgs) -> Result<u8, Failure> {
    setup_workers(a.solver.workers)?;
    let scene = load_scene(&a.manifest)?;
    let cfg = SfmConfig {
        kappa: a.solver.kappa,
        nu: a.solver.nu,
        chi: a.solver.chi,
        shared_intrinsics: a.shared_intrinsics,
        optimizer: a.solver.optimizer(25_000)?,
        seed: a.solver.seed,
        ..Default::default()
    };
    create_dir(&a.out)?;
    let result = run_sfm(&scene, &cfg, &mut hooks())?;
    let config_json = serde_json::to_value(&cfg).unwrap_or_default();
    let doc = result
        .to_document(cfg.seed, config_json)
        .map_err(|e| Failure::new("GEOMETRY", 2, e.to_string()))?;
    let result_path = a.out.join("result.json");
    write_result(&doc, &result_path)?;
    if let Some(h) = result.histogram() {
        write_text(&a.out.join("histogram.csv"), &histogram_csv(h))?;
    }
    if let Some(stride) = a.ply {
        write_ply_for(
            &scene,
            &result.states,
            &|id| result.registered.contains(&id),
            stride,
            &a.out,
        )?;
    }
    for issue in &result.issues {
        log::warn!("{issue}");
    }

    let n = result.states.len();
    println!("frames      {n}");
    println!("registered  {}", result.registered.len());
    println!("edges       {}", result.edge_count);
    if let Some(l) = result.coarse.as_ref().and_then(|r| r.final_loss()) {
        println!("coarse loss {l:.6e}");
    }
    if let Some(l) = result.fine.as_ref().and_then(|r| r.final_loss()) {
        println!("fine loss   {l:.6e}");
    }
    if let Some(h) = result.histogram() {
        println!(
            "inliers     {:.2}%",
            100.0 * HistogramSummary::from(h).inlier_fraction
        );
    }
    println!("result      {}", result_path.display());

    if result.cancelled {
        eprintln!(
            "error[INTERRUPTED]: stopped early; partial result written to {}",
            result_path.display()
        );
        return Ok(2);
    }
    if result.registered.len() < 2 {
        eprintln!("error[REGISTRATION_FAILED]: no frame registered beyond the root");
        return Ok(2);
    }
    Ok(0)
}

fn write_ply_for(
    scene: &SceneData,
    states: &BTreeMap<u32, FrameState>,
    registered: &dyn Fn(u32) -> bool,
    stride: u32,
    out: &Path,
) -> Result<(), Failure> {
    let frames: Vec<PlyFrame<'_>> = scene
        .frames
        .iter()
        .filter_map(|f| {
            Some(PlyFrame {
                state: states.get(&f.frame_id)?,
                depth: &f.depth,
                registered: registered(f.frame_id),
            })
        })
        .collect();
    let n = export_ply(&frames, stride, &out.join("points.ply"))?;
    log::info!("wrote {n} points");
    Ok(())
}

fn cmd_reloc(a: RelocArgs) -> Result<u8, Failure> {
    setup_workers(a.solver.workers)?;
    let map_doc = read_result(&a.map)?;
    let mut map = BTreeMap::new();
    for rec in &map_doc.frames {
        if let Some(s) = rec
            .to_state()
            .map_err(|e| Failure::new("MAP_INVALID", 1, format!("frame {}: {e}", rec.frame_id)))?
        {
            map.insert(s.frame_id, s);
        }
    }
    let scene = load_scene(&a.manifest)?;
    let cfg = RelocConfig {
        kappa: a.solver.kappa,
        nu: a.solver.nu,
        chi: a.solver.chi,
        query_query: !a.no_query_query,
        optimizer: a.solver.optimizer(5_000)?,
        seed: a.solver.seed,
        ..Default::default()
    };
    create_dir(&a.out)?;
    let result = relocalize(&map, &scene, &cfg, &mut hooks())?;

    // map records are copied verbatim so their poses stay bit-identical
    let mut frames: Vec<FrameRecord> = map_doc
        .frames
        .iter()
        .filter(|r| !result.queries.contains_key(&r.frame_id))
        .cloned()
        .collect();
    for (id, s) in &result.queries {
        let ok = result.outcomes.get(id).is_some_and(QueryOutcome::success);
        frames.push(
            FrameRecord::from_state(s, ok)
                .map_err(|e| Failure::new("GEOMETRY", 2, e.to_string()))?,
        );
    }
    frames.sort_by_key(|f| f.frame_id);
    let mut notes = result.issues.clone();
    if result.cancelled {
        notes.push("interrupted: partial result".into());
    }
    let histogram = result
        .fine
        .last()
        .and_then(|r| r.histogram.as_ref())
        .map(HistogramSummary::from);
    let doc = ResultDocument {
        frames,
        metadata: RunMetadata {
            seed: cfg.seed,
            config: serde_json::to_value(&cfg).unwrap_or_default(),
            histogram,
            notes,
        },
    };
    let result_path = a.out.join("result.json");
    write_result(&doc, &result_path)?;
    for issue in &result.issues {
        log::warn!("{issue}");
    }

    let registered = result.registered();
    println!("map frames  {}", map.len());
    println!("queries     {}", result.queries.len());
    println!("registered  {}", registered.len());
    println!("unreachable {}", result.unreachable().len());
    println!("result      {}", result_path.display());
    if result.cancelled {
        eprintln!(
            "error[INTERRUPTED]: stopped early; partial result written to {}",
            result_path.display()
        );
        return Ok(2);
    }
    if registered.is_empty() {
        eprintln!("error[RELOC_FAILED]: no query registered");
        return Ok(2);
    }
    Ok(0)
}

fn cmd_ransac(a: RansacArgs) -> Result<u8, Failure> {
    let set = read_correspondences(&a.corrs)?;
    let (w, h) = (
        (2.0 * a.cx).round().max(1.0) as u32,
        (2.0 * a.cy).round().max(1.0) as u32,
    );
    let k = CameraIntrinsics::new(a.fx, nalgebra::Vector2::new(a.cx, a.cy), w, h)
        .map_err(|e| Failure::usage(e.to_string()))?;
    let pairs: Vec<_> = pixel_pairs(&set)
        .iter()
        .map(|(p, q)| (k.normalize(p), k.normalize(q)))
        .collect();
    if let Some(g) = &a.grid {
        if g.is_empty() || g.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
            return Err(Failure::usage("--grid needs positive finite thresholds"));
        }
    }
    let cfg = RansacConfig {
        hypotheses: a.hypotheses,
        tau_max: a.tau_max,
        seed: a.seed,
        grid: a.grid.clone(),
        ..Default::default()
    };
    let est = match estimate_essential_marginalized(&pairs, &cfg) {
        Ok(e) => e,
        Err(e @ RansacError::NoValidHypothesis) => {
            return Err(Failure::new("NO_VALID_HYPOTHESIS", 2, e.to_string()))
        }
        Err(e @ RansacError::TooFewCorrespondences { .. }) => {
            return Err(Failure::new("TOO_FEW_CORRESPONDENCES", 2, e.to_string()))
        }
    };
    let inliers: Vec<_> = pairs
        .iter()
        .zip(&est.inlier_mask)
        .filter(|(_, &m)| m)
        .map(|(p, _)| p)
        .collect();
    let (r, t, _) = select_pose(&est.essential, inliers.into_iter());
    let matrix = |m: &nalgebra::Matrix3<f64>| {
        (0..3)
            .map(|i| {
                format!(
                    "  {:>14.8} {:>14.8} {:>14.8}",
                    m[(i, 0)],
                    m[(i, 1)],
                    m[(i, 2)]
                )
            })
            .collect::<Vec<_>>()
            .join("\n")
    };
    println!("E =\n{}", matrix(&est.essential));
    println!("R =\n{}", matrix(&r));
    println!("t = {:.8} {:.8} {:.8}", t.x, t.y, t.z);
    println!("inliers {} / {}", est.inlier_count(), pairs.len());
    println!("score {}", est.score);
    Ok(0)
}

fn cmd_synth(a: SynthArgs) -> Result<u8, Failure> {
    let cfg: SyntheticConfig = match &a.config {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| {
                let code = if e.kind() == std::io::ErrorKind::NotFound {
                    "IO_NOT_FOUND"
                } else {
                    "IO_ERROR"
                };
                Failure::new(code, 1, format!("{}: {e}", p.display()))
            })?;
            serde_json::from_slice(&bytes)
                .map_err(|e| Failure::new("IO_JSON", 1, format!("{}: {e}", p.display())))?
        }
        None => SyntheticConfig::default(),
    };
    let scene = generate(&cfg).map_err(|e| Failure::new("CONFIG_INVALID", 1, e.to_string()))?;
    let manifest = scene.write(&a.out)?;
    println!("frames        {}", scene.frames.len());
    println!("pairs         {}", scene.correspondences.len());
    println!("manifest      {}", manifest.display());
    println!(
        "ground truth  {}",
        a.out.join("ground_truth.json").display()
    );
    Ok(0)
}

fn cmd_eval(a: EvalArgs) -> Result<u8, Failure> {
    let est = read_result(&a.est)?;
    let gt = read_result(&a.gt)?;
    let report = evaluate_documents(&est, &gt, a.tau);
    if a.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&report).expect("report serializes")
        );
        return Ok(0);
    }
    let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.1}"));
    let row = |label: String, value: String| println!("{label:<18}{value}");
    let t = a.tau;
    row(
        "frames".into(),
        format!("{} / {}", report.common_frames, report.gt_frames),
    );
    row(
        "registration".into(),
        format!("{:.1}", report.registration_rate),
    );
    row(format!("RRA@{t}"), pct(report.rra));
    row(format!("RTA@{t}"), pct(report.rta));
    row(format!("AUC@{t}"), pct(report.auc));
    let ate = match report.ate {
        Some(v) if report.ate_degenerate => format!("{v:.6} (collinear)"),
        Some(v) => format!("{v:.6}"),
        None => "n/a".into(),
    };
    row("ATE (normalized)".into(), ate);
    Ok(0)
}
