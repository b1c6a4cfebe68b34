use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mba_core::io::{read_result, write_correspondences, write_result};
use mba_core::synthetic::{generate, SyntheticConfig};

fn mba(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mba"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn mba")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes a small noiseless scene through `mba synth`.
fn synth(dir: &Path, frames: usize, seed: u64) -> PathBuf {
    let cfg = SyntheticConfig {
        frame_count: frames,
        corr_noise_px: 0.0,
        outlier_fraction: 0.0,
        seed,
        ..Default::default()
    };
    let cfg_path = dir.join("synth.json");
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let scene = dir.join("scene");
    let o = mba(&["synth", "--config", path(&cfg_path), "--out", path(&scene)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(scene.join("manifest.json").is_file());
    assert!(scene.join("ground_truth.json").is_file());
    scene
}

const QUICK: [&str; 4] = ["--iters-coarse", "300", "--iters-fine", "300"];

fn sfm(manifest: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["sfm", "--manifest", path(manifest), "--out", path(out)];
    args.extend_from_slice(&QUICK);
    args.extend_from_slice(extra);
    mba(&args)
}

#[test]
fn synth_sfm_eval_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = synth(tmp.path(), 5, 11);
    let out = tmp.path().join("run");
    let o = sfm(&scene.join("manifest.json"), &out, &["--ply", "8"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("registered  5"), "{}", stdout(&o));
    for f in ["result.json", "histogram.csv", "points.ply"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let csv = std::fs::read_to_string(out.join("histogram.csv")).unwrap();
    assert!(csv.starts_with("bin_start,bin_end,count,cdf,pdf"));
    assert_eq!(csv.lines().count(), 101);

    let est = out.join("result.json");
    let gt = scene.join("ground_truth.json");
    let o = mba(&["eval", "--est", path(&est), "--gt", path(&gt), "--json"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["common_frames"], 5);
    assert_eq!(report["rra"], 100.0);
    assert_eq!(report["rta"], 100.0);

    let o = mba(&["eval", "--est", path(&est), "--gt", path(&gt)]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("RRA"), "{}", stdout(&o));
}

#[test]
fn sfm_output_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = synth(tmp.path(), 4, 5);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = sfm(&scene.join("manifest.json"), out, &["--seed", "7"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["result.json", "histogram.csv"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn missing_manifest_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = sfm(&tmp.path().join("nope.json"), &tmp.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).starts_with("error[IO_NOT_FOUND]:"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn usage_errors_exit_with_one() {
    let o = mba(&["bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[USAGE]:"), "{}", stderr(&o));

    let o = mba(&[
        "sfm",
        "--manifest",
        "m.json",
        "--out",
        "x",
        "--loss",
        "huber",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("error[USAGE]"), "{}", stderr(&o));
}

#[test]
fn help_lists_subcommands_and_flags() {
    let o = mba(&["--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for sub in ["sfm", "reloc", "ransac2v", "synth", "eval"] {
        assert!(text.contains(sub), "missing {sub}");
    }
    let o = mba(&["sfm", "--help"]);
    let text = stdout(&o);
    for flag in [
        "--shared-intrinsics",
        "--loss",
        "--kappa",
        "--nu",
        "--chi",
        "--tau-max",
        "--tau-bar-max",
        "--bins",
        "--iters-coarse",
        "--iters-fine",
        "--lr",
        "--intrinsics-lr-mult",
        "--workers",
        "--seed",
        "--ply",
    ] {
        assert!(text.contains(flag), "missing {flag}");
    }
}

#[test]
fn ransac2v_on_a_synthetic_pair() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = generate(&SyntheticConfig {
        frame_count: 4,
        corr_noise_px: 0.0,
        outlier_fraction: 0.0,
        seed: 2,
        ..Default::default()
    })
    .unwrap();
    let set = scene
        .correspondences
        .iter()
        .find(|c| c.frame_i == 0 && c.frame_j == 1)
        .expect("pair 0-1");
    let file = tmp.path().join("corr.bin");
    write_correspondences(&file, set).unwrap();
    let k = scene.config.focal_true;
    let (w, h) = scene.config.image_size;
    let (cx, cy) = (format!("{}", w as f64 / 2.0), format!("{}", h as f64 / 2.0));
    let fx = format!("{k}");
    let base = [
        "ransac2v",
        "--corrs",
        path(&file),
        "--fx",
        &fx,
        "--cx",
        &cx,
        "--cy",
        &cy,
    ];

    let o = mba(&base);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    for key in ["E =", "R =", "t =", "inliers"] {
        assert!(text.contains(key), "missing {key}: {text}");
    }
    let inliers: usize = text
        .lines()
        .find_map(|l| l.strip_prefix("inliers "))
        .and_then(|l| l.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert!(
        inliers * 10 >= set.matches.len() * 9,
        "{inliers} of {}",
        set.matches.len()
    );

    let mut with_grid = base.to_vec();
    with_grid.extend_from_slice(&["--grid", "0.001,0.002,0.004"]);
    let o = mba(&with_grid);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let mut bad = base.to_vec();
    bad.extend_from_slice(&["--grid", "0.001,-1"]);
    assert_eq!(mba(&bad).status.code(), Some(1));
}

#[test]
fn ransac2v_without_enough_matches_fails_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = generate(&SyntheticConfig {
        frame_count: 3,
        seed: 1,
        ..Default::default()
    })
    .unwrap();
    let mut set = scene.correspondences[0].clone();
    set.matches.truncate(3);
    let file = tmp.path().join("few.bin");
    write_correspondences(&file, &set).unwrap();
    let o = mba(&[
        "ransac2v",
        "--corrs",
        path(&file),
        "--fx",
        "80",
        "--cx",
        "48",
        "--cy",
        "36",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error["), "{}", stderr(&o));
}

#[test]
fn reloc_places_queries_against_a_fixed_map() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = synth(tmp.path(), 6, 21);
    let gt = read_result(&scene.join("ground_truth.json")).unwrap();
    let mut map = gt.clone();
    for f in &mut map.frames {
        if f.frame_id == 2 || f.frame_id == 4 {
            f.registered = false;
            f.rotation = None;
            f.translation = None;
            f.focal = None;
            f.alpha = None;
            f.beta = None;
        }
    }
    let map_path = tmp.path().join("map.json");
    write_result(&map, &map_path).unwrap();
    let out = tmp.path().join("reloc");
    let manifest = scene.join("manifest.json");
    let mut args = vec![
        "reloc",
        "--map",
        path(&map_path),
        "--manifest",
        path(&manifest),
        "--out",
        path(&out),
    ];
    args.extend_from_slice(&QUICK);
    let o = mba(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("queries     2"), "{}", stdout(&o));
    assert!(stdout(&o).contains("registered  2"), "{}", stdout(&o));

    let doc = read_result(&out.join("result.json")).unwrap();
    assert_eq!(doc.frames.len(), 6);
    for (got, want) in doc.frames.iter().zip(&map.frames) {
        if want.registered {
            assert_eq!(
                got.rotation, want.rotation,
                "map frame {} moved",
                got.frame_id
            );
            assert_eq!(got.translation, want.translation);
        } else {
            assert!(got.registered);
        }
    }
    let o = mba(&[
        "eval",
        "--est",
        path(&out.join("result.json")),
        "--gt",
        path(&scene.join("ground_truth.json")),
        "--json",
    ]);
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["rra"], 100.0, "{report}");
}

#[test]
fn worker_env_must_be_numeric() {
    let o = Command::new(env!("CARGO_BIN_EXE_mba"))
        .args(["sfm", "--manifest", "m.json", "--out", "x"])
        .env("MBA_WORKERS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[USAGE]:"), "{}", stderr(&o));
}
