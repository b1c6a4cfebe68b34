use std::io::Write;
use std::path::Path;

use nalgebra::{Vector2, Vector3};

use super::{DepthMap, IoError};
use crate::geometry::{FrameState, FrameView, ProjectionFloors};

pub struct PlyFrame<'a> {
    pub state: &'a FrameState,
    pub depth: &'a DepthMap,
    pub registered: bool,
}

fn frame_points(frame: &PlyFrame<'_>, stride: u32) -> Vec<(Vector3<f64>, f64)> {
    let Ok(view) = FrameView::new(frame.state) else {
        return Vec::new();
    };
    let floors = ProjectionFloors::default();
    let stride = stride.max(1);
    let mut out = Vec::new();
    for v in (0..frame.depth.height).step_by(stride as usize) {
        for u in (0..frame.depth.width).step_by(stride as usize) {
            let Some(d) = frame.depth.get(u, v) else {
                continue;
            };
            let p = Vector2::new(u as f64, v as f64);
            if let Some(x) = view.back_project(&p, d, &floors) {
                out.push((view.camera_to_world(&x), x.z));
            }
        }
    }
    out
}

/// ASCII PLY with xyz and a grayscale color from each frame's normalized
/// corrected depth. Unregistered frames are skipped. Returns the vertex count.
pub fn write_ply<W: Write>(
    out: &mut W,
    frames: &[PlyFrame<'_>],
    stride: u32,
) -> std::io::Result<usize> {
    let mut vertices = Vec::new();
    for f in frames.iter().filter(|f| f.registered) {
        let pts = frame_points(f, stride);
        let (lo, hi) = pts
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, d)| {
                (lo.min(*d), hi.max(*d))
            });
        let span = (hi - lo).max(f64::MIN_POSITIVE);
        vertices.extend(pts.into_iter().map(|(x, d)| {
            let gray = (255.0 * (1.0 - (d - lo) / span)).round().clamp(0.0, 255.0) as u8;
            (x, gray)
        }));
    }
    writeln!(out, "ply")?;
    writeln!(out, "format ascii 1.0")?;
    writeln!(out, "element vertex {}", vertices.len())?;
    for axis in ["x", "y", "z"] {
        writeln!(out, "property float {axis}")?;
    }
    for channel in ["red", "green", "blue"] {
        writeln!(out, "property uchar {channel}")?;
    }
    writeln!(out, "end_header")?;
    for (x, g) in &vertices {
        writeln!(
            out,
            "{} {} {} {g} {g} {g}",
            x.x as f32, x.y as f32, x.z as f32
        )?;
    }
    Ok(vertices.len())
}

pub fn export_ply(frames: &[PlyFrame<'_>], stride: u32, path: &Path) -> Result<usize, IoError> {
    let file = std::fs::File::create(path).map_err(|e| IoError::file(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let n = write_ply(&mut w, frames, stride).map_err(|e| IoError::file(path, e))?;
    w.flush().map_err(|e| IoError::file(path, e))?;
    Ok(n)
}
