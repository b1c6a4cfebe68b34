//! Marginalized bundle adjustment: dense-correspondence structure from
//! motion driven by the empirical residual distribution.

pub mod distribution;
pub mod eval;
pub mod geometry;
pub mod graph;
pub mod init;
pub mod io;
pub mod ransac;
pub mod reloc;
pub mod sfm;
pub mod solver;
pub mod synthetic;
