use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    read_correspondences, read_depth, read_file, read_pointmap, CorrespondenceSet, DepthMap,
    IoError, PointMap,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicsEntry {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub frame_id: u32,
    pub width: u32,
    pub height: u32,
    pub depth_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pointmap_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intrinsics: Option<IntrinsicsEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub i: u32,
    pub j: u32,
    pub correspondence_path: PathBuf,
}

/// Scene description; relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub frames: Vec<FrameEntry>,
    #[serde(default)]
    pub pairs: Vec<PairEntry>,
    #[serde(default)]
    pub shared_intrinsics: bool,
}

impl SceneManifest {
    pub fn validate(&self) -> Result<(), IoError> {
        let mut ids = HashSet::new();
        for f in &self.frames {
            if !ids.insert(f.frame_id) {
                return Err(IoError::InvalidManifest(format!(
                    "duplicate frame_id {}",
                    f.frame_id
                )));
            }
            if f.width == 0 || f.height == 0 {
                return Err(IoError::InvalidManifest(format!(
                    "frame {} has an empty image size",
                    f.frame_id
                )));
            }
        }
        for p in &self.pairs {
            if p.i == p.j {
                return Err(IoError::InvalidManifest(format!(
                    "self pair ({}, {})",
                    p.i, p.j
                )));
            }
            for id in [p.i, p.j] {
                if !ids.contains(&id) {
                    return Err(IoError::InvalidManifest(format!(
                        "pair ({}, {}) references unknown frame {id}",
                        p.i, p.j
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, IoError> {
        let bytes = read_file(path)?;
        let manifest: SceneManifest =
            serde_json::from_slice(&bytes).map_err(|source| IoError::Json {
                path: path.to_path_buf(),
                source,
            })?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<(), IoError> {
        let text = serde_json::to_string_pretty(self).map_err(|source| IoError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        super::write_file(path, text.as_bytes())
    }
}

/// One frame's inputs, loaded.
#[derive(Debug, Clone)]
pub struct SceneFrame {
    pub frame_id: u32,
    pub width: u32,
    pub height: u32,
    pub depth: DepthMap,
    pub pointmap: Option<PointMap>,
    pub intrinsics: Option<IntrinsicsEntry>,
}

#[derive(Debug, Clone)]
pub struct SceneData {
    pub frames: Vec<SceneFrame>,
    pub correspondences: Vec<CorrespondenceSet>,
    pub shared_intrinsics: bool,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Read a manifest and every file it references.
pub fn load_scene(manifest_path: &Path) -> Result<SceneData, IoError> {
    let manifest = SceneManifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut frames = Vec::with_capacity(manifest.frames.len());
    for f in &manifest.frames {
        let depth = read_depth(&resolve(base, &f.depth_path))?;
        if (depth.width, depth.height) != (f.width, f.height) {
            return Err(IoError::InvalidManifest(format!(
                "frame {}: depth map is {}x{}, manifest says {}x{}",
                f.frame_id, depth.width, depth.height, f.width, f.height
            )));
        }
        let pointmap = match &f.pointmap_path {
            Some(p) => Some(read_pointmap(&resolve(base, p))?),
            None => None,
        };
        frames.push(SceneFrame {
            frame_id: f.frame_id,
            width: f.width,
            height: f.height,
            depth,
            pointmap,
            intrinsics: f.intrinsics,
        });
    }
    let mut correspondences = Vec::with_capacity(manifest.pairs.len());
    for p in &manifest.pairs {
        let mut set = read_correspondences(&resolve(base, &p.correspondence_path))?;
        if (set.frame_i, set.frame_j) == (p.j, p.i) {
            set = set.reversed();
        } else if (set.frame_i, set.frame_j) != (p.i, p.j) {
            return Err(IoError::InvalidManifest(format!(
                "pair ({}, {}): file holds pair ({}, {})",
                p.i, p.j, set.frame_i, set.frame_j
            )));
        }
        correspondences.push(set);
    }
    Ok(SceneData {
        frames,
        correspondences,
        shared_intrinsics: manifest.shared_intrinsics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: u32) -> FrameEntry {
        FrameEntry {
            frame_id: id,
            width: 4,
            height: 3,
            depth_path: format!("d{id}.bin").into(),
            pointmap_path: None,
            intrinsics: None,
        }
    }

    #[test]
    fn rejects_duplicate_ids_and_dangling_pairs() {
        let m = SceneManifest {
            frames: vec![entry(0), entry(0)],
            pairs: vec![],
            shared_intrinsics: false,
        };
        assert!(m.validate().is_err());
        let m = SceneManifest {
            frames: vec![entry(0), entry(1)],
            pairs: vec![PairEntry {
                i: 0,
                j: 2,
                correspondence_path: "c.bin".into(),
            }],
            shared_intrinsics: false,
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn optional_fields_default() {
        let text = r#"{"frames":[{"frame_id":1,"width":4,"height":3,"depth_path":"d.bin"}]}"#;
        let m: SceneManifest = serde_json::from_str(text).unwrap();
        assert!(m.pairs.is_empty());
        assert!(!m.shared_intrinsics);
        assert!(m.frames[0].intrinsics.is_none());
    }
}
