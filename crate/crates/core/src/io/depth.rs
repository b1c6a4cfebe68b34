use std::path::Path;

use nalgebra::{Vector2, Vector3};

use super::binary::{checked_pixels, write_f32s, write_prefix, Reader};
use super::{read_file, write_file, IoError};

const DEPTH_MAGIC: &[u8; 4] = b"MBAD";
const POINTMAP_MAGIC: &[u8; 4] = b"MBAP";

/// Row-major depth grid. Values that are not finite and positive are
/// invalid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl DepthMap {
    pub fn new(width: u32, height: u32, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width as usize * height as usize);
        Self {
            width,
            height,
            data,
        }
    }

    pub fn is_valid(v: f32) -> bool {
        v.is_finite() && v > 0.0
    }

    /// Valid depth at integer pixel `(u, v)`.
    pub fn get(&self, u: u32, v: u32) -> Option<f64> {
        if u >= self.width || v >= self.height {
            return None;
        }
        let d = self.data[v as usize * self.width as usize + u as usize];
        Self::is_valid(d).then_some(d as f64)
    }

    /// Nearest-pixel lookup.
    pub fn sample_nearest(&self, p: &Vector2<f64>) -> Option<f64> {
        let (u, v) = (p.x.round(), p.y.round());
        if !(u >= 0.0 && v >= 0.0) {
            return None;
        }
        self.get(u as u32, v as u32)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        write_prefix(&mut out, DEPTH_MAGIC);
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        write_f32s(&mut out, self.data.iter().copied());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IoError> {
        let mut r = Reader::new(bytes);
        r.prefix(DEPTH_MAGIC)?;
        let height = r.u32()?;
        let width = r.u32()?;
        let n = checked_pixels(width, height)?;
        r.expect_remaining(n as u64 * 4)?;
        let data = r.f32s(n)?;
        Ok(Self {
            width,
            height,
            data,
        })
    }
}

/// Row-major grid of camera-frame 3D points.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMap {
    pub width: u32,
    pub height: u32,
    pub data: Vec<[f32; 3]>,
}

impl PointMap {
    pub fn new(width: u32, height: u32, data: Vec<[f32; 3]>) -> Self {
        assert_eq!(data.len(), width as usize * height as usize);
        Self {
            width,
            height,
            data,
        }
    }

    pub fn get(&self, u: u32, v: u32) -> Option<Vector3<f64>> {
        if u >= self.width || v >= self.height {
            return None;
        }
        let [x, y, z] = self.data[v as usize * self.width as usize + u as usize];
        (x.is_finite() && y.is_finite() && z.is_finite() && z > 0.0)
            .then(|| Vector3::new(x as f64, y as f64, z as f64))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 12 * self.data.len());
        write_prefix(&mut out, POINTMAP_MAGIC);
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        write_f32s(&mut out, self.data.iter().flatten().copied());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IoError> {
        let mut r = Reader::new(bytes);
        r.prefix(POINTMAP_MAGIC)?;
        let height = r.u32()?;
        let width = r.u32()?;
        let n = checked_pixels(width, height)?;
        r.expect_remaining(n as u64 * 12)?;
        let flat = r.f32s(n * 3)?;
        let data = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Ok(Self {
            width,
            height,
            data,
        })
    }
}

pub fn read_depth(path: &Path) -> Result<DepthMap, IoError> {
    DepthMap::from_bytes(&read_file(path)?)
}

pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<(), IoError> {
    write_file(path, &depth.to_bytes())
}

pub fn read_pointmap(path: &Path) -> Result<PointMap, IoError> {
    PointMap::from_bytes(&read_file(path)?)
}

pub fn write_pointmap(path: &Path, map: &PointMap) -> Result<(), IoError> {
    write_file(path, &map.to_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_round_trip() {
        let d = DepthMap::new(2, 2, vec![1.0, 2.0, -1.0, f32::NAN]);
        let bytes = d.to_bytes();
        assert_eq!(bytes.len(), 32);
        assert_eq!(&bytes[..4], b"MBAD");
        let back = DepthMap::from_bytes(&bytes).unwrap();
        assert_eq!((back.width, back.height), (2, 2));
        let bits = |m: &DepthMap| m.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&d));
        assert_eq!(back.get(0, 0), Some(1.0));
        assert_eq!(back.get(0, 1), None);
        assert_eq!(back.get(1, 1), None);
    }

    #[test]
    fn header_errors() {
        let d = DepthMap::new(2, 2, vec![1.0; 4]);
        let mut bytes = d.to_bytes();
        assert!(matches!(
            DepthMap::from_bytes(&bytes[..20]),
            Err(IoError::TruncatedFile { .. })
        ));
        bytes.push(0);
        assert!(matches!(
            DepthMap::from_bytes(&bytes),
            Err(IoError::TrailingData { .. })
        ));
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            DepthMap::from_bytes(&bytes),
            Err(IoError::BadMagic { .. })
        ));

        let mut huge = Vec::new();
        write_prefix(&mut huge, DEPTH_MAGIC);
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(
            DepthMap::from_bytes(&huge),
            Err(IoError::DimensionOverflow { .. })
        ));
    }

    #[test]
    fn pointmap_round_trip() {
        let p = PointMap::new(1, 2, vec![[0.5, -0.5, 2.0], [0.0, 0.0, -1.0]]);
        let back = PointMap::from_bytes(&p.to_bytes()).unwrap();
        assert_eq!(back, p);
        assert!(back.get(0, 0).is_some());
        assert!(back.get(0, 1).is_none());
    }
}
