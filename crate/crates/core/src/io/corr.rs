use std::path::Path;

use nalgebra::Vector2;

use super::binary::{write_f32s, write_prefix, Reader};
use super::{read_file, write_file, IoError};

const MAGIC: &[u8; 4] = b"MBAC";
const RECORD_BYTES: u64 = 20;

/// One pixel match from frame `i` to frame `j` with its confidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub src: [f32; 2],
    pub dst: [f32; 2],
    pub confidence: f32,
}

impl Match {
    pub fn src_pixel(&self) -> Vector2<f64> {
        Vector2::new(self.src[0] as f64, self.src[1] as f64)
    }

    pub fn dst_pixel(&self) -> Vector2<f64> {
        Vector2::new(self.dst[0] as f64, self.dst[1] as f64)
    }

    pub fn swapped(&self) -> Match {
        Match {
            src: self.dst,
            dst: self.src,
            confidence: self.confidence,
        }
    }
}

/// Matches for the ordered pair `frame_i -> frame_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pub frame_i: u32,
    pub frame_j: u32,
    pub matches: Vec<Match>,
}

impl CorrespondenceSet {
    pub fn reversed(&self) -> CorrespondenceSet {
        CorrespondenceSet {
            frame_i: self.frame_j,
            frame_j: self.frame_i,
            matches: self.matches.iter().map(Match::swapped).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 20 * self.matches.len());
        write_prefix(&mut out, MAGIC);
        out.extend_from_slice(&self.frame_i.to_le_bytes());
        out.extend_from_slice(&self.frame_j.to_le_bytes());
        out.extend_from_slice(&(self.matches.len() as u64).to_le_bytes());
        write_f32s(
            &mut out,
            self.matches
                .iter()
                .flat_map(|m| [m.src[0], m.src[1], m.dst[0], m.dst[1], m.confidence]),
        );
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IoError> {
        let mut r = Reader::new(bytes);
        r.prefix(MAGIC)?;
        let frame_i = r.u32()?;
        let frame_j = r.u32()?;
        let count = r.u64()?;
        let payload = count
            .checked_mul(RECORD_BYTES)
            .ok_or(IoError::TruncatedFile {
                needed: u64::MAX,
                available: bytes.len() as u64,
            })?;
        r.expect_remaining(payload)?;
        let flat = r.f32s(count as usize * 5)?;
        let matches = flat
            .chunks_exact(5)
            .enumerate()
            .map(|(index, c)| {
                if !(0.0..=1.0).contains(&c[4]) {
                    return Err(IoError::ConfidenceOutOfRange {
                        index: index as u64,
                        value: c[4],
                    });
                }
                Ok(Match {
                    src: [c[0], c[1]],
                    dst: [c[2], c[3]],
                    confidence: c[4],
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            frame_i,
            frame_j,
            matches,
        })
    }
}

pub fn read_correspondences(path: &Path) -> Result<CorrespondenceSet, IoError> {
    CorrespondenceSet::from_bytes(&read_file(path)?)
}

pub fn write_correspondences(path: &Path, set: &CorrespondenceSet) -> Result<(), IoError> {
    write_file(path, &set.to_bytes())
}
