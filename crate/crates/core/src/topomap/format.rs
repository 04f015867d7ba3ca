//! Little-endian map (`VTRM`) and frame-stream (`VTRF`) files.
//!
//! Map: magic | u32 version | u32 node_count | u32 descriptor_dim |
//! u64 metadata_len | metadata JSON | node records | u32 CRC32.
//! Frames: magic | u32 version | u32 frame_count | u32 descriptor_dim |
//! frame records | u32 CRC32.
//!
//! Record: u32 index | f64 timestamp | u8 has_pose | 3×f64 pose (iff has_pose)
//! | D×f32 descriptor | u64 obs_len | obs bytes.
//! The CRC covers every byte before the trailer.

use thiserror::Error;

use super::{Frame, MapMetadata, TopoMap, TopoNode};
use crate::geometry::{Descriptor, Pose2};

pub const MAP_MAGIC: [u8; 4] = *b"VTRM";
pub const FRAMES_MAGIC: [u8; 4] = *b"VTRF";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FormatError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload")]
    Truncated,
    #[error("{0} unexpected trailing byte(s)")]
    TrailingBytes(usize),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("invalid metadata: {0}")]
    InvalidMetadata(String),
    #[error("invalid record {index}: {reason}")]
    InvalidRecord { index: usize, reason: String },
    #[error("cannot encode: {0}")]
    Unencodable(String),
}

struct Record<'a> {
    index: u32,
    timestamp: f64,
    has_pose: u8,
    pose: [f64; 3],
    descriptor: Vec<f32>,
    observation: &'a [u8],
}

fn put_record(out: &mut Vec<u8>, index: usize, timestamp: f64, pose: Option<&Pose2>, descriptor: &Descriptor, obs: &[u8]) {
    out.extend_from_slice(&(index as u32).to_le_bytes());
    out.extend_from_slice(&timestamp.to_le_bytes());
    match pose {
        Some(p) => {
            out.push(1);
            for v in [p.x, p.y, p.psi] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        None => out.push(0),
    }
    for &v in descriptor.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.extend_from_slice(&(obs.len() as u64).to_le_bytes());
    out.extend_from_slice(obs);
}

fn finish(mut out: Vec<u8>) -> Vec<u8> {
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn check_u32(what: &str, n: usize) -> Result<u32, FormatError> {
    u32::try_from(n).map_err(|_| FormatError::Unencodable(format!("{what} {n} exceeds u32")))
}

pub fn serialize(map: &TopoMap) -> Result<Vec<u8>, FormatError> {
    let meta = serde_json::to_vec(&map.metadata)
        .map_err(|e| FormatError::Unencodable(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAP_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&check_u32("node count", map.nodes.len())?.to_le_bytes());
    out.extend_from_slice(&check_u32("descriptor dim", map.descriptor_dim)?.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    for node in &map.nodes {
        if node.descriptor.dim() != map.descriptor_dim {
            return Err(FormatError::Unencodable(format!("node {} has wrong dimension", node.index)));
        }
        put_record(&mut out, node.index, node.timestamp, node.teach_pose.as_ref(), &node.descriptor, &node.observation);
    }
    Ok(finish(out))
}

pub fn serialize_frames(frames: &[Frame]) -> Result<Vec<u8>, FormatError> {
    let dim = frames.first().map_or(0, |f| f.descriptor.dim());
    let mut out = Vec::new();
    out.extend_from_slice(&FRAMES_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&check_u32("frame count", frames.len())?.to_le_bytes());
    out.extend_from_slice(&check_u32("descriptor dim", dim)?.to_le_bytes());
    for (i, f) in frames.iter().enumerate() {
        if f.descriptor.dim() != dim {
            return Err(FormatError::Unencodable(format!("frame {i} has wrong dimension")));
        }
        put_record(&mut out, i, f.timestamp, f.teach_pose.as_ref(), &f.descriptor, &f.observation);
    }
    Ok(finish(out))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Truncated)?;
        if end > self.bytes.len() {
            return Err(FormatError::Truncated);
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn record(&mut self, dim: usize) -> Result<Record<'a>, FormatError> {
        let index = self.u32()?;
        let timestamp = self.f64()?;
        let has_pose = self.u8()?;
        let mut pose = [0.0; 3];
        if has_pose != 0 {
            for p in &mut pose {
                *p = self.f64()?;
            }
        }
        let raw = self.take(dim.checked_mul(4).ok_or(FormatError::Truncated)?)?;
        let descriptor = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let obs_len = usize::try_from(self.u64()?).map_err(|_| FormatError::Truncated)?;
        let observation = self.take(obs_len)?;
        Ok(Record { index, timestamp, has_pose, pose, descriptor, observation })
    }
}

/// Reads the header magic and version, then all records structurally,
/// then verifies the trailer CRC. Semantics are checked afterwards.
fn read_container<'a>(
    bytes: &'a [u8],
    magic: [u8; 4],
    with_metadata: bool,
) -> Result<(usize, &'a [u8], Vec<Record<'a>>), FormatError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4).map_err(|_| FormatError::BadMagic)? != magic {
        return Err(FormatError::BadMagic);
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    // Checked before any length field is trusted, so a flipped bit in a
    // length reports as corruption rather than truncation.
    let body_len = bytes.len().checked_sub(4).filter(|&n| n >= cur.pos).ok_or(FormatError::Truncated)?;
    let stored = u32::from_le_bytes(bytes[body_len..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..body_len]);
    if stored != computed {
        return Err(FormatError::ChecksumMismatch { stored, computed });
    }
    let count = cur.u32()? as usize;
    let dim = cur.u32()? as usize;
    let metadata: &[u8] = if with_metadata {
        let len = usize::try_from(cur.u64()?).map_err(|_| FormatError::Truncated)?;
        cur.take(len)?
    } else {
        &[]
    };
    let mut records = Vec::with_capacity(count.min(cur.remaining() / 21 + 1));
    for _ in 0..count {
        records.push(cur.record(dim)?);
    }
    match cur.remaining() {
        n if n < 4 => return Err(FormatError::Truncated),
        4 => {}
        n => return Err(FormatError::TrailingBytes(n - 4)),
    }
    Ok((dim, metadata, records))
}

struct Decoded {
    timestamp: f64,
    descriptor: Descriptor,
    observation: Vec<u8>,
    teach_pose: Option<Pose2>,
}

fn decode_records(dim: usize, records: Vec<Record<'_>>) -> Result<Vec<Decoded>, FormatError> {
    let mut out: Vec<Decoded> = Vec::with_capacity(records.len());
    for (i, r) in records.into_iter().enumerate() {
        let invalid = |reason: String| FormatError::InvalidRecord { index: i, reason };
        if r.index as usize != i {
            return Err(invalid(format!("stored index {}", r.index)));
        }
        if !r.timestamp.is_finite() {
            return Err(invalid("non-finite timestamp".into()));
        }
        if let Some(prev) = out.last() {
            if !(r.timestamp > prev.timestamp) {
                return Err(invalid("timestamps not strictly increasing".into()));
            }
        }
        let teach_pose = match r.has_pose {
            0 => None,
            1 => {
                let [x, y, psi] = r.pose;
                let p = Pose2 { x, y, psi };
                if !p.is_finite() {
                    return Err(invalid("non-finite pose".into()));
                }
                Some(p)
            }
            other => return Err(invalid(format!("has_pose flag {other}"))),
        };
        let values: Vec<f64> = r.descriptor.iter().map(|&v| v as f64).collect();
        debug_assert_eq!(values.len(), dim);
        let descriptor = Descriptor::from_unit(values).map_err(|e| invalid(e.to_string()))?;
        out.push(Decoded { timestamp: r.timestamp, descriptor, observation: r.observation.to_vec(), teach_pose });
    }
    Ok(out)
}

pub fn deserialize(bytes: &[u8]) -> Result<TopoMap, FormatError> {
    let (dim, metadata, records) = read_container(bytes, MAP_MAGIC, true)?;
    let metadata: MapMetadata = serde_json::from_slice(metadata)
        .map_err(|e| FormatError::InvalidMetadata(e.to_string()))?;
    let nodes: Vec<TopoNode> = decode_records(dim, records)?
        .into_iter()
        .enumerate()
        .map(|(index, d)| TopoNode {
            index,
            descriptor: d.descriptor,
            observation: d.observation,
            teach_pose: d.teach_pose,
            timestamp: d.timestamp,
        })
        .collect();
    if nodes.len() < 2 {
        return Err(FormatError::InvalidMetadata(format!("map has {} node(s)", nodes.len())));
    }
    if metadata.admissions.len() != nodes.len() {
        return Err(FormatError::InvalidMetadata("admission log does not match node count".into()));
    }
    Ok(TopoMap { nodes, descriptor_dim: dim, metadata })
}

pub fn deserialize_frames(bytes: &[u8]) -> Result<Vec<Frame>, FormatError> {
    let (dim, _, records) = read_container(bytes, FRAMES_MAGIC, false)?;
    Ok(decode_records(dim, records)?
        .into_iter()
        .map(|d| Frame {
            timestamp: d.timestamp,
            descriptor: d.descriptor,
            observation: d.observation,
            teach_pose: d.teach_pose,
        })
        .collect())
}
