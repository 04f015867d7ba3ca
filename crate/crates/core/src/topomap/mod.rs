//! Sparse topological route maps built from a teach-phase frame stream.

mod format;
mod selector;

pub use format::{
    deserialize, deserialize_frames, serialize, serialize_frames, FormatError, FRAMES_MAGIC,
    FORMAT_VERSION, MAP_MAGIC,
};
pub use selector::{
    Admission, AdmissionRule, Decision, FixedIntervalSelector, KeyframePolicy, KeyframeSelector,
    SelectorConfig, TIME_EPSILON,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Descriptor, Pose2};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MapError {
    #[error("empty teach demonstration")]
    EmptyDemonstration,
    #[error("route too short: {0} keyframe(s)")]
    RouteTooShort(usize),
    #[error("out-of-order timestamp: {current} after {previous}")]
    OutOfOrder { previous: f64, current: f64 },
    #[error("descriptor dimension {found} does not match stream dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid selector config: {0}")]
    InvalidConfig(String),
    #[error("node index {0} out of range")]
    NodeOutOfRange(usize),
}

/// One teach-phase camera frame with its embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub timestamp: f64,
    pub descriptor: Descriptor,
    /// Opaque observation payload (encoded image, or a simulator token).
    pub observation: Vec<u8>,
    /// Ground-truth pose, present only in simulated or logged teach runs.
    pub teach_pose: Option<Pose2>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopoNode {
    pub index: usize,
    pub descriptor: Descriptor,
    pub observation: Vec<u8>,
    pub teach_pose: Option<Pose2>,
    pub timestamp: f64,
}

/// How a keyframe policy was configured when the map was built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SelectorSnapshot {
    Adaptive(SelectorConfig),
    FixedInterval { interval: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapMetadata {
    pub selector: SelectorSnapshot,
    pub source_frames: u64,
    /// Unix seconds, supplied by the caller so builds stay reproducible.
    pub created_unix: Option<u64>,
    /// One entry per node, in node order.
    pub admissions: Vec<Admission>,
    /// Original indices removed by manual filtering, in removal order.
    #[serde(default)]
    pub deleted: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopoMap {
    pub nodes: Vec<TopoNode>,
    pub descriptor_dim: usize,
    pub metadata: MapMetadata,
}

impl TopoMap {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Manual keyframe filtering: drops the given node indices and re-indexes.
    /// The map must keep at least two nodes.
    pub fn delete_nodes(&mut self, indices: &[usize]) -> Result<(), MapError> {
        let mut doomed: Vec<usize> = indices.to_vec();
        doomed.sort_unstable();
        doomed.dedup();
        if let Some(&bad) = doomed.iter().find(|&&i| i >= self.nodes.len()) {
            return Err(MapError::NodeOutOfRange(bad));
        }
        let remaining = self.nodes.len() - doomed.len();
        if remaining < 2 {
            return Err(MapError::RouteTooShort(remaining));
        }
        let mut keep = vec![true; self.nodes.len()];
        for &i in &doomed {
            keep[i] = false;
        }
        let mut it = keep.iter();
        self.nodes.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.metadata.admissions.retain(|_| *it.next().unwrap());
        for (i, node) in self.nodes.iter_mut().enumerate() {
            node.index = i;
        }
        self.metadata.deleted.extend(doomed);
        Ok(())
    }

    /// Ground-truth node positions, when every node carries one.
    pub fn teach_poses(&self) -> Option<Vec<Pose2>> {
        self.nodes.iter().map(|n| n.teach_pose).collect()
    }
}

/// Runs the adaptive selector over `frames`.
pub fn build_map<I>(frames: I, config: &SelectorConfig) -> Result<TopoMap, MapError>
where
    I: IntoIterator<Item = Frame>,
{
    let selector = KeyframeSelector::new(config.clone())?;
    build_map_with(frames, selector)
}

/// Runs any keyframe policy over `frames`, keeping the `Add` decisions in order.
pub fn build_map_with<I, P>(frames: I, mut policy: P) -> Result<TopoMap, MapError>
where
    I: IntoIterator<Item = Frame>,
    P: KeyframePolicy,
{
    let mut nodes = Vec::new();
    let mut admissions = Vec::new();
    let mut count = 0u64;
    let mut dim = None;
    for frame in frames {
        count += 1;
        let d = frame.descriptor.dim();
        match dim {
            None => dim = Some(d),
            Some(expected) if expected != d => {
                return Err(MapError::DimensionMismatch { expected, found: d })
            }
            _ => {}
        }
        if let Decision::Add(admission) = policy.consider(&frame)? {
            nodes.push(TopoNode {
                index: nodes.len(),
                descriptor: frame.descriptor,
                observation: frame.observation,
                teach_pose: frame.teach_pose,
                timestamp: frame.timestamp,
            });
            admissions.push(admission);
        }
    }
    let Some(descriptor_dim) = dim else {
        return Err(MapError::EmptyDemonstration);
    };
    if nodes.len() < 2 {
        return Err(MapError::RouteTooShort(nodes.len()));
    }
    Ok(TopoMap {
        nodes,
        descriptor_dim,
        metadata: MapMetadata {
            selector: policy.snapshot(),
            source_frames: count,
            created_unix: None,
            admissions,
            deleted: Vec::new(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(dim: usize, axis: usize) -> Descriptor {
        let mut v = vec![0.0; dim];
        v[axis % dim] = 1.0;
        Descriptor::new(v).unwrap()
    }

    fn identical_stream(seconds: f64, rate: f64) -> Vec<Frame> {
        let n = (seconds * rate).round() as usize;
        (0..n)
            .map(|k| Frame {
                timestamp: k as f64 / rate,
                descriptor: unit(8, 0),
                observation: vec![],
                teach_pose: None,
            })
            .collect()
    }

    #[test]
    fn empty_stream_errors() {
        let err = build_map(Vec::<Frame>::new(), &SelectorConfig::default()).unwrap_err();
        assert_eq!(err, MapError::EmptyDemonstration);
        assert_eq!(err.to_string(), "empty teach demonstration");
    }

    #[test]
    fn single_frame_is_too_short() {
        let err = build_map(identical_stream(0.2, 5.0), &SelectorConfig::default()).unwrap_err();
        assert_eq!(err, MapError::RouteTooShort(1));
        assert!(err.to_string().starts_with("route too short"));
    }

    #[test]
    fn identical_frames_five_minutes_give_hundred_nodes() {
        let frames = identical_stream(300.0, 5.0);
        assert_eq!(frames.len(), 1500);
        let map = build_map(frames, &SelectorConfig::default()).unwrap();
        assert_eq!(map.len(), 100);
        assert_eq!(map.metadata.source_frames, 1500);
        for (i, n) in map.nodes.iter().enumerate() {
            assert_eq!(n.index, i);
            assert!((n.timestamp - 3.0 * i as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn mixed_dimensions_rejected() {
        let frames = vec![
            Frame { timestamp: 0.0, descriptor: unit(8, 0), observation: vec![], teach_pose: None },
            Frame { timestamp: 1.0, descriptor: unit(4, 0), observation: vec![], teach_pose: None },
        ];
        assert_eq!(
            build_map(frames, &SelectorConfig::default()).unwrap_err(),
            MapError::DimensionMismatch { expected: 8, found: 4 }
        );
    }

    #[test]
    fn delete_nodes_reindexes() {
        let mut map = build_map(identical_stream(30.0, 5.0), &SelectorConfig::default()).unwrap();
        assert_eq!(map.len(), 10);
        let stamps: Vec<f64> = map.nodes.iter().map(|n| n.timestamp).collect();
        map.delete_nodes(&[7, 3]).unwrap();
        assert_eq!(map.len(), 8);
        assert_eq!(map.metadata.admissions.len(), 8);
        assert_eq!(map.metadata.deleted, vec![3, 7]);
        for (i, n) in map.nodes.iter().enumerate() {
            assert_eq!(n.index, i);
        }
        assert_eq!(map.nodes[3].timestamp, stamps[4]);
        assert_eq!(map.delete_nodes(&[99]), Err(MapError::NodeOutOfRange(99)));
        let all: Vec<usize> = (0..7).collect();
        assert_eq!(map.delete_nodes(&all), Err(MapError::RouteTooShort(1)));
    }
}
