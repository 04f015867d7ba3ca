//! Vision-only teach-and-repeat navigation.
//!
//! A taught route is compressed into a [`topomap::TopoMap`] of keyframes.
//! During repeat, [`localization`] tracks a belief over map nodes,
//! [`relpose`] estimates the displacement to the selected subgoal, and
//! [`controller`] turns it into a bounded velocity command. [`sim`] and
//! [`perception`] provide a 2D world with synthetic appearance, [`pipeline`]
//! closes the loop, and [`eval`] scores the result.

// `!(a > b)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod controller;
pub mod eval;
pub mod geometry;
pub mod localization;
pub mod perception;
pub mod pipeline;
pub mod relpose;
pub mod sim;
pub mod topomap;

pub use geometry::{
    compose_se2, cosine_similarity, normalize_angle, relative_se2, Descriptor, GeometryError,
    Pose2, RelPose2, Transform3, Twist,
};
