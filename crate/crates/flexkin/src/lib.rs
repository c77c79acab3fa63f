//! Extrinsic-parameter-free multi-view motion reconstruction toolkit.
//!
//! The crate predicts view-invariant joint rotations and bone lengths from
//! multi-view 2D joint streams. It bundles the kinematic skeleton with its
//! overlap-joint topology, quaternion forward kinematics, pinhole camera
//! geometry with a DLT triangulation baseline, a synthetic multi-camera
//! studio, a small reverse-mode differentiation engine with the fusion /
//! encoder / discriminator network built on top, the training losses, the
//! evaluation metrics, and file-level tooling (datasets, checkpoints, BVH).

pub mod bvh;
pub mod camera;
pub mod checkpoint;
pub mod commands;
pub mod dataset;
pub mod error;
pub mod fdcheck;
pub mod kinematics;
pub mod quat;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod synth;
pub mod train;
pub mod skeleton;
pub mod tape;

pub use error::{FlexError, Result};
