//! Gripper-agnostic grasping toolkit.
//!
//! `anygrip` implements a desk-scale pipeline for transferring grasping
//! behaviour across dexterous grippers. The state a policy sees is built
//! from semantic keypoints (fingertip, middle phalanx, palm root) and a
//! sampled Interaction Bisector Surface (IBS) between the gripper and the
//! scene; the action is a set of keypoint displacements plus a global
//! pose change. A gripper-specific adaptation model translates keypoint
//! displacements into joint changes, with optimization-based solvers as
//! baselines.
//!
//! The crate is organised as a library with a thin `anygrip` CLI binary
//! on top. The `examples/` directory contains one runnable example per
//! major capability; start with `fk_basics` and `ibs_cloud`.
//!
//! Modules:
//! - [`model`] — gripper description, forward kinematics, analytic Jacobians
//! - [`geom`] — meshes, BVH queries, convex hulls, point clouds, depth culling
//! - [`ibs`] — interaction bisector surface sampling and featurization
//! - [`nn`] — minimal reverse-mode autodiff with MLP / point-set / attention blocks
//! - [`policy`] — the finger-wise transformer policy network
//! - [`adapt`] — learned adaptation model and OB-IK(/+SC) baselines
//! - [`retarget`] — joint-matching / keypoint-matching transfer baselines
//! - [`metrics`] — contact detection, generalized Q1, collision statistics
//! - [`harness`] — configuration, result emission, benchmarks, CLI plumbing
//! - [`fixtures`] — synthetic test hands and scenes

pub mod adapt;
pub mod fixtures;
pub mod geom;
pub mod harness;
pub mod ibs;
pub mod math;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod policy;
pub mod retarget;

use thiserror::Error;

/// Crate-wide error type.
///
/// The CLI maps these to exit codes: configuration and input problems
/// ([`Error::Spec`], [`Error::Parse`], [`Error::Io`], [`Error::Mismatch`],
/// [`Error::Config`]) exit with 2, numeric and geometric failures
/// ([`Error::Numeric`], [`Error::Geometry`]) with 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("spec error: {0}")]
    Spec(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("dimension mismatch: {0}")]
    Mismatch(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Toolkit version embedded in every emitted result.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
