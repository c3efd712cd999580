//! Object-centric 3D semantic occupancy from sparse semantic Gaussians.
//!
//! The crate covers the full per-frame pipeline: Gaussian-to-voxel
//! splatting, sparse self-encoding, deformable image cross-attention,
//! temporal self-attention over ego-aligned history, and residual property
//! refinement. The [`verification`] module holds the brute-force references,
//! finite-difference gradient checks and occupancy metrics used to test it.

pub mod attention;
pub mod error;
pub mod gaussian;
pub mod geometry;
pub mod harness;
pub mod io;
pub mod nn;
pub mod refinement;
pub mod splatter;
pub mod temporal;
pub mod tensor;
pub mod verification;

pub use error::{Error, Result};
pub use gaussian::{
    classify, compose_covariance, eval_gaussian, eval_mixture, grad_eval_gaussian, GaussianSet, Label, SemanticGaussian,
};
pub use geometry::{CameraModel, Intrinsics, Projection, RigidPose, UnitQuaternion};
pub use splatter::{LabelGrid, SemanticVoxelGrid, SparseFeatureGrid, VoxelGridSpec};
pub use tensor::{FeatureMap, QueryMatrix};

pub use nalgebra::Vector3;
