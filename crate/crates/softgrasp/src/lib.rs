//! Grasp outcome prediction on deformable solids.
//!
//! The pipeline has three stages:
//!
//! 1. [`fem`] — a linear-elastic tet4 finite-element oracle that, given an
//!    object mesh and a parallel-jaw grasp, produces per-vertex von Mises
//!    stress and displacement fields over a force trajectory.
//! 2. [`net`] — a message-passing graph network trained to predict those
//!    fields in a single forward pass, with an in-crate reverse-mode tape so
//!    gradients are available with respect to both parameters and inputs.
//! 3. [`plan`] — a grasp planner that ranks candidate grasps with surrogate
//!    forward passes and refines poses by following tape gradients of a
//!    grasp-quality objective.
//!
//! Supporting modules: [`mesh`] (tetrahedral meshes, primitive generators,
//! geometry queries), [`grasp`] (gripper model, antipodal sampling, contact
//! detection), [`graph`] (mesh-to-multigraph conversion and feature
//! normalization), and [`train`] (dataset generation and the training loop).

pub mod error;
pub mod fem;
pub mod graph;
pub mod grasp;
pub mod mesh;
pub mod net;
pub mod plan;
pub mod tensor;
pub mod train;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
