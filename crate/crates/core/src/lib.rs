//! Point-cloud registration and surface-curvature toolkit.
//!
//! The crate provides:
//!
//! - [`rigid`]: rigid-motion algebra (transforms, se(3) generators, closed-form
//!   exponential updates) shared by every solver.
//! - [`quadric`]: the six-parameter normal-aligned parabolic quadric, principal
//!   curvature extraction and the iterative single-frame fit.
//! - [`surface`]: organized point sets backed by depth frames, normal
//!   estimation, radius neighbourhoods and projective data association.
//! - [`icp`]: dense point-to-plane ICP (frame-to-frame) and a multi-frame
//!   point-to-plane pose-graph refinement, used as comparison baselines.
//! - [`joint`]: joint pose + quadric optimization over two or many frames,
//!   with a pose-only variant that keeps quadrics fixed.
//! - [`schur`]: block-sparse symmetric solver using the Schur complement over
//!   block-diagonal pose and quadric blocks.
//! - [`synth`]: ray-traced synthetic depth scenes with exact ground truth and
//!   a distance-proportional Gaussian noise model.
//! - [`eval`]: trajectory and curvature metrics plus the experiment driver.
//!
//! Geometry and solver kernels are generic over the scalar type through the
//! [`Real`] trait; the pipeline (surfaces, solvers, file formats) instantiates
//! `f64`. Concrete aliases for both widths live at the crate root.

pub mod error;
pub mod eval;
pub mod icp;
pub mod joint;
pub mod quadric;
pub mod rigid;
pub mod schur;
pub mod surface;
pub mod synth;

mod damping;

pub use damping::CostStep;
pub use error::{Error, Result};
pub use icp::SolverConfig;

/// Scalar type for the geometry and solver math: `f32` or `f64`.
pub trait Real: nalgebra::RealField + num_traits::FromPrimitive + Copy {}
impl<T: nalgebra::RealField + num_traits::FromPrimitive + Copy> Real for T {}

/// Converts an `f64` literal into the working scalar type.
#[inline]
pub(crate) fn real<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("literal must be representable")
}

pub type RigidTransform32 = rigid::RigidTransform<f32>;
pub type RigidTransform64 = rigid::RigidTransform<f64>;
pub type MotionVector32 = rigid::MotionVector<f32>;
pub type MotionVector64 = rigid::MotionVector<f64>;
pub type Quadric32 = quadric::Quadric<f32>;
pub type Quadric64 = quadric::Quadric<f64>;
pub type CurvaturePair32 = quadric::CurvaturePair<f32>;
pub type CurvaturePair64 = quadric::CurvaturePair<f64>;
pub type BlockSystem32 = schur::BlockSystem<f32>;
pub type BlockSystem64 = schur::BlockSystem<f64>;
