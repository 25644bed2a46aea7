//! Pose refinement for objects represented as 3D Gaussian splats.
//!
//! The pipeline takes an RGB-D observation of a known object and a coarse
//! pose, corrects the depth error by ray-cast ICP against the splat centers
//! and then refines the pose by differentiable render-and-compare on SE(3),
//! first moving the camera, then the object.
//!
//! The geometric core ([`lie`], [`scene`], [`metrics`]) is generic over
//! [`Real`] (`f32` or `f64`). Rendering and optimization run in `f64`; the
//! aliases below fix that precision.

pub mod coarse;
pub mod error;
pub mod experiment;
pub mod io;
pub mod lie;
pub mod metrics;
pub mod refine;
pub mod registration;
pub mod render;
pub mod scalar;
pub mod scene;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Twist = lie::Twist<f64>;
pub type RigidTransform = lie::RigidTransform<f64>;
pub type GaussianModel = scene::GaussianModel<f64>;
pub type Aabb = scene::Aabb<f64>;

pub type Twist32 = lie::Twist<f32>;
pub type RigidTransform32 = lie::RigidTransform<f32>;
pub type GaussianModel32 = scene::GaussianModel<f32>;
