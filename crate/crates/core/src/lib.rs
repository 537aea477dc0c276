//! Building blocks for joint camera and object motion control of
//! image-to-video generation at desk scale.
//!
//! * [`tensor`]: dense tensors with reverse-mode differentiation.
//! * [`geometry`]: pinhole cameras, pose algebra, Plücker rays, depth
//!   unprojection and z-buffered point splatting.

pub mod conditioning;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod raster;
pub mod scalar;
pub mod synth;
pub mod tensor;

pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f32>;
pub type Graph = tensor::Graph<f32>;
pub type ParamStore = tensor::ParamStore<f32>;

pub type CameraPose = geometry::CameraPose<f64>;
pub type CameraIntrinsics = geometry::CameraIntrinsics<f64>;
pub type CameraTrajectory = geometry::CameraTrajectory<f64>;
pub type PointCloud = geometry::PointCloud<f64>;
