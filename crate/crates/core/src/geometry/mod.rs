//! Pinhole cameras, pose algebra, Plücker ray maps, depth unprojection and
//! z-buffered point splatting.
//!
//! Conventions: poses are camera-to-world; pixel `(u, v)` has x to the right
//! and y down, and integer coordinates are pixel centers; the camera looks
//! along +z. The first (reference) camera of a canonical trajectory defines
//! the world frame.

mod camera;
mod plucker;
mod pose;
mod splat;

pub use camera::{
    canonicalize, project_point, project_points, unproject_depth, CameraIntrinsics, CameraTrajectory,
    PointCloud, Projection, Z_NEAR,
};
pub use plucker::{plucker_map, PluckerFrame};
pub use pose::{
    axis_angle, determinant, identity3, mat_mul, mat_t_vec, mat_vec, rotation_angle, transpose, CameraPose,
    Mat3, ROTATION_TOLERANCE,
};
pub use splat::{render_trajectory, splat_render, GuidanceFrames, SplatOutput, DEFAULT_POINT_RADIUS};

use thiserror::Error;

pub type Vec3<T> = [T; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error("extent mismatch: {0}")]
    Extent(String),
}

pub fn cross<T: crate::Scalar>(a: &Vec3<T>, b: &Vec3<T>) -> Vec3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn dot<T: crate::Scalar>(a: &Vec3<T>, b: &Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm<T: crate::Scalar>(a: &Vec3<T>) -> T {
    dot(a, a).sqrt()
}
