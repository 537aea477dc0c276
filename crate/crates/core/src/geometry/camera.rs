use super::{CameraPose, GeometryError, Vec3};
use crate::raster::{DepthMap, Image};
use crate::scalar::Scalar;

/// Points at or closer than this camera-frame depth are invalid.
pub const Z_NEAR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
}

impl<T: Scalar> CameraIntrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T, width: usize, height: usize) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let w = T::from_usize(self.width).unwrap();
        let h = T::from_usize(self.height).unwrap();
        let bad = |m: String| Err(GeometryError::InvalidIntrinsics(m));
        if !(self.fx > T::zero() && self.fy > T::zero()) || !self.fx.is_finite() || !self.fy.is_finite() {
            return bad(format!("focal lengths must be positive, got fx={} fy={}", self.fx, self.fy));
        }
        if self.width == 0 || self.height == 0 {
            return bad("image extents must be positive".into());
        }
        if !(self.cx >= T::zero() && self.cx < w && self.cy >= T::zero() && self.cy < h) {
            return bad(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            ));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> CameraIntrinsics<U> {
        CameraIntrinsics {
            fx: self.fx.cast(),
            fy: self.fy.cast(),
            cx: self.cx.cast(),
            cy: self.cy.cast(),
            width: self.width,
            height: self.height,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraTrajectory<T> {
    pub poses: Vec<CameraPose<T>>,
    pub intrinsics: CameraIntrinsics<T>,
}

impl<T: Scalar> CameraTrajectory<T> {
    pub fn new(poses: Vec<CameraPose<T>>, intrinsics: CameraIntrinsics<T>) -> Result<Self, GeometryError> {
        let t = Self { poses, intrinsics };
        t.validate()?;
        Ok(t)
    }

    pub fn static_identity(n: usize, intrinsics: CameraIntrinsics<T>) -> Self {
        Self {
            poses: vec![CameraPose::identity(); n],
            intrinsics,
        }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.poses.is_empty() {
            return Err(GeometryError::EmptyTrajectory);
        }
        self.intrinsics.validate()?;
        for (i, p) in self.poses.iter().enumerate() {
            p.validate()
                .map_err(|e| GeometryError::InvalidPose(format!("frame {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn is_canonical(&self) -> bool {
        self.poses.first().is_some_and(|p| p.is_identity())
    }
}

/// Re-expresses every pose relative to the first: `poses[j] ← poses[0]⁻¹ ∘ poses[j]`.
/// The first pose becomes exactly the identity.
pub fn canonicalize<T: Scalar>(traj: &CameraTrajectory<T>) -> Result<CameraTrajectory<T>, GeometryError> {
    traj.validate()?;
    let inv0 = traj.poses[0].inverse();
    let poses = traj
        .poses
        .iter()
        .enumerate()
        .map(|(j, p)| if j == 0 { CameraPose::identity() } else { inv0.compose(p) })
        .collect();
    Ok(CameraTrajectory {
        poses,
        intrinsics: traj.intrinsics,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection<T> {
    pub u: T,
    pub v: T,
    pub depth: T,
    pub valid: bool,
}

/// Projects a world point through a camera-to-world `pose`.
pub fn project_point<T: Scalar>(p: &Vec3<T>, intr: &CameraIntrinsics<T>, pose: &CameraPose<T>) -> Projection<T> {
    let c = pose.inverse_transform_point(p);
    let z = c[2];
    if !(z > T::from_f64_lossy(Z_NEAR)) || !c.iter().all(|v| v.is_finite()) {
        return Projection {
            u: T::nan(),
            v: T::nan(),
            depth: z,
            valid: false,
        };
    }
    Projection {
        u: intr.fx * c[0] / z + intr.cx,
        v: intr.fy * c[1] / z + intr.cy,
        depth: z,
        valid: true,
    }
}

pub fn project_points<T: Scalar>(
    points: &[Vec3<T>],
    intr: &CameraIntrinsics<T>,
    pose: &CameraPose<T>,
) -> Vec<Projection<T>> {
    points.iter().map(|p| project_point(p, intr, pose)).collect()
}

/// World points with per-point colors. `source_pixels` holds the flat pixel
/// index each point was unprojected from (empty for clouds built otherwise).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PointCloud<T> {
    pub points: Vec<Vec3<T>>,
    pub colors: Vec<[f32; 3]>,
    pub source_pixels: Vec<usize>,
}

impl<T: Scalar> PointCloud<T> {
    pub fn new(points: Vec<Vec3<T>>, colors: Vec<[f32; 3]>) -> Self {
        assert_eq!(points.len(), colors.len());
        Self {
            points,
            colors,
            source_pixels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Applies a rigid transform to every point.
    pub fn transformed(&self, pose: &CameraPose<T>) -> Self {
        Self {
            points: self.points.iter().map(|p| pose.transform_point(p)).collect(),
            colors: self.colors.clone(),
            source_pixels: self.source_pixels.clone(),
        }
    }

    pub fn centroid(&self) -> Option<Vec3<T>> {
        if self.points.is_empty() {
            return None;
        }
        let n = T::from_usize(self.points.len()).unwrap();
        let mut c = [T::zero(); 3];
        for p in &self.points {
            for i in 0..3 {
                c[i] += p[i];
            }
        }
        Some(c.map(|v| v / n))
    }
}

/// Lifts every valid depth pixel to a world point colored by `image`.
/// Pixels with zero or non-finite depth are skipped.
pub fn unproject_depth<T: Scalar>(
    depth: &DepthMap,
    intr: &CameraIntrinsics<T>,
    pose: &CameraPose<T>,
    image: &Image,
) -> Result<PointCloud<T>, GeometryError> {
    intr.validate()?;
    pose.validate()?;
    if depth.width != intr.width || depth.height != intr.height || image.width != intr.width || image.height != intr.height {
        return Err(GeometryError::Extent(format!(
            "depth {}x{} and image {}x{} must match intrinsics {}x{}",
            depth.width, depth.height, image.width, image.height, intr.width, intr.height
        )));
    }
    let mut cloud = PointCloud::default();
    for y in 0..depth.height {
        for x in 0..depth.width {
            if !depth.is_valid(x, y) {
                continue;
            }
            let z = T::from_f32(depth.get(x, y)).unwrap();
            let u = T::from_usize(x).unwrap();
            let v = T::from_usize(y).unwrap();
            let cam = [(u - intr.cx) * z / intr.fx, (v - intr.cy) * z / intr.fy, z];
            cloud.points.push(pose.transform_point(&cam));
            cloud.colors.push(image.get(x, y));
            cloud.source_pixels.push(y * depth.width + x);
        }
    }
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::axis_angle;

    fn intr() -> CameraIntrinsics<f64> {
        CameraIntrinsics::new(100.0, 100.0, 32.0, 32.0, 64, 64).unwrap()
    }

    #[test]
    fn canonicalize_examples() {
        let k = intr();
        let t = CameraTrajectory::new(
            vec![
                CameraPose::from_translation([1.0, 0.0, 0.0]),
                CameraPose::from_translation([2.0, 0.0, 0.0]),
            ],
            k,
        )
        .unwrap();
        let c = canonicalize(&t).unwrap();
        assert!(c.poses[0].is_identity());
        assert_eq!(c.poses[1], CameraPose::from_translation([1.0, 0.0, 0.0]));
        assert_eq!(canonicalize(&c).unwrap(), c);
    }

    #[test]
    fn canonicalize_rejects_bad_rotation() {
        let mut p = CameraPose::identity();
        p.rotation[1][1] = 2.0;
        let t = CameraTrajectory {
            poses: vec![p],
            intrinsics: intr(),
        };
        assert!(matches!(canonicalize(&t), Err(GeometryError::InvalidPose(_))));
        let empty = CameraTrajectory::<f64> {
            poses: vec![],
            intrinsics: intr(),
        };
        assert_eq!(canonicalize(&empty), Err(GeometryError::EmptyTrajectory));
    }

    #[test]
    fn projection_examples() {
        let k = intr();
        let id = CameraPose::identity();
        let p = project_point(&[0.0, 0.0, 2.0], &k, &id);
        assert_eq!((p.u, p.v, p.depth, p.valid), (32.0, 32.0, 2.0, true));
        let p = project_point(&[1.0, 0.0, 1.0], &k, &id);
        assert_eq!((p.u, p.v, p.depth), (132.0, 32.0, 1.0));
        assert!(!project_point(&[0.0, 0.0, -1.0], &k, &id).valid);
        assert!(!project_point(&[0.0, 0.0, 0.0], &k, &id).valid);
    }

    #[test]
    fn unprojection_examples() {
        let k = CameraIntrinsics::new(10.0, 10.0, 4.0, 3.0, 16, 8).unwrap();
        let mut d = vec![0.0f32; 16 * 8];
        d[3 * 16 + 4] = 2.0; // (cx, cy)
        d[3 * 16 + 14] = 1.0; // (cx + fx, cy)
        d[0] = f32::NAN;
        let depth = DepthMap::new(16, 8, d);
        let img = Image::filled(16, 8, [0.2, 0.4, 0.6]);
        let c = unproject_depth(&depth, &k, &CameraPose::identity(), &img).unwrap();
        assert_eq!(c.points, vec![[0.0, 0.0, 2.0], [1.0, 0.0, 1.0]]);
        assert_eq!(c.colors[0], [0.2, 0.4, 0.6]);
        let moved = unproject_depth(&depth, &k, &CameraPose::from_translation([0.0, 0.0, 5.0]), &img).unwrap();
        assert_eq!(moved.points[1], [1.0, 0.0, 6.0]);

        let empty = DepthMap::new(16, 8, vec![0.0; 128]);
        assert!(unproject_depth(&empty, &k, &CameraPose::identity(), &img).unwrap().is_empty());
        let wrong = DepthMap::new(8, 8, vec![1.0; 64]);
        assert!(unproject_depth(&wrong, &k, &CameraPose::identity(), &img).is_err());
    }

    #[test]
    fn rotated_reference_camera() {
        // camera rotated 90° about y: its +z axis points along world +x
        let pose = CameraPose::from_rotation(axis_angle([0.0, 1.0, 0.0], std::f64::consts::FRAC_PI_2));
        let cam = pose.inverse_transform_point(&[1.0, 0.0, 0.0]);
        assert!((cam[2] - 1.0).abs() < 1e-12 && cam[0].abs() < 1e-12);
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 3.9, 0.0, 4, 4).is_ok());
    }
}
