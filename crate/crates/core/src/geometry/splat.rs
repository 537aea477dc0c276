use super::{project_point, CameraIntrinsics, CameraPose, CameraTrajectory, GeometryError, PointCloud};
use crate::raster::{Image, Mask};
use crate::scalar::Scalar;

pub const DEFAULT_POINT_RADIUS: usize = 1;

/// Result of rendering one view. `depth` holds the winning camera-frame
/// depth (infinity where nothing landed) and `winner` the winning point index.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatOutput<T> {
    pub image: Image,
    pub mask: Mask,
    pub depth: Vec<T>,
    pub winner: Vec<Option<usize>>,
}

/// Renders `cloud` with a per-pixel z-buffer in two passes. Each point
/// first competes for the pixel its center lands on; pixels no center
/// reached are then filled from `(2r+1)²` square footprints. Centers win so
/// that rendering from the capture pose returns the captured colors, even on
/// slanted surfaces where a neighbor's footprint is nearer. Equal depths
/// keep the lower point index.
pub fn splat_render<T: Scalar>(
    cloud: &PointCloud<T>,
    intr: &CameraIntrinsics<T>,
    pose: &CameraPose<T>,
    radius: usize,
    background: [f32; 3],
) -> SplatOutput<T> {
    let (w, h) = (intr.width, intr.height);
    let mut out = SplatOutput {
        image: Image::filled(w, h, background),
        mask: Mask::new(w, h, false),
        depth: vec![T::infinity(); w * h],
        winner: vec![None; w * h],
    };
    let centers: Vec<_> = cloud.points.iter().map(|p| splat_center(p, intr, pose)).collect();
    let in_image = |x: i64, y: i64| (0..w as i64).contains(&x) && (0..h as i64).contains(&y);
    for (k, c) in centers.iter().enumerate() {
        let Some((px, py, z)) = *c else {
            continue;
        };
        if in_image(px, py) {
            let i = py as usize * w + px as usize;
            if z < out.depth[i] {
                out.depth[i] = z;
                out.winner[i] = Some(k);
            }
        }
    }
    let hit: Vec<bool> = out.winner.iter().map(Option::is_some).collect();
    let r = radius as i64;
    for (k, c) in centers.iter().enumerate() {
        let Some((px, py, z)) = *c else {
            continue;
        };
        let (x0, x1) = ((px - r).max(0), (px + r).min(w as i64 - 1));
        let (y0, y1) = ((py - r).max(0), (py + r).min(h as i64 - 1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let i = y as usize * w + x as usize;
                if !hit[i] && z < out.depth[i] {
                    out.depth[i] = z;
                    out.winner[i] = Some(k);
                }
            }
        }
    }
    for (i, win) in out.winner.iter().enumerate() {
        if let Some(k) = win {
            out.mask.data[i] = true;
            out.image.data[i * 3..i * 3 + 3].copy_from_slice(&cloud.colors[*k]);
        }
    }
    out
}

/// Rounded pixel and depth of a point's footprint center, or `None` when the
/// point is behind the near plane or too far off-image to be representable.
pub(crate) fn splat_center<T: Scalar>(
    p: &[T; 3],
    intr: &CameraIntrinsics<T>,
    pose: &CameraPose<T>,
) -> Option<(i64, i64, T)> {
    let pr = project_point(p, intr, pose);
    if !pr.valid {
        return None;
    }
    let (u, v) = (pr.u.round().to_f64()?, pr.v.round().to_f64()?);
    let limit = 1e9;
    if !(u.abs() < limit && v.abs() < limit) {
        return None;
    }
    Some((u as i64, v as i64, pr.depth))
}

/// Frame 0 is the reference image itself; later frames are splats of the
/// cloud from each trajectory pose.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceFrames {
    pub frames: Vec<Image>,
    pub masks: Vec<Mask>,
}

pub fn render_trajectory<T: Scalar>(
    cloud: &PointCloud<T>,
    traj: &CameraTrajectory<T>,
    reference: &Image,
    radius: usize,
    background: [f32; 3],
) -> Result<GuidanceFrames, GeometryError> {
    traj.validate()?;
    let intr = &traj.intrinsics;
    if reference.width != intr.width || reference.height != intr.height {
        return Err(GeometryError::Extent(format!(
            "reference image {}x{} does not match intrinsics {}x{}",
            reference.width, reference.height, intr.width, intr.height
        )));
    }
    let mut frames = vec![reference.clone()];
    let mut masks = vec![Mask::new(intr.width, intr.height, true)];
    for pose in &traj.poses[1..] {
        let s = splat_render(cloud, intr, pose, radius, background);
        frames.push(s.image);
        masks.push(s.mask);
    }
    Ok(GuidanceFrames { frames, masks })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intr() -> CameraIntrinsics<f64> {
        CameraIntrinsics::new(10.0, 10.0, 4.0, 4.0, 9, 9).unwrap()
    }

    #[test]
    fn empty_cloud_is_background() {
        let s = splat_render(&PointCloud::<f64>::default(), &intr(), &CameraPose::identity(), 1, [0.1, 0.2, 0.3]);
        assert_eq!(s.image, Image::filled(9, 9, [0.1, 0.2, 0.3]));
        assert_eq!(s.mask.count(), 0);
    }

    #[test]
    fn single_point_lands_on_principal_pixel() {
        let cloud = PointCloud::new(vec![[0.0, 0.0, 1.0]], vec![[1.0, 0.0, 0.0]]);
        let s = splat_render(&cloud, &intr(), &CameraPose::identity(), 0, [0.0; 3]);
        assert_eq!(s.image.get(4, 4), [1.0, 0.0, 0.0]);
        assert_eq!(s.mask.count(), 1);
        let s = splat_render(&cloud, &intr(), &CameraPose::identity(), 1, [0.0; 3]);
        assert_eq!(s.mask.count(), 9);
    }

    #[test]
    fn nearer_point_wins() {
        let cloud = PointCloud::new(
            vec![[0.0, 0.0, 2.0], [0.0, 0.0, 1.0], [0.0, 0.0, 1.0]],
            vec![[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        );
        let s = splat_render(&cloud, &intr(), &CameraPose::identity(), 0, [0.0; 3]);
        assert_eq!(s.image.get(4, 4), [1.0, 0.0, 0.0]);
        assert_eq!(s.winner[4 * 9 + 4], Some(1));
    }

    #[test]
    fn trajectory_frame_zero_is_reference() {
        let k = intr();
        let reference = Image::filled(9, 9, [0.5, 0.5, 0.5]);
        let traj = CameraTrajectory::static_identity(1, k);
        let g = render_trajectory(&PointCloud::default(), &traj, &reference, 1, [0.0; 3]).unwrap();
        assert_eq!(g.frames, vec![reference.clone()]);
        let small = Image::new(4, 4);
        assert!(render_trajectory(&PointCloud::default(), &traj, &small, 1, [0.0; 3]).is_err());
    }
}
