use std::path::Path;

use serde::Serialize;

use super::{
    box_keyframes_to_trajectory, downsampled_len, fit_boxes, label_index, overlay_boxes, project_trajectory,
    temporal_downsample, BoxSequence2D, ConditioningError, ControlSpec, EntityPrompt, ObjectMotion,
    ObjectTrajectory3D,
};
use crate::geometry::{
    canonicalize, plucker_map, render_trajectory, unproject_depth, CameraPose, CameraTrajectory, GuidanceFrames,
    PointCloud, DEFAULT_POINT_RADIUS,
};
use crate::io::{read_pfm, read_png, write_frames, IoError};
use crate::raster::{DepthMap, Image};
use crate::tensor::{encode_checkpoint, write_bytes_atomic, Tensor};

/// Points sampled per object when a spec gives box keyframes.
pub const DEFAULT_NUM_POINTS: usize = 9;

#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningOptions {
    pub stride: usize,
    pub num_points: usize,
    pub padding_px: f64,
    pub point_radius: usize,
    pub background: [f32; 3],
}

impl Default for ConditioningOptions {
    fn default() -> Self {
        Self {
            stride: 4,
            num_points: DEFAULT_NUM_POINTS,
            padding_px: 0.0,
            point_radius: DEFAULT_POINT_RADIUS,
            background: [0.0; 3],
        }
    }
}

/// Everything the model consumes for one clip, before any learned encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlPackage {
    pub width: usize,
    pub height: usize,
    pub num_frames: usize,
    pub latent_frames: usize,
    pub num_points: usize,
    pub camera: CameraTrajectory<f64>,
    /// `N × 6 × H × W`
    pub plucker: Tensor<f32>,
    /// Guidance renders with box outlines drawn in.
    pub guidance: GuidanceFrames,
    pub entities: Vec<EntityPrompt>,
    pub trajectories: Vec<ObjectTrajectory3D>,
    /// Commanded boxes for every frame.
    pub boxes: Vec<BoxSequence2D>,
    /// `M × Ñ × 3·N_p`
    pub traj_tokens: Vec<Vec<Vec<f32>>>,
}

#[derive(Serialize)]
struct PackageMeta<'a> {
    width: usize,
    height: usize,
    num_frames: usize,
    latent_frames: usize,
    num_points: usize,
    entity_indices: Vec<usize>,
    entities: &'a [EntityPrompt],
    boxes: &'a [BoxSequence2D],
    traj_tokens: &'a [Vec<Vec<f32>>],
}

impl ControlPackage {
    pub fn entity_indices(&self) -> Vec<usize> {
        self.entities.iter().map(|e| e.label_index).collect()
    }

    /// Writes `plucker.bin` (checkpoint format, one tensor), `guidance/NNN.png`
    /// and `package.json` into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<(), IoError> {
        std::fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
        let p = dir.join("plucker.bin");
        write_bytes_atomic(&p, &encode_checkpoint([("plucker", &self.plucker)])).map_err(|e| IoError::io(&p, e))?;
        write_frames(&dir.join("guidance"), &self.guidance.frames)?;
        let meta = PackageMeta {
            width: self.width,
            height: self.height,
            num_frames: self.num_frames,
            latent_frames: self.latent_frames,
            num_points: self.num_points,
            entity_indices: self.entity_indices(),
            entities: &self.entities,
            boxes: &self.boxes,
            traj_tokens: &self.traj_tokens,
        };
        let p = dir.join("package.json");
        let json = serde_json::to_string_pretty(&meta).expect("package metadata serializes");
        write_bytes_atomic(&p, json.as_bytes()).map_err(|e| IoError::io(&p, e))
    }
}

/// Per-object 3D trajectories in reference-camera coordinates, sorted by
/// object id. Box keyframes are sampled with `keyframe_points` points.
pub fn object_trajectories(
    spec: &ControlSpec,
    keyframe_points: usize,
) -> Result<Vec<ObjectTrajectory3D>, ConditioningError> {
    spec.validate()?;
    let mut objects: Vec<_> = spec.objects.iter().collect();
    objects.sort_by_key(|o| o.id);
    objects
        .into_iter()
        .map(|o| match &o.motion {
            ObjectMotion::Points(frames) => Ok(ObjectTrajectory3D {
                object_id: o.id,
                frames: frames.clone(),
            }),
            ObjectMotion::Keyframes { bbox, keyframes } => {
                box_keyframes_to_trajectory(o.id, bbox, keyframes, spec.num_frames, keyframe_points)
            }
        })
        .collect()
}

/// The 2D boxes a spec commands: its object trajectories projected through
/// its canonicalized camera path.
pub fn commanded_boxes(spec: &ControlSpec, padding_px: f64) -> Result<Vec<BoxSequence2D>, ConditioningError> {
    let k = spec.intrinsics;
    let camera = canonicalize(&CameraTrajectory::new(spec.camera.clone(), k)?)?;
    object_trajectories(spec, DEFAULT_NUM_POINTS)?
        .iter()
        .map(|t| Ok(fit_boxes(t.object_id, &project_trajectory(t, &camera)?, padding_px, k.width, k.height)))
        .collect()
}

/// Loads the spec's image and depth (relative paths resolve against
/// `base_dir`) and assembles the package.
pub fn build_control_package(
    spec: &ControlSpec,
    base_dir: &Path,
    opts: &ConditioningOptions,
) -> Result<ControlPackage, ConditioningError> {
    let image = read_png(&base_dir.join(&spec.reference_image))?;
    let depth = read_pfm(&base_dir.join(&spec.depth_map))?;
    build_control_package_from(spec, &image, &depth, opts)
}

pub fn build_control_package_from(
    spec: &ControlSpec,
    image: &Image,
    depth: &DepthMap,
    opts: &ConditioningOptions,
) -> Result<ControlPackage, ConditioningError> {
    spec.validate()?;
    let k = spec.intrinsics;
    if opts.stride == 0 {
        return Err(ConditioningError::Invalid("stride must be at least 1".into()));
    }
    let camera = canonicalize(&CameraTrajectory::new(spec.camera.clone(), k)?)?;
    let cloud: PointCloud<f64> = unproject_depth(depth, &k, &CameraPose::identity(), image)?;
    let guidance = render_trajectory(&cloud, &camera, image, opts.point_radius, opts.background)?;

    let (n, w, h) = (spec.num_frames, k.width, k.height);
    let mut plucker = Vec::with_capacity(n * 6 * w * h);
    for pose in &camera.poses {
        let rays = plucker_map(&k, pose).rays;
        for c in 0..6 {
            plucker.extend(rays.iter().map(|r| r[c] as f32));
        }
    }
    let plucker = Tensor::new(vec![n, 6, h, w], plucker).expect("plucker extents are positive");

    let trajectories = object_trajectories(spec, opts.num_points)?;
    if let Some(t) = trajectories.iter().find(|t| t.num_points() != opts.num_points) {
        return Err(ConditioningError::Invalid(format!(
            "object {}: {} points per frame, the model expects {}",
            t.object_id,
            t.num_points(),
            opts.num_points
        )));
    }
    let mut objects: Vec<_> = spec.objects.iter().collect();
    objects.sort_by_key(|o| o.id);
    let entities = objects
        .iter()
        .map(|o| EntityPrompt {
            object_id: o.id,
            label: o.label.clone(),
            label_index: label_index(&o.label).expect("validated label"),
        })
        .collect();

    let boxes = trajectories
        .iter()
        .map(|t| Ok(fit_boxes(t.object_id, &project_trajectory(t, &camera)?, opts.padding_px, w, h)))
        .collect::<Result<Vec<_>, ConditioningError>>()?;
    let guidance = overlay_boxes(&guidance, &boxes);
    let traj_tokens = trajectories
        .iter()
        .map(|t| {
            temporal_downsample(&t.frames, opts.stride)
                .iter()
                .map(|pts| pts.iter().flatten().map(|v| *v as f32).collect())
                .collect()
        })
        .collect();

    Ok(ControlPackage {
        width: w,
        height: h,
        num_frames: n,
        latent_frames: downsampled_len(n, opts.stride),
        num_points: opts.num_points,
        camera,
        plucker,
        guidance,
        entities,
        trajectories,
        boxes,
        traj_tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{Box3D, ObjectSpec};
    use crate::geometry::CameraIntrinsics;

    fn spec(objects: Vec<ObjectSpec>) -> ControlSpec {
        let n = 17;
        ControlSpec {
            reference_image: "ref.png".into(),
            depth_map: "depth.pfm".into(),
            intrinsics: CameraIntrinsics::new(64.0, 64.0, 31.5, 31.5, 64, 64).unwrap(),
            num_frames: n,
            camera: (0..n)
                .map(|j| CameraPose::from_translation([0.02 * j as f64, 0.0, 0.0]))
                .collect(),
            objects,
            caption: "test".into(),
            seed: 1,
        }
    }

    fn cube(id: u32, label: &str, x: f64) -> ObjectSpec {
        ObjectSpec {
            id,
            label: label.into(),
            motion: ObjectMotion::Keyframes {
                bbox: Box3D {
                    center: [x, 0.0, 3.0],
                    half_extents: [0.25; 3],
                },
                keyframes: vec![(1, [x, 0.0, 3.0]), (17, [x + 0.5, 0.0, 3.0])],
            },
        }
    }

    fn inputs() -> (Image, DepthMap) {
        let img = Image::from_rgb8(64, 64, &(0..64 * 64 * 3).map(|i| (i * 7 % 251) as u8).collect::<Vec<_>>());
        (img, DepthMap::new(64, 64, vec![4.0; 64 * 64]))
    }

    #[test]
    fn package_shapes() {
        let (img, depth) = inputs();
        let s = spec(vec![cube(0, "red cube", -0.5), cube(1, "green cube", 0.5)]);
        let p = build_control_package_from(&s, &img, &depth, &ConditioningOptions::default()).unwrap();
        assert_eq!(p.plucker.shape(), &[17, 6, 64, 64]);
        assert_eq!(p.guidance.frames.len(), 17);
        assert_eq!(p.latent_frames, 5);
        assert_eq!(p.traj_tokens.len(), 2);
        assert!(p.traj_tokens.iter().all(|t| t.len() == 5 && t.iter().all(|v| v.len() == 27)));
        assert_eq!(p.entity_indices(), vec![1, 2]);
        // outlines land on frame 1 as well
        assert_ne!(p.guidance.frames[0], img);

        let again = build_control_package_from(&s, &img, &depth, &ConditioningOptions::default()).unwrap();
        assert_eq!(again, p);
    }

    #[test]
    fn camera_only_package() {
        let (img, depth) = inputs();
        let p = build_control_package_from(&spec(vec![]), &img, &depth, &ConditioningOptions::default()).unwrap();
        assert!(p.traj_tokens.is_empty() && p.entities.is_empty() && p.boxes.is_empty());
        assert_eq!(p.guidance.frames[0], img);
    }

    #[test]
    fn extent_mismatch_is_rejected() {
        let (img, _) = inputs();
        let depth = DepthMap::new(32, 32, vec![1.0; 1024]);
        assert!(build_control_package_from(&spec(vec![]), &img, &depth, &ConditioningOptions::default()).is_err());
    }
}
