//! Turns motion specifications into model conditioning: reference-frame
//! object trajectories, projected 2D boxes, box overlays on guidance frames,
//! temporal downsampling and the serialized control spec.

mod package;
mod spec;

pub use package::{
    build_control_package, build_control_package_from, commanded_boxes, object_trajectories, ConditioningOptions,
    ControlPackage, DEFAULT_NUM_POINTS,
};
pub(crate) use spec::{IntrinsicsJson, PoseJson};
pub use spec::{
    parse_spec, read_spec, spec_to_json, write_spec, ControlSpec, ObjectMotion, ObjectSpec, SpecError, SPEC_VERSION,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project_points, CameraPose, CameraTrajectory, GeometryError, GuidanceFrames, Projection, Vec3};
use crate::io::IoError;

/// Fixed label vocabulary standing in for a text encoder.
pub const VOCABULARY: &[&str] = &[
    "object",
    "red cube",
    "green cube",
    "blue cube",
    "yellow cube",
    "cube",
    "box",
    "ball",
    "car",
    "person",
    "animal",
    "toy",
];

pub fn label_index(label: &str) -> Option<usize> {
    VOCABULARY.iter().position(|v| *v == label)
}

/// Word vocabulary for captions; index 0 is the unknown-word token.
pub const CAPTION_WORDS: &[&str] = &[
    "<unk>", "a", "the", "and", "while", "camera", "is", "static", "red", "green", "blue", "yellow", "cube",
    "moves", "left", "right", "up", "down", "closer", "away", "in", "circle", "wanders", "stays", "still",
    "pans", "dollies", "out", "orbits", "drifts",
];

/// Lower-cased whitespace tokens mapped into [`CAPTION_WORDS`]. Never empty.
pub fn caption_tokens(caption: &str) -> Vec<usize> {
    let toks: Vec<usize> = caption
        .split(|c: char| !c.is_alphanumeric() && c != '<' && c != '>')
        .filter(|w| !w.is_empty())
        .map(|w| {
            let w = w.to_lowercase();
            CAPTION_WORDS.iter().position(|v| *v == w).unwrap_or(0)
        })
        .collect();
    if toks.is_empty() {
        vec![0]
    } else {
        toks
    }
}

/// Outline colors by object id. Chosen away from the synthetic object colors.
pub const OVERLAY_PALETTE: [[f32; 3]; 4] = [[1.0, 1.0, 1.0], [1.0, 0.5, 0.0], [0.5, 0.0, 1.0], [0.0, 0.5, 0.5]];

pub const OUTLINE_WIDTH: i64 = 2;

pub fn overlay_color(object_id: u32) -> [f32; 3] {
    OVERLAY_PALETTE[object_id as usize % OVERLAY_PALETTE.len()]
}

#[derive(Debug, Error)]
pub enum ConditioningError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityPrompt {
    pub object_id: u32,
    pub label: String,
    pub label_index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: Vec3<f64>,
    pub half_extents: Vec3<f64>,
}

impl Box3D {
    pub fn validate(&self) -> Result<(), ConditioningError> {
        if self.center.iter().chain(&self.half_extents).any(|v| !v.is_finite()) {
            return Err(ConditioningError::Invalid("box has non-finite values".into()));
        }
        if self.half_extents.iter().any(|h| *h <= 0.0) {
            return Err(ConditioningError::Invalid(format!(
                "degenerate box: half extents {:?} must be positive",
                self.half_extents
            )));
        }
        Ok(())
    }

    pub fn corners(&self) -> [Vec3<f64>; 8] {
        let (c, h) = (self.center, self.half_extents);
        let mut out = [[0.0; 3]; 8];
        for (i, o) in out.iter_mut().enumerate() {
            let s = |bit: usize| if i >> bit & 1 == 0 { -1.0 } else { 1.0 };
            *o = [c[0] + s(2) * h[0], c[1] + s(1) * h[1], c[2] + s(0) * h[2]];
        }
        out
    }

    pub fn contains(&self, p: &Vec3<f64>, tol: f64) -> bool {
        (0..3).all(|i| (p[i] - self.center[i]).abs() <= self.half_extents[i] + tol)
    }
}

/// Per-object point paths in reference-camera coordinates, `N × N_p`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectTrajectory3D {
    pub object_id: u32,
    pub frames: Vec<Vec<Vec3<f64>>>,
}

impl ObjectTrajectory3D {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn num_points(&self) -> usize {
        self.frames.first().map_or(0, |f| f.len())
    }

    pub fn validate(&self) -> Result<(), ConditioningError> {
        let np = self.num_points();
        if self.frames.is_empty() || np == 0 {
            return Err(ConditioningError::Invalid(format!("object {}: empty trajectory", self.object_id)));
        }
        for (j, f) in self.frames.iter().enumerate() {
            if f.len() != np {
                return Err(ConditioningError::Invalid(format!(
                    "object {}: frame {} has {} points, expected {np}",
                    self.object_id,
                    j + 1,
                    f.len()
                )));
            }
            if f.iter().flatten().any(|v| !v.is_finite()) {
                return Err(ConditioningError::Invalid(format!(
                    "object {}: non-finite point in frame {}",
                    self.object_id,
                    j + 1
                )));
            }
        }
        Ok(())
    }
}

/// Axis-aligned box in continuous pixel coordinates (pixel centers at integers).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl PixelBox {
    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    pub fn intersection(&self, o: &Self) -> f64 {
        let w = self.x1.min(o.x1) - self.x0.max(o.x0);
        let h = self.y1.min(o.y1) - self.y0.max(o.y0);
        w.max(0.0) * h.max(0.0)
    }

    pub fn iou(&self, o: &Self) -> f64 {
        let inter = self.intersection(o);
        let union = self.area() + o.area() - inter;
        if union <= 0.0 {
            return if self == o { 1.0 } else { 0.0 };
        }
        inter / union
    }

    /// Inclusive range of pixel columns and rows whose centers fall inside,
    /// or `None` when no pixel center is covered.
    pub fn pixel_span(&self) -> Option<(i64, i64, i64, i64)> {
        let (x0, x1) = (self.x0.ceil() as i64, self.x1.floor() as i64);
        let (y0, y1) = (self.y0.ceil() as i64, self.y1.floor() as i64);
        (x0 <= x1 && y0 <= y1).then_some((x0, y0, x1, y1))
    }

    /// The box covering exactly the pixels whose centers lie inside `self`.
    pub fn snapped(&self) -> Self {
        match self.pixel_span() {
            Some((x0, y0, x1, y1)) => Self {
                x0: x0 as f64 - 0.5,
                y0: y0 as f64 - 0.5,
                x1: x1 as f64 + 0.5,
                y1: y1 as f64 + 0.5,
            },
            None => *self,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxSequence2D {
    pub object_id: u32,
    /// `None` marks an invisible frame.
    pub boxes: Vec<Option<PixelBox>>,
}

impl BoxSequence2D {
    pub fn visible(&self) -> Vec<bool> {
        self.boxes.iter().map(Option::is_some).collect()
    }
}

/// Maps world-frame point paths into the frame of `reference_pose`.
pub fn transform_to_reference(
    object_id: u32,
    points_world: &[Vec<Vec3<f64>>],
    reference_pose: &CameraPose<f64>,
) -> Result<ObjectTrajectory3D, ConditioningError> {
    reference_pose.validate()?;
    let traj = ObjectTrajectory3D {
        object_id,
        frames: points_world
            .iter()
            .map(|f| f.iter().map(|p| reference_pose.inverse_transform_point(p)).collect())
            .collect(),
    };
    traj.validate()?;
    Ok(traj)
}

fn radical_inverse(mut k: u64, base: u64) -> f64 {
    let (mut inv, mut f) = (0.0, 1.0 / base as f64);
    while k > 0 {
        inv += (k % base) as f64 * f;
        k /= base;
        f /= base as f64;
    }
    inv
}

/// Center, then the 8 corners, then Halton interior points, truncated to `n`.
pub fn sample_object_points(b: &Box3D, n: usize) -> Result<Vec<Vec3<f64>>, ConditioningError> {
    b.validate()?;
    if n == 0 {
        return Err(ConditioningError::Invalid("at least one point per object is required".into()));
    }
    let mut pts = vec![b.center];
    pts.extend(b.corners());
    let mut k = 1;
    while pts.len() < n {
        let u = [radical_inverse(k, 2), radical_inverse(k, 3), radical_inverse(k, 5)];
        pts.push(std::array::from_fn(|i| b.center[i] + (2.0 * u[i] - 1.0) * b.half_extents[i]));
        k += 1;
    }
    pts.truncate(n);
    Ok(pts)
}

/// Piecewise-linear box-center path through 1-based `keyframes`; points keep
/// their offsets from the box center. The last keyframe is held to frame `n`.
pub fn box_keyframes_to_trajectory(
    object_id: u32,
    b: &Box3D,
    keyframes: &[(usize, Vec3<f64>)],
    n: usize,
    num_points: usize,
) -> Result<ObjectTrajectory3D, ConditioningError> {
    let bad = |m: String| Err(ConditioningError::Invalid(format!("object {object_id}: {m}")));
    if keyframes.is_empty() {
        return bad("no keyframes".into());
    }
    if keyframes[0].0 != 1 {
        return bad(format!("first keyframe must be at frame 1, found {}", keyframes[0].0));
    }
    for w in keyframes.windows(2) {
        if w[1].0 <= w[0].0 {
            return bad(format!("keyframes must be strictly increasing ({} then {})", w[0].0, w[1].0));
        }
    }
    if let Some(k) = keyframes.iter().find(|k| k.0 > n) {
        return bad(format!("keyframe at frame {} beyond clip length {n}", k.0));
    }
    let offsets: Vec<Vec3<f64>> = sample_object_points(b, num_points)?
        .iter()
        .map(|p| std::array::from_fn(|i| p[i] - b.center[i]))
        .collect();
    let frames = (1..=n)
        .map(|j| {
            let c = interpolate_keyframes(keyframes, j);
            offsets.iter().map(|o| std::array::from_fn(|i| c[i] + o[i])).collect()
        })
        .collect();
    let traj = ObjectTrajectory3D { object_id, frames };
    traj.validate()?;
    Ok(traj)
}

fn interpolate_keyframes(keys: &[(usize, Vec3<f64>)], frame: usize) -> Vec3<f64> {
    let seg = keys.windows(2).find(|w| frame >= w[0].0 && frame <= w[1].0);
    match seg {
        Some(w) => {
            let a = (frame - w[0].0) as f64 / (w[1].0 - w[0].0) as f64;
            std::array::from_fn(|i| w[0].1[i] + a * (w[1].1[i] - w[0].1[i]))
        }
        None => keys.last().unwrap().1,
    }
}

/// Projects every frame's points with that frame's camera pose.
pub fn project_trajectory(
    traj: &ObjectTrajectory3D,
    cameras: &CameraTrajectory<f64>,
) -> Result<Vec<Vec<Projection<f64>>>, ConditioningError> {
    if traj.num_frames() != cameras.len() {
        return Err(ConditioningError::Invalid(format!(
            "object {} has {} frames but the camera trajectory has {}",
            traj.object_id,
            traj.num_frames(),
            cameras.len()
        )));
    }
    Ok(traj
        .frames
        .iter()
        .zip(&cameras.poses)
        .map(|(pts, pose)| project_points(pts, &cameras.intrinsics, pose))
        .collect())
}

/// Per frame: min/max over valid points, padded and clamped to the image
/// `[-0.5, extent - 0.5]`. Fewer than two valid points, or a box entirely
/// outside the image, makes the frame invisible.
pub fn fit_boxes(
    object_id: u32,
    points2d: &[Vec<Projection<f64>>],
    padding: f64,
    width: usize,
    height: usize,
) -> BoxSequence2D {
    let (wmax, hmax) = (width as f64 - 0.5, height as f64 - 0.5);
    let boxes = points2d
        .iter()
        .map(|frame| {
            let valid: Vec<_> = frame.iter().filter(|p| p.valid).collect();
            if valid.len() < 2 {
                return None;
            }
            let fold = |f: fn(f64, f64) -> f64, init: f64, g: fn(&Projection<f64>) -> f64| {
                valid.iter().map(|p| g(p)).fold(init, f)
            };
            let x0 = fold(f64::min, f64::INFINITY, |p| p.u) - padding;
            let x1 = fold(f64::max, f64::NEG_INFINITY, |p| p.u) + padding;
            let y0 = fold(f64::min, f64::INFINITY, |p| p.v) - padding;
            let y1 = fold(f64::max, f64::NEG_INFINITY, |p| p.v) + padding;
            if x1 < -0.5 || y1 < -0.5 || x0 > wmax || y0 > hmax {
                return None;
            }
            Some(PixelBox {
                x0: x0.clamp(-0.5, wmax),
                y0: y0.clamp(-0.5, hmax),
                x1: x1.clamp(-0.5, wmax),
                y1: y1.clamp(-0.5, hmax),
            })
        })
        .collect();
    BoxSequence2D { object_id, boxes }
}

/// Draws 2-pixel outlines over the pixels covered by each visible box, in
/// ascending object-id order so later ids end up on top.
pub fn overlay_boxes(guidance: &GuidanceFrames, seqs: &[BoxSequence2D]) -> GuidanceFrames {
    let mut out = guidance.clone();
    let mut order: Vec<&BoxSequence2D> = seqs.iter().collect();
    order.sort_by_key(|s| s.object_id);
    for seq in order {
        let color = overlay_color(seq.object_id);
        for (frame, b) in out.frames.iter_mut().zip(&seq.boxes) {
            let Some((x0, y0, x1, y1)) = b.and_then(|b| b.pixel_span()) else {
                continue;
            };
            let (w, h) = (frame.width as i64, frame.height as i64);
            for y in y0.max(0)..=y1.min(h - 1) {
                for x in x0.max(0)..=x1.min(w - 1) {
                    let edge = x < x0 + OUTLINE_WIDTH
                        || x > x1 - OUTLINE_WIDTH
                        || y < y0 + OUTLINE_WIDTH
                        || y > y1 - OUTLINE_WIDTH;
                    if edge {
                        frame.set(x as usize, y as usize, color);
                    }
                }
            }
        }
    }
    out
}

/// Keeps frames `1, 1+s, 1+2s, …` (1-based); `Ñ = ⌊(N−1)/s⌋ + 1`.
pub fn temporal_downsample<T: Clone>(frames: &[T], stride: usize) -> Vec<T> {
    assert!(stride >= 1, "stride must be at least 1");
    frames.iter().step_by(stride).cloned().collect()
}

pub fn downsampled_len(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{axis_angle, CameraIntrinsics};
    use crate::raster::{Image, Mask};

    fn proj(u: f64, v: f64) -> Projection<f64> {
        Projection {
            u,
            v,
            depth: 1.0,
            valid: true,
        }
    }

    #[test]
    fn reference_transform_examples() {
        let pts = vec![vec![[0.0, 0.0, 5.0]]];
        let t = transform_to_reference(0, &pts, &CameraPose::identity()).unwrap();
        assert_eq!(t.frames, pts);
        let t = transform_to_reference(0, &pts, &CameraPose::from_translation([0.0, 0.0, 5.0])).unwrap();
        assert_eq!(t.frames[0][0], [0.0, 0.0, 0.0]);
        // a camera yawed +90° about y looks along world +x; world +x is straight ahead
        let yaw = CameraPose::from_rotation(axis_angle([0.0, 1.0, 0.0], std::f64::consts::FRAC_PI_2));
        let t = transform_to_reference(0, &[vec![[1.0, 0.0, 0.0]]], &yaw).unwrap();
        let p = t.frames[0][0];
        assert!(p[0].abs() < 1e-12 && p[1].abs() < 1e-12 && (p[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn point_sampling_examples() {
        let unit = Box3D {
            center: [0.0; 3],
            half_extents: [0.5; 3],
        };
        assert_eq!(sample_object_points(&unit, 1).unwrap(), vec![[0.0; 3]]);
        let nine = sample_object_points(&unit, 9).unwrap();
        assert!(nine[1..].iter().all(|p| p.iter().all(|v| v.abs() == 0.5)));
        let mut uniq = nine.clone();
        uniq.sort_by(|a, b| a.partial_cmp(b).unwrap());
        uniq.dedup();
        assert_eq!(uniq.len(), 9);

        let sixteen = sample_object_points(&unit, 16).unwrap();
        assert!(sixteen.iter().all(|p| unit.contains(p, 0.0)));
        let mut uniq = sixteen.clone();
        uniq.sort_by(|a, b| a.partial_cmp(b).unwrap());
        uniq.dedup();
        assert_eq!(uniq.len(), 16);

        let flat = Box3D {
            center: [0.0; 3],
            half_extents: [0.5, 0.0, 0.5],
        };
        assert!(sample_object_points(&flat, 4).is_err());
    }

    #[test]
    fn keyframe_interpolation() {
        let b = Box3D {
            center: [0.0, 0.0, 2.0],
            half_extents: [0.1; 3],
        };
        let t = box_keyframes_to_trajectory(0, &b, &[(1, [0.0, 0.0, 2.0])], 5, 9).unwrap();
        assert!(t.frames.iter().all(|f| f == &t.frames[0]));

        let t = box_keyframes_to_trajectory(0, &b, &[(1, [0.0, 0.0, 2.0]), (5, [1.0, 0.0, 2.0])], 5, 1).unwrap();
        let xs: Vec<f64> = t.frames.iter().map(|f| f[0][0]).collect();
        assert_eq!(xs, vec![0.0, 0.25, 0.5, 0.75, 1.0]);

        let keys = [(1, [0.0, 0.0, 2.0]), (3, [2.0, 0.0, 2.0]), (7, [2.0, 4.0, 2.0])];
        let t = box_keyframes_to_trajectory(0, &b, &keys, 8, 1).unwrap();
        assert_eq!(t.frames[1][0], [1.0, 0.0, 2.0]);
        assert_eq!(t.frames[4][0], [2.0, 2.0, 2.0]);
        assert_eq!(t.frames[7][0], [2.0, 4.0, 2.0]);

        assert!(box_keyframes_to_trajectory(0, &b, &[(1, [0.0; 3]), (1, [1.0; 3])], 5, 1).is_err());
        assert!(box_keyframes_to_trajectory(0, &b, &[(2, [0.0; 3])], 5, 1).is_err());
        assert!(box_keyframes_to_trajectory(0, &b, &[(1, [0.0; 3]), (9, [1.0; 3])], 5, 1).is_err());
    }

    #[test]
    fn projection_follows_camera() {
        let k = CameraIntrinsics::new(100.0, 100.0, 32.0, 32.0, 64, 64).unwrap();
        let traj = ObjectTrajectory3D {
            object_id: 0,
            frames: vec![vec![[0.0, 0.0, 2.0]]; 4],
        };
        let cams = CameraTrajectory::static_identity(4, k);
        let p = project_trajectory(&traj, &cams).unwrap();
        assert!(p.iter().all(|f| f[0].u == 32.0 && f[0].v == 32.0));

        let right: Vec<_> = (0..4).map(|j| CameraPose::from_translation([0.1 * j as f64, 0.0, 0.0])).collect();
        let p = project_trajectory(&traj, &CameraTrajectory::new(right, k).unwrap()).unwrap();
        assert!(p.windows(2).all(|w| w[1][0].u < w[0][0].u));

        let mut behind = traj.clone();
        behind.frames[2][0] = [0.0, 0.0, -1.0];
        let p = project_trajectory(&behind, &cams).unwrap();
        assert!(!p[2][0].valid && p[1][0].valid);
    }

    #[test]
    fn box_fitting_examples() {
        let s = fit_boxes(0, &[vec![proj(10.0, 10.0), proj(30.0, 50.0)]], 0.0, 64, 64);
        assert_eq!(
            s.boxes[0],
            Some(PixelBox {
                x0: 10.0,
                y0: 10.0,
                x1: 30.0,
                y1: 50.0
            })
        );
        let s = fit_boxes(0, &[vec![proj(10.0, 10.0), proj(30.0, 50.0)]], 5.0, 64, 64);
        assert_eq!(
            s.boxes[0],
            Some(PixelBox {
                x0: 5.0,
                y0: 5.0,
                x1: 35.0,
                y1: 55.0
            })
        );
        let mut invalid = proj(30.0, 50.0);
        invalid.valid = false;
        assert_eq!(fit_boxes(0, &[vec![proj(10.0, 10.0), invalid]], 0.0, 64, 64).boxes[0], None);
        assert_eq!(fit_boxes(0, &[vec![proj(70.0, 10.0), proj(90.0, 20.0)]], 0.0, 64, 64).boxes[0], None);
        let clamped = fit_boxes(0, &[vec![proj(-10.0, 10.0), proj(90.0, 20.0)]], 0.0, 64, 64).boxes[0].unwrap();
        assert_eq!((clamped.x0, clamped.x1), (-0.5, 63.5));
    }

    #[test]
    fn overlay_draws_outline_only() {
        let base = Image::filled(16, 16, [0.2, 0.2, 0.2]);
        let g = GuidanceFrames {
            frames: vec![base.clone(), base.clone()],
            masks: vec![Mask::new(16, 16, true); 2],
        };
        assert_eq!(overlay_boxes(&g, &[]), g);

        let b = PixelBox {
            x0: 2.0,
            y0: 3.0,
            x1: 11.0,
            y1: 12.0,
        };
        let seq = BoxSequence2D {
            object_id: 1,
            boxes: vec![Some(b), None],
        };
        let o = overlay_boxes(&g, &[seq]);
        assert_eq!(o.frames[1], base);
        for y in 0..16 {
            for x in 0..16 {
                let inside = (2..=11).contains(&x) && (3..=12).contains(&y);
                let interior = (4..=9).contains(&x) && (5..=10).contains(&y);
                let want = if inside && !interior { overlay_color(1) } else { base.get(x, y) };
                assert_eq!(o.frames[0].get(x, y), want, "({x},{y})");
            }
        }
    }

    #[test]
    fn later_object_is_drawn_on_top() {
        let base = Image::new(8, 8);
        let g = GuidanceFrames {
            frames: vec![base],
            masks: vec![Mask::new(8, 8, true)],
        };
        let b = Some(PixelBox {
            x0: 0.0,
            y0: 0.0,
            x1: 5.0,
            y1: 5.0,
        });
        let seqs = [
            BoxSequence2D {
                object_id: 2,
                boxes: vec![b],
            },
            BoxSequence2D {
                object_id: 1,
                boxes: vec![b],
            },
        ];
        assert_eq!(overlay_boxes(&g, &seqs).frames[0].get(0, 0), overlay_color(2));
    }

    #[test]
    fn downsampling_examples() {
        let f: Vec<usize> = (1..=81).collect();
        assert_eq!(temporal_downsample(&f, 4).len(), 21);
        assert_eq!(temporal_downsample(&f[..9], 4), vec![1, 5, 9]);
        assert_eq!(temporal_downsample(&f, 1), f);
        for s in 1..12 {
            assert_eq!(temporal_downsample(&f, s)[0], 1);
            assert_eq!(temporal_downsample(&f, s).len(), downsampled_len(81, s));
        }
    }

    #[test]
    fn caption_words() {
        assert_eq!(caption_tokens("A red cube moves left."), vec![1, 8, 12, 13, 14]);
        assert_eq!(caption_tokens("zebra"), vec![0]);
        assert_eq!(caption_tokens(""), vec![0]);
    }

    #[test]
    fn iou_values() {
        let a = PixelBox {
            x0: 0.0,
            y0: 0.0,
            x1: 2.0,
            y1: 2.0,
        };
        let b = PixelBox {
            x0: 1.0,
            y0: 1.0,
            x1: 3.0,
            y1: 3.0,
        };
        assert!((a.iou(&b) - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(a.iou(&a), 1.0);
        let snapped = PixelBox {
            x0: 1.2,
            y0: 0.0,
            x1: 3.7,
            y1: 0.4,
        }
        .snapped();
        assert_eq!((snapped.x0, snapped.x1, snapped.y0, snapped.y1), (1.5, 3.5, -0.5, 0.5));
    }
}
