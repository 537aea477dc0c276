//! Deterministic synthetic clips: a textured back wall and ground plane with
//! solid-colored cuboids moving under a known camera path, plus exact
//! annotations.

mod annotation;
mod dataset;

pub use annotation::{
    annotation_from_json, annotation_to_json, read_annotation, write_annotation, AnnotatedObject, AnnotationError,
    SceneAnnotation, ANNOTATION_SCHEMA,
};
pub use dataset::{
    derive_scene_config, load_clip, make_dataset, read_index, spec_for_clip, write_clip, Clip, DatasetError,
    DatasetIndex, DatasetOptions, IndexEntry, INDEX_SCHEMA,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditioning::{fit_boxes, project_trajectory, sample_object_points, Box3D, ObjectTrajectory3D};
use crate::geometry::{axis_angle, mat_mul, mat_vec, CameraIntrinsics, CameraPose, CameraTrajectory, Vec3};
use crate::raster::{DepthMap, Image, Mask};

pub const BACK_WALL_Z: f64 = 6.0;
pub const GROUND_Y: f64 = 1.0;
pub const SKY_COLOR: [f32; 3] = [0.22, 0.22, 0.27];
pub const POINTS_PER_OBJECT: usize = 9;
const MAX_ATTEMPTS: u64 = 64;

/// Object labels and their solid colors.
pub const OBJECT_PALETTE: [(&str, [f32; 3]); 4] = [
    ("red cube", [1.0, 0.0, 0.0]),
    ("green cube", [0.0, 1.0, 0.0]),
    ("blue cube", [0.0, 0.0, 1.0]),
    ("yellow cube", [1.0, 1.0, 0.0]),
];

pub fn color_for_label(label: &str) -> Option<[f32; 3]> {
    OBJECT_PALETTE.iter().find(|(l, _)| *l == label).map(|(_, c)| *c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CameraMotion {
    Static,
    Pan,
    Dolly,
    Orbit,
    RandomSmooth,
}

impl CameraMotion {
    pub const ALL: [Self; 5] = [Self::Static, Self::Pan, Self::Dolly, Self::Orbit, Self::RandomSmooth];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectMotionFamily {
    Static,
    Linear,
    Circular,
    RandomSmooth,
}

impl ObjectMotionFamily {
    pub const ALL: [Self; 4] = [Self::Static, Self::Linear, Self::Circular, Self::RandomSmooth];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub seed: u64,
    pub num_frames: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub camera_motion: CameraMotion,
    pub num_objects: usize,
    pub object_motion: ObjectMotionFamily,
    /// Near and far bounds for object centers.
    pub depth_range: [f64; 2],
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_frames: 17,
            width: 64,
            height: 64,
            focal: 64.0,
            camera_motion: CameraMotion::Static,
            num_objects: 1,
            object_motion: ObjectMotionFamily::Linear,
            depth_range: [2.5, 4.0],
        }
    }
}

impl SceneConfig {
    pub fn intrinsics(&self) -> CameraIntrinsics<f64> {
        CameraIntrinsics {
            fx: self.focal,
            fy: self.focal,
            cx: (self.width as f64 - 1.0) / 2.0,
            cy: (self.height as f64 - 1.0) / 2.0,
            width: self.width,
            height: self.height,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.into()));
        if self.num_frames < 2 {
            return bad("num_frames must be at least 2");
        }
        if self.num_objects > OBJECT_PALETTE.len() - 1 {
            return bad("at most 3 objects are supported");
        }
        if self.width < 8 || self.height < 8 {
            return bad("images must be at least 8x8");
        }
        if !(self.focal > 0.0) {
            return bad("focal length must be positive");
        }
        let [near, far] = self.depth_range;
        if !(near > 0.5 && far >= near && far < BACK_WALL_Z - 1.0) {
            return bad("depth range must satisfy 0.5 < near <= far < 5");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene config: {0}")]
    Config(String),
    #[error("no feasible scene for seed {seed} after {attempts} attempts")]
    Infeasible { seed: u64, attempts: u64 },
}

/// A rendered clip: frames quantized to 8 bits, the frame-1 depth and the
/// annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneOutput {
    pub frames: Vec<Image>,
    pub depth: DepthMap,
    pub annotation: SceneAnnotation,
}

struct SceneObject {
    id: u32,
    label: &'static str,
    color: [f32; 3],
    half: Vec3<f64>,
    centers: Vec<Vec3<f64>>,
    phrase: String,
}

struct Scene {
    texture_seed: u64,
    poses: Vec<CameraPose<f64>>,
    objects: Vec<SceneObject>,
    camera_phrase: &'static str,
}

/// Splitmix-style combination of two seeds.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn smoothstep(s: f64) -> f64 {
    s * s * (3.0 - 2.0 * s)
}

fn sign(rng: &mut impl Rng) -> f64 {
    if rng.random_bool(0.5) {
        1.0
    } else {
        -1.0
    }
}

fn camera_path(cfg: &SceneConfig, rng: &mut impl Rng) -> (Vec<CameraPose<f64>>, &'static str) {
    let n = cfg.num_frames;
    let s = |j: usize| j as f64 / (n - 1) as f64;
    let yaw = |a: f64| axis_angle([0.0, 1.0, 0.0], a);
    match cfg.camera_motion {
        CameraMotion::Static => (vec![CameraPose::identity(); n], "is static"),
        CameraMotion::Pan => {
            let dir = sign(rng);
            let total = dir * rng.random_range(8.0f64..15.0).to_radians();
            let poses = (0..n).map(|j| CameraPose::from_rotation(yaw(total * s(j)))).collect();
            (poses, if dir > 0.0 { "pans right" } else { "pans left" })
        }
        CameraMotion::Dolly => {
            let dir = sign(rng);
            let d = dir * rng.random_range(0.5..0.9);
            let poses = (0..n).map(|j| CameraPose::from_translation([0.0, 0.0, d * s(j)])).collect();
            (poses, if dir > 0.0 { "dollies in" } else { "dollies out" })
        }
        CameraMotion::Orbit => {
            let dir = sign(rng);
            let total = dir * rng.random_range(8.0f64..15.0).to_radians();
            let anchor = [0.0, 0.0, rng.random_range(3.0..3.5)];
            let poses = (0..n)
                .map(|j| {
                    let r = yaw(total * s(j));
                    let ra = mat_vec(&r, &anchor);
                    CameraPose::new(r, [anchor[0] - ra[0], anchor[1] - ra[1], anchor[2] - ra[2]])
                })
                .collect();
            (poses, if dir > 0.0 { "orbits left" } else { "orbits right" })
        }
        CameraMotion::RandomSmooth => {
            let yaw_end = rng.random_range(-0.15..0.15);
            let pitch_end = rng.random_range(-0.08..0.08);
            let t_end = [rng.random_range(-0.3..0.3), rng.random_range(-0.15..0.15), rng.random_range(-0.4..0.4)];
            let wobble = [rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)];
            let poses = (0..n)
                .map(|j| {
                    let a = smoothstep(s(j));
                    let w = (std::f64::consts::PI * s(j)).sin();
                    let r = mat_mul(&yaw(yaw_end * a), &axis_angle([1.0, 0.0, 0.0], pitch_end * a));
                    CameraPose::new(r, [t_end[0] * a + wobble[0] * w, t_end[1] * a + wobble[1] * w, t_end[2] * a])
                })
                .collect();
            (poses, "drifts")
        }
    }
}

fn direction_phrase(delta: Vec3<f64>) -> &'static str {
    let ax = (0..3)
        .max_by(|&a, &b| delta[a].abs().total_cmp(&delta[b].abs()))
        .unwrap();
    match (ax, delta[ax] > 0.0) {
        (0, true) => "moves right",
        (0, false) => "moves left",
        (1, true) => "moves down",
        (1, false) => "moves up",
        (_, true) => "moves away",
        (_, false) => "moves closer",
    }
}

fn object_path(
    family: ObjectMotionFamily,
    start: Vec3<f64>,
    n: usize,
    rng: &mut impl Rng,
) -> (Vec<Vec3<f64>>, String) {
    let s = |j: usize| j as f64 / (n - 1) as f64;
    let add = |a: Vec3<f64>, b: Vec3<f64>, k: f64| -> Vec3<f64> { std::array::from_fn(|i| a[i] + k * b[i]) };
    match family {
        ObjectMotionFamily::Static => (vec![start; n], "stays still".into()),
        ObjectMotionFamily::Linear => {
            let dist = rng.random_range(0.7..1.0);
            let ang = rng.random_range(-0.35f64..0.35) + if rng.random_bool(0.5) { 0.0 } else { std::f64::consts::PI };
            let delta = [dist * ang.cos(), dist * ang.sin(), rng.random_range(-0.3..0.3)];
            let path = (0..n).map(|j| add(start, delta, s(j))).collect();
            (path, direction_phrase(delta).into())
        }
        ObjectMotionFamily::Circular => {
            let r = rng.random_range(0.3..0.45);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let sweep = sign(rng) * rng.random_range(1.0..1.5) * std::f64::consts::PI;
            let path = (0..n)
                .map(|j| {
                    let a = phase + sweep * s(j);
                    [start[0] + r * (a.cos() - phase.cos()), start[1] + r * (a.sin() - phase.sin()), start[2]]
                })
                .collect();
            (path, "moves in a circle".into())
        }
        ObjectMotionFamily::RandomSmooth => {
            let end = add(start, [rng.random_range(-0.8..0.8), rng.random_range(-0.4..0.4), rng.random_range(-0.3..0.3)], 1.0);
            let mid = add(start, [rng.random_range(-0.6..0.6), rng.random_range(-0.4..0.4), 0.0], 1.0);
            let path = (0..n)
                .map(|j| {
                    let t = s(j);
                    std::array::from_fn(|i| (1.0 - t) * (1.0 - t) * start[i] + 2.0 * t * (1.0 - t) * mid[i] + t * t * end[i])
                })
                .collect();
            (path, "wanders".into())
        }
    }
}

fn build_scene(cfg: &SceneConfig, attempt: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, attempt));
    let (poses, camera_phrase) = camera_path(cfg, &mut rng);
    let mut palette: Vec<usize> = (0..OBJECT_PALETTE.len()).collect();
    let mut bands = vec![-0.55, 0.0, 0.55];
    for i in (1..palette.len()).rev() {
        palette.swap(i, rng.random_range(0..=i));
    }
    for i in (1..bands.len()).rev() {
        bands.swap(i, rng.random_range(0..=i));
    }
    let objects = (0..cfg.num_objects)
        .map(|i| {
            let (label, color) = OBJECT_PALETTE[palette[i]];
            let z = rng.random_range(cfg.depth_range[0]..=cfg.depth_range[1]);
            let half = [rng.random_range(0.2..0.3), rng.random_range(0.2..0.3), rng.random_range(0.2..0.3)];
            let start = [rng.random_range(-0.5..0.5) * z / 3.0, bands[i] * z / 3.0 + rng.random_range(-0.1..0.1), z];
            let (centers, phrase) = object_path(cfg.object_motion, start, cfg.num_frames, &mut rng);
            SceneObject {
                id: i as u32,
                label,
                color,
                half,
                centers,
                phrase,
            }
        })
        .collect();
    Scene {
        texture_seed: rng.random(),
        poses,
        objects,
        camera_phrase,
    }
}

fn caption(scene: &Scene) -> String {
    let camera = format!("the camera {}", scene.camera_phrase);
    if scene.objects.is_empty() {
        return camera;
    }
    let parts: Vec<String> = scene.objects.iter().map(|o| format!("a {} {}", o.label, o.phrase)).collect();
    format!("{} while {camera}", parts.join(" and "))
}

fn texture(seed: u64, a: f64, b: f64, plane: u64) -> [f32; 3] {
    let cell = |v: f64| (v / 0.5).floor() as i64 as u64;
    let h = mix(mix(seed, plane), mix(cell(a), cell(b).wrapping_add(0x51ED)));
    let g = 0.3 + 0.4 * (h & 0xFF) as f32 / 255.0;
    let tint = |k: u32| ((h >> (8 + 8 * k)) & 0xFF) as f32 / 255.0 * 0.1 - 0.05;
    let warm = if plane == 1 { 0.04 } else { 0.0 };
    [g + tint(0) + warm, g + tint(1), g + tint(2) - warm]
}

/// Nearest positive ray parameter for an axis-aligned box, if any.
fn hit_box(o: &Vec3<f64>, d: &Vec3<f64>, c: &Vec3<f64>, h: &Vec3<f64>) -> Option<f64> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for i in 0..3 {
        let (lo, hi) = (c[i] - h[i], c[i] + h[i]);
        if d[i] == 0.0 {
            if o[i] < lo || o[i] > hi {
                return None;
            }
            continue;
        }
        let (a, b) = ((lo - o[i]) / d[i], (hi - o[i]) / d[i]);
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    (t0 <= t1 && t0 > 0.0).then_some(t0)
}

struct FrameRender {
    image: Image,
    depth: Vec<f32>,
    owner: Vec<Option<u32>>,
}

/// Casts one ray per pixel center. Depth is the camera-frame z of the hit.
fn render_frame(scene: &Scene, k: &CameraIntrinsics<f64>, frame: usize) -> FrameRender {
    let pose = &scene.poses[frame];
    let o = pose.translation;
    let mut out = FrameRender {
        image: Image::new(k.width, k.height),
        depth: vec![0.0; k.width * k.height],
        owner: vec![None; k.width * k.height],
    };
    for y in 0..k.height {
        for x in 0..k.width {
            // ray parameter equals camera-frame depth because the camera ray has unit z
            let dc = [(x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0];
            let d = mat_vec(&pose.rotation, &dc);
            let mut best: Option<(f64, [f32; 3], Option<u32>)> = None;
            let mut consider = |t: f64, c: [f32; 3], id: Option<u32>| {
                if t > 0.0 && best.is_none_or(|b| t < b.0) {
                    best = Some((t, c, id));
                }
            };
            if d[2] > 0.0 {
                let t = (BACK_WALL_Z - o[2]) / d[2];
                let p = [o[0] + t * d[0], o[1] + t * d[1]];
                consider(t, texture(scene.texture_seed, p[0], p[1], 0), None);
            }
            if d[1] > 0.0 {
                let t = (GROUND_Y - o[1]) / d[1];
                let p = [o[0] + t * d[0], o[2] + t * d[2]];
                if p[1] < BACK_WALL_Z {
                    consider(t, texture(scene.texture_seed, p[0], p[1], 1), None);
                }
            }
            for obj in &scene.objects {
                if let Some(t) = hit_box(&o, &d, &obj.centers[frame], &obj.half) {
                    consider(t, obj.color, Some(obj.id));
                }
            }
            let i = y * k.width + x;
            match best {
                Some((t, c, id)) => {
                    out.image.set(x, y, c);
                    out.depth[i] = t as f32;
                    out.owner[i] = id;
                }
                None => out.image.set(x, y, SKY_COLOR),
            }
        }
    }
    out.image = out.image.quantized();
    out
}

fn boxes_overlap(a: &Box3D, b: &Box3D) -> bool {
    (0..3).all(|i| (a.center[i] - b.center[i]).abs() < a.half_extents[i] + b.half_extents[i])
}

/// Renders a clip. Seeds that yield an unusable layout (objects overlapping,
/// hidden or off-screen) are perturbed and retried a bounded number of times.
pub fn generate_scene(cfg: &SceneConfig) -> Result<SceneOutput, SynthError> {
    cfg.validate()?;
    let k = cfg.intrinsics();
    for attempt in 0..MAX_ATTEMPTS {
        let scene = build_scene(cfg, attempt);
        if let Some(out) = try_render(cfg, &k, &scene) {
            return Ok(out);
        }
    }
    Err(SynthError::Infeasible {
        seed: cfg.seed,
        attempts: MAX_ATTEMPTS,
    })
}

fn try_render(cfg: &SceneConfig, k: &CameraIntrinsics<f64>, scene: &Scene) -> Option<SceneOutput> {
    let n = cfg.num_frames;
    let cams = CameraTrajectory {
        poses: scene.poses.clone(),
        intrinsics: *k,
    };
    let boxes3d = |o: &SceneObject, j: usize| Box3D {
        center: o.centers[j],
        half_extents: o.half,
    };
    // objects stay apart in 3D, in front of the wall and above the ground
    for j in 0..n {
        for (a, oa) in scene.objects.iter().enumerate() {
            let b = boxes3d(oa, j);
            if b.center[2] + b.half_extents[2] > BACK_WALL_Z - 0.5 || b.center[1] + b.half_extents[1] > GROUND_Y {
                return None;
            }
            if scene.objects[a + 1..].iter().any(|ob| boxes_overlap(&b, &boxes3d(ob, j))) {
                return None;
            }
        }
    }

    let mut objects = Vec::new();
    for o in &scene.objects {
        let offsets = sample_object_points(&boxes3d(o, 0), POINTS_PER_OBJECT).ok()?;
        let frames = o
            .centers
            .iter()
            .map(|c| {
                offsets
                    .iter()
                    .map(|p| std::array::from_fn(|i| p[i] - o.centers[0][i] + c[i]))
                    .collect()
            })
            .collect();
        let traj = ObjectTrajectory3D {
            object_id: o.id,
            frames,
        };
        let proj = project_trajectory(&traj, &cams).ok()?;
        let boxes = fit_boxes(o.id, &proj, 0.0, k.width, k.height).boxes;
        if boxes.iter().filter(|b| b.is_some()).count() * 2 < n {
            return None;
        }
        objects.push(AnnotatedObject {
            id: o.id,
            label: o.label.to_string(),
            color: o.color,
            bbox: boxes3d(o, 0),
            points: traj.frames,
            boxes,
            masks: Vec::with_capacity(n),
        });
    }
    // projected boxes never touch, so color recovery sees whole objects
    for j in 0..n {
        for a in 0..objects.len() {
            for b in a + 1..objects.len() {
                if let (Some(ba), Some(bb)) = (objects[a].boxes[j], objects[b].boxes[j]) {
                    if ba.intersection(&bb) > 0.0 {
                        return None;
                    }
                }
            }
        }
    }

    let mut frames = Vec::with_capacity(n);
    let mut depth0 = None;
    for j in 0..n {
        let r = render_frame(scene, k, j);
        for obj in objects.iter_mut() {
            let mut m = Mask::new(k.width, k.height, false);
            for (i, own) in r.owner.iter().enumerate() {
                m.data[i] = *own == Some(obj.id);
            }
            obj.masks.push(m);
        }
        if j == 0 {
            depth0 = Some(DepthMap::new(k.width, k.height, r.depth));
        }
        frames.push(r.image);
    }
    // 12 pixels at 64x64, scaled with the frame area
    let min_area = (12 * k.width * k.height / 4096).max(2);
    if objects.iter().any(|o| o.masks[0].count() < min_area) {
        return None;
    }
    let annotation = SceneAnnotation {
        clip_id: format!("scene-{:016x}", cfg.seed),
        caption: caption(scene),
        intrinsics: *k,
        poses: scene.poses.clone(),
        depth: "depth0.pfm".into(),
        objects,
        config: Some(cfg.clone()),
        extra: Default::default(),
    };
    Some(SceneOutput {
        frames,
        depth: depth0.expect("at least one frame"),
        annotation,
    })
}
