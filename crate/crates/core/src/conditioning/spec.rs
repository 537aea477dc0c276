use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{label_index, Box3D, VOCABULARY};
use crate::geometry::{CameraIntrinsics, CameraPose, Vec3};
use crate::tensor::write_bytes_atomic;

pub const SPEC_VERSION: &str = "mf-1";

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("cannot read {path}: {msg}")]
    Read { path: String, msg: String },
    #[error("at {path}: {msg}")]
    Schema { path: String, msg: String },
    #[error(
        "unsupported spec version {found:?}; this build reads \"{SPEC_VERSION}\". \
         Re-export the spec with the current tools, or set \"version\": \"{SPEC_VERSION}\" \
         after checking it against the current schema"
    )]
    Version { found: String },
}

fn schema(path: impl Into<String>, msg: impl Into<String>) -> SpecError {
    SpecError::Schema {
        path: path.into(),
        msg: msg.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct IntrinsicsJson {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
}

impl From<&CameraIntrinsics<f64>> for IntrinsicsJson {
    fn from(k: &CameraIntrinsics<f64>) -> Self {
        Self {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
        }
    }
}

impl From<&IntrinsicsJson> for CameraIntrinsics<f64> {
    fn from(i: &IntrinsicsJson) -> Self {
        CameraIntrinsics {
            fx: i.fx,
            fy: i.fy,
            cx: i.cx,
            cy: i.cy,
            width: i.width,
            height: i.height,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct PoseJson {
    rotation: [f64; 9],
    translation: [f64; 3],
}

impl From<&CameraPose<f64>> for PoseJson {
    fn from(p: &CameraPose<f64>) -> Self {
        Self {
            rotation: std::array::from_fn(|i| p.rotation[i / 3][i % 3]),
            translation: p.translation,
        }
    }
}

impl From<&PoseJson> for CameraPose<f64> {
    fn from(p: &PoseJson) -> Self {
        let r = p.rotation;
        CameraPose::new([[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]], p.translation)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectJson {
    id: u32,
    label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    points: Option<Vec<Vec<Vec3<f64>>>>,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    bbox: Option<Box3D>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    keyframes: Option<Vec<(usize, Vec3<f64>)>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecJson {
    version: String,
    reference_image: String,
    depth_map: String,
    intrinsics: IntrinsicsJson,
    num_frames: usize,
    camera: Vec<PoseJson>,
    objects: Vec<ObjectJson>,
    caption: String,
    seed: u64,
}

/// How an object moves: explicit `N × N_p` points, or a box dragged through
/// 1-based keyframes.
#[derive(Clone, Debug, PartialEq)]
pub enum ObjectMotion {
    Points(Vec<Vec<Vec3<f64>>>),
    Keyframes { bbox: Box3D, keyframes: Vec<(usize, Vec3<f64>)> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectSpec {
    pub id: u32,
    pub label: String,
    pub motion: ObjectMotion,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlSpec {
    pub reference_image: String,
    pub depth_map: String,
    pub intrinsics: CameraIntrinsics<f64>,
    pub num_frames: usize,
    pub camera: Vec<CameraPose<f64>>,
    pub objects: Vec<ObjectSpec>,
    pub caption: String,
    pub seed: u64,
}

impl ControlSpec {
    /// Checks every cross-field invariant, naming the offending JSON path.
    pub fn validate(&self) -> Result<(), SpecError> {
        self.intrinsics
            .validate()
            .map_err(|e| schema("intrinsics", e.to_string()))?;
        if self.num_frames == 0 {
            return Err(schema("num_frames", "must be at least 1"));
        }
        if self.camera.len() != self.num_frames {
            return Err(schema(
                "camera",
                format!("{} poses for num_frames = {}", self.camera.len(), self.num_frames),
            ));
        }
        for (i, p) in self.camera.iter().enumerate() {
            p.validate().map_err(|e| schema(format!("camera[{i}]"), e.to_string()))?;
        }
        let mut ids = HashSet::new();
        for (i, o) in self.objects.iter().enumerate() {
            let at = |f: &str| format!("objects[{i}]{f}");
            if !ids.insert(o.id) {
                return Err(schema(at(".id"), format!("duplicate object id {}", o.id)));
            }
            if label_index(&o.label).is_none() {
                return Err(schema(
                    at(".label"),
                    format!("unknown label {:?}; known labels: {}", o.label, VOCABULARY.join(", ")),
                ));
            }
            match &o.motion {
                ObjectMotion::Points(frames) => {
                    if frames.len() != self.num_frames {
                        return Err(schema(
                            at(".points"),
                            format!("{} frames for num_frames = {}", frames.len(), self.num_frames),
                        ));
                    }
                    let np = frames[0].len();
                    if np == 0 {
                        return Err(schema(at(".points[0]"), "no points"));
                    }
                    for (j, f) in frames.iter().enumerate() {
                        if f.len() != np {
                            return Err(schema(at(&format!(".points[{j}]")), format!("{} points, expected {np}", f.len())));
                        }
                        if f.iter().flatten().any(|v| !v.is_finite()) {
                            return Err(schema(at(&format!(".points[{j}]")), "non-finite coordinate"));
                        }
                    }
                }
                ObjectMotion::Keyframes { bbox, keyframes } => {
                    bbox.validate().map_err(|e| schema(at(".box"), e.to_string()))?;
                    if keyframes.first().map(|k| k.0) != Some(1) {
                        return Err(schema(at(".keyframes"), "the first keyframe must be at frame 1"));
                    }
                    for (k, w) in keyframes.windows(2).enumerate() {
                        if w[1].0 <= w[0].0 {
                            return Err(schema(at(&format!(".keyframes[{}]", k + 1)), "frames must be strictly increasing"));
                        }
                    }
                    if let Some((k, kf)) = keyframes.iter().enumerate().find(|(_, kf)| kf.0 > self.num_frames) {
                        return Err(schema(
                            at(&format!(".keyframes[{k}]")),
                            format!("frame {} beyond num_frames = {}", kf.0, self.num_frames),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    fn to_json(&self) -> SpecJson {
        SpecJson {
            version: SPEC_VERSION.into(),
            reference_image: self.reference_image.clone(),
            depth_map: self.depth_map.clone(),
            intrinsics: (&self.intrinsics).into(),
            num_frames: self.num_frames,
            camera: self.camera.iter().map(PoseJson::from).collect(),
            objects: self
                .objects
                .iter()
                .map(|o| {
                    let (points, bbox, keyframes) = match &o.motion {
                        ObjectMotion::Points(p) => (Some(p.clone()), None, None),
                        ObjectMotion::Keyframes { bbox, keyframes } => (None, Some(*bbox), Some(keyframes.clone())),
                    };
                    ObjectJson {
                        id: o.id,
                        label: o.label.clone(),
                        points,
                        bbox,
                        keyframes,
                    }
                })
                .collect(),
            caption: self.caption.clone(),
            seed: self.seed,
        }
    }

    fn from_json(j: SpecJson) -> Result<Self, SpecError> {
        let objects = j
            .objects
            .into_iter()
            .enumerate()
            .map(|(n, o)| {
                let motion = match (o.points, o.bbox, o.keyframes) {
                    (Some(p), None, None) => ObjectMotion::Points(p),
                    (None, Some(bbox), Some(keyframes)) => ObjectMotion::Keyframes { bbox, keyframes },
                    (None, Some(bbox), None) => ObjectMotion::Keyframes {
                        bbox,
                        keyframes: vec![(1, bbox.center)],
                    },
                    _ => {
                        return Err(schema(
                            format!("objects[{n}]"),
                            "give either \"points\" or \"box\" (with optional \"keyframes\"), not both",
                        ))
                    }
                };
                Ok(ObjectSpec {
                    id: o.id,
                    label: o.label,
                    motion,
                })
            })
            .collect::<Result<_, _>>()?;
        let spec = ControlSpec {
            reference_image: j.reference_image,
            depth_map: j.depth_map,
            intrinsics: (&j.intrinsics).into(),
            num_frames: j.num_frames,
            camera: j.camera.iter().map(CameraPose::from).collect(),
            objects,
            caption: j.caption,
            seed: j.seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

pub fn spec_to_json(spec: &ControlSpec) -> String {
    serde_json::to_string_pretty(&spec.to_json()).expect("spec serializes")
}

pub fn parse_spec(text: &str) -> Result<ControlSpec, SpecError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| schema("$", e.to_string()))?;
    match value.get("version") {
        Some(serde_json::Value::String(v)) if v == SPEC_VERSION => {}
        Some(serde_json::Value::String(v)) => return Err(SpecError::Version { found: v.clone() }),
        Some(other) => return Err(SpecError::Version { found: other.to_string() }),
        None => return Err(SpecError::Version { found: "<missing>".into() }),
    }
    let json: SpecJson = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        schema(path, e.into_inner().to_string())
    })?;
    ControlSpec::from_json(json)
}

pub fn read_spec(path: &Path) -> Result<ControlSpec, SpecError> {
    let text = std::fs::read_to_string(path).map_err(|e| SpecError::Read {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    parse_spec(&text)
}

pub fn write_spec(spec: &ControlSpec, path: &Path) -> Result<(), SpecError> {
    spec.validate()?;
    write_bytes_atomic(path, spec_to_json(spec).as_bytes()).map_err(|e| SpecError::Read {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}
