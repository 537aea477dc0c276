use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use super::SceneConfig;
use crate::conditioning::{Box3D, IntrinsicsJson, PixelBox, PoseJson};
use crate::geometry::{CameraIntrinsics, CameraPose, Vec3};
use crate::raster::Mask;
use crate::tensor::write_bytes_atomic;

pub const ANNOTATION_SCHEMA: &str = "rc-1";

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("cannot access {path}: {msg}")]
    Io { path: String, msg: String },
    #[error("at {path}: {msg}")]
    Schema { path: String, msg: String },
}

fn schema(path: impl Into<String>, msg: impl Into<String>) -> AnnotationError {
    AnnotationError::Schema {
        path: path.into(),
        msg: msg.into(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedObject {
    pub id: u32,
    pub label: String,
    pub color: [f32; 3],
    /// Box at frame 1, reference-camera coordinates.
    pub bbox: Box3D,
    /// `N × N_p` ground-truth points, reference-camera coordinates.
    pub points: Vec<Vec<Vec3<f64>>>,
    pub boxes: Vec<Option<PixelBox>>,
    pub masks: Vec<Mask>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneAnnotation {
    pub clip_id: String,
    pub caption: String,
    pub intrinsics: CameraIntrinsics<f64>,
    /// Camera-to-world poses; the first is the identity.
    pub poses: Vec<CameraPose<f64>>,
    /// Frame-1 depth map, relative to the clip directory.
    pub depth: String,
    pub objects: Vec<AnnotatedObject>,
    pub config: Option<SceneConfig>,
    /// Unknown top-level fields, kept for lossless round trips.
    pub extra: Map<String, Value>,
}

#[derive(Serialize, Deserialize)]
struct MaskJson {
    width: usize,
    height: usize,
    /// Alternating run lengths in row-major order, starting with unset pixels.
    runs: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectJson {
    id: u32,
    label: String,
    color: [f32; 3],
    #[serde(rename = "box")]
    bbox: Box3D,
    points: Vec<Vec<Vec3<f64>>>,
    boxes: Vec<Option<[f64; 4]>>,
    masks: Vec<MaskJson>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationJson {
    schema: String,
    clip_id: String,
    caption: String,
    intrinsics: IntrinsicsJson,
    poses: Vec<PoseJson>,
    depth: String,
    objects: Vec<ObjectJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<SceneConfig>,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

fn encode_mask(m: &Mask) -> MaskJson {
    let mut runs = Vec::new();
    let (mut cur, mut len) = (false, 0u32);
    for &v in &m.data {
        if v != cur {
            runs.push(len);
            cur = v;
            len = 0;
        }
        len += 1;
    }
    runs.push(len);
    MaskJson {
        width: m.width,
        height: m.height,
        runs,
    }
}

fn decode_mask(j: &MaskJson, at: &str) -> Result<Mask, AnnotationError> {
    let total: u64 = j.runs.iter().map(|r| *r as u64).sum();
    if total != (j.width * j.height) as u64 {
        return Err(schema(at, format!("runs cover {total} pixels, expected {}", j.width * j.height)));
    }
    let mut m = Mask::new(j.width, j.height, false);
    let mut pos = 0;
    for (i, r) in j.runs.iter().enumerate() {
        let end = pos + *r as usize;
        if i % 2 == 1 {
            m.data[pos..end].fill(true);
        }
        pos = end;
    }
    Ok(m)
}

pub fn annotation_to_json(a: &SceneAnnotation) -> String {
    let j = AnnotationJson {
        schema: ANNOTATION_SCHEMA.into(),
        clip_id: a.clip_id.clone(),
        caption: a.caption.clone(),
        intrinsics: (&a.intrinsics).into(),
        poses: a.poses.iter().map(PoseJson::from).collect(),
        depth: a.depth.clone(),
        objects: a
            .objects
            .iter()
            .map(|o| ObjectJson {
                id: o.id,
                label: o.label.clone(),
                color: o.color,
                bbox: o.bbox,
                points: o.points.clone(),
                boxes: o.boxes.iter().map(|b| b.map(|b| [b.x0, b.y0, b.x1, b.y1])).collect(),
                masks: o.masks.iter().map(encode_mask).collect(),
            })
            .collect(),
        config: a.config.clone(),
        extra: a.extra.clone(),
    };
    serde_json::to_string(&j).expect("annotation serializes")
}

pub fn annotation_from_json(text: &str) -> Result<SceneAnnotation, AnnotationError> {
    let value: Value = serde_json::from_str(text).map_err(|e| schema("$", e.to_string()))?;
    match value.get("schema").and_then(Value::as_str) {
        Some(ANNOTATION_SCHEMA) => {}
        other => {
            return Err(schema(
                "schema",
                format!("expected \"{ANNOTATION_SCHEMA}\", found {}", other.unwrap_or("nothing")),
            ))
        }
    }
    let j: AnnotationJson = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        schema(path, e.into_inner().to_string())
    })?;
    let n = j.poses.len();
    if n == 0 {
        return Err(schema("poses", "no frames"));
    }
    let intrinsics: CameraIntrinsics<f64> = (&j.intrinsics).into();
    intrinsics.validate().map_err(|e| schema("intrinsics", e.to_string()))?;
    let poses: Vec<CameraPose<f64>> = j.poses.iter().map(CameraPose::from).collect();
    for (i, p) in poses.iter().enumerate() {
        p.validate().map_err(|e| schema(format!("poses[{i}]"), e.to_string()))?;
    }
    let mut objects = Vec::new();
    for (i, o) in j.objects.iter().enumerate() {
        let at = |f: &str| format!("objects[{i}].{f}");
        for (f, len) in [("points", o.points.len()), ("boxes", o.boxes.len()), ("masks", o.masks.len())] {
            if len != n {
                return Err(schema(at(f), format!("{len} frames, expected {n}")));
            }
        }
        let masks = o
            .masks
            .iter()
            .enumerate()
            .map(|(k, m)| decode_mask(m, &at(&format!("masks[{k}]"))))
            .collect::<Result<_, _>>()?;
        objects.push(AnnotatedObject {
            id: o.id,
            label: o.label.clone(),
            color: o.color,
            bbox: o.bbox,
            points: o.points.clone(),
            boxes: o
                .boxes
                .iter()
                .map(|b| {
                    b.map(|b| PixelBox {
                        x0: b[0],
                        y0: b[1],
                        x1: b[2],
                        y1: b[3],
                    })
                })
                .collect(),
            masks,
        });
    }
    Ok(SceneAnnotation {
        clip_id: j.clip_id,
        caption: j.caption,
        intrinsics,
        poses,
        depth: j.depth,
        objects,
        config: j.config,
        extra: j.extra,
    })
}

pub fn read_annotation(path: &Path) -> Result<SceneAnnotation, AnnotationError> {
    let text = std::fs::read_to_string(path).map_err(|e| AnnotationError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    annotation_from_json(&text)
}

pub fn write_annotation(path: &Path, a: &SceneAnnotation) -> Result<(), AnnotationError> {
    write_bytes_atomic(path, annotation_to_json(a).as_bytes()).map_err(|e| AnnotationError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}
