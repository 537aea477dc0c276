//! Interactive motion design state: a reference view lifted to a point
//! cloud, boxes fitted from 2D selections, a camera draft and object
//! keyframes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use mf_core::conditioning::{
    build_control_package_from, label_index, Box3D, ConditioningOptions, ControlSpec, ObjectMotion, ObjectSpec,
    VOCABULARY,
};
use mf_core::geometry::{axis_angle, mat_vec, unproject_depth, CameraIntrinsics, CameraPose, PointCloud, Vec3};
use mf_core::raster::{DepthMap, Image, Mask};

use crate::ServiceError;

/// Smallest half-extent of a fitted box, so flat selections stay valid.
pub const MIN_HALF_EXTENT: f64 = 0.01;
/// Points a selection must cover to fit a box.
pub const MIN_SELECTION_POINTS: usize = 4;
pub const REFERENCE_FILE: &str = "reference.png";
pub const DEPTH_FILE: &str = "depth.pfm";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionObject {
    pub label: String,
    pub bbox: Box3D,
    /// 1-based frame and box center, starting at frame 1.
    pub keyframes: Vec<(usize, Vec3<f64>)>,
}

#[derive(Clone, Debug)]
pub struct Session {
    pub id: String,
    pub image: Image,
    pub depth: DepthMap,
    pub intrinsics: CameraIntrinsics<f64>,
    pub cloud: PointCloud<f64>,
    pub num_frames: usize,
    pub objects: BTreeMap<u32, SessionObject>,
    /// Camera draft, one pose per frame.
    pub camera: Vec<CameraPose<f64>>,
    pub caption: String,
    pub seed: u64,
}

/// Pixels picked in the reference image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Inclusive pixel rectangle `[x0, y0, x1, y1]`.
    Rect([usize; 4]),
    /// Row-major mask over the reference image, from an external segmenter.
    Mask { width: usize, height: usize, data: Vec<bool> },
}

/// Camera panel values. Angles are in degrees. They are the deltas reached
/// at the last frame; earlier frames interpolate linearly from zero.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraPanel {
    /// Change of distance to the orbit anchor; positive moves away.
    pub distance: f64,
    /// Positive raises the camera above the anchor.
    pub elevation: f64,
    /// Positive swings the camera to its right around the anchor.
    pub azimuth: f64,
    /// Translation in reference-camera axes.
    pub offset: Vec3<f64>,
    /// Orbit anchor object; the cloud centroid when absent.
    pub anchor: Option<u32>,
}

impl Session {
    pub fn new(
        id: String,
        image: Image,
        depth: DepthMap,
        intrinsics: CameraIntrinsics<f64>,
        num_frames: usize,
    ) -> Result<Self, ServiceError> {
        if num_frames < 2 {
            return Err(ServiceError::BadRequest("num_frames must be at least 2".into()));
        }
        let cloud = unproject_depth(&depth, &intrinsics, &CameraPose::identity(), &image)
            .map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        if cloud.is_empty() {
            return Err(ServiceError::BadRequest("depth map has no valid pixels".into()));
        }
        Ok(Self {
            id,
            image,
            depth,
            intrinsics,
            cloud,
            num_frames,
            objects: BTreeMap::new(),
            camera: vec![CameraPose::identity(); num_frames],
            caption: String::new(),
            seed: 0,
        })
    }

    fn selected_pixels(&self, sel: &Selection) -> Result<Mask, ServiceError> {
        let (w, h) = (self.image.width, self.image.height);
        match sel {
            Selection::Rect([x0, y0, x1, y1]) => {
                if x0 > x1 || y0 > y1 || *x1 >= w || *y1 >= h {
                    return Err(ServiceError::BadRequest(format!(
                        "rectangle [{x0}, {y0}, {x1}, {y1}] is empty or outside the {w}x{h} image"
                    )));
                }
                let mut m = Mask::new(w, h, false);
                for y in *y0..=*y1 {
                    m.data[y * w + x0..=y * w + x1].fill(true);
                }
                Ok(m)
            }
            Selection::Mask { width, height, data } => {
                if (*width, *height) != (w, h) || data.len() != w * h {
                    return Err(ServiceError::BadRequest(format!(
                        "mask is {width}x{height} with {} values, image is {w}x{h}",
                        data.len()
                    )));
                }
                Ok(Mask {
                    width: w,
                    height: h,
                    data: data.clone(),
                })
            }
        }
    }

    /// Axis-aligned box over the 5th to 95th percentile of the cloud points
    /// under the selection.
    pub fn fit_box(&self, sel: &Selection) -> Result<Box3D, ServiceError> {
        let mask = self.selected_pixels(sel)?;
        let pts: Vec<&Vec3<f64>> = self
            .cloud
            .points
            .iter()
            .zip(&self.cloud.source_pixels)
            .filter(|(_, &px)| mask.data[px])
            .map(|(p, _)| p)
            .collect();
        if pts.len() < MIN_SELECTION_POINTS {
            return Err(ServiceError::BadRequest(format!(
                "selection covers {} pixels with valid depth, need at least {MIN_SELECTION_POINTS}",
                pts.len()
            )));
        }
        let mut center = [0.0; 3];
        let mut half = [0.0; 3];
        for axis in 0..3 {
            let mut v: Vec<f64> = pts.iter().map(|p| p[axis]).collect();
            v.sort_by(f64::total_cmp);
            let (lo, hi) = (percentile(&v, 0.05), percentile(&v, 0.95));
            center[axis] = 0.5 * (lo + hi);
            half[axis] = (0.5 * (hi - lo)).max(MIN_HALF_EXTENT);
        }
        Ok(Box3D {
            center,
            half_extents: half,
        })
    }

    /// Fits a box and registers it under the next free id.
    pub fn add_object(&mut self, label: &str, sel: &Selection) -> Result<(u32, Box3D), ServiceError> {
        if label_index(label).is_none() {
            return Err(ServiceError::BadRequest(format!(
                "unknown label {label:?}; known labels: {}",
                VOCABULARY.join(", ")
            )));
        }
        let bbox = self.fit_box(sel)?;
        let id = self.objects.keys().next_back().map_or(1, |k| k + 1);
        self.objects.insert(
            id,
            SessionObject {
                label: label.to_string(),
                bbox,
                keyframes: vec![(1, bbox.center)],
            },
        );
        Ok((id, bbox))
    }

    /// Orbit anchor: the chosen object's center, else the cloud centroid.
    pub fn anchor(&self, object: Option<u32>) -> Result<Vec3<f64>, ServiceError> {
        match object {
            Some(id) => self
                .objects
                .get(&id)
                .map(|o| o.bbox.center)
                .ok_or_else(|| ServiceError::NotFound(format!("object {id}"))),
            None => Ok(self.cloud.centroid().expect("cloud is never empty")),
        }
    }

    /// Converts panel values into one camera-to-world pose per frame.
    pub fn panel_poses(&self, panel: &CameraPanel) -> Result<Vec<CameraPose<f64>>, ServiceError> {
        let vals = [panel.distance, panel.elevation, panel.azimuth, panel.offset[0], panel.offset[1], panel.offset[2]];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(ServiceError::BadRequest("camera panel values must be finite".into()));
        }
        if !(-90.0..=90.0).contains(&panel.elevation) {
            return Err(ServiceError::BadRequest(format!(
                "elevation {} is outside [-90, 90] degrees",
                panel.elevation
            )));
        }
        let anchor = self.anchor(panel.anchor)?;
        let r0 = mf_core::geometry::norm(&anchor);
        if r0 + panel.distance.min(0.0) <= 0.05 {
            return Err(ServiceError::BadRequest(format!(
                "distance change {} would pass through the anchor at range {r0:.3}",
                panel.distance
            )));
        }
        let n = self.num_frames;
        Ok((0..n)
            .map(|j| {
                let s = j as f64 / (n - 1) as f64;
                let rot = mf_core::geometry::mat_mul(
                    &axis_angle([0.0, 1.0, 0.0], -(panel.azimuth * s).to_radians()),
                    &axis_angle([1.0, 0.0, 0.0], -(panel.elevation * s).to_radians()),
                );
                let radial = mat_vec(&rot, &anchor.map(|a| -a));
                let k = (r0 + panel.distance * s) / r0;
                let center = std::array::from_fn(|i| anchor[i] + radial[i] * k + panel.offset[i] * s);
                CameraPose::new(rot, center)
            })
            .collect())
    }

    /// Replaces the keyframes of object `id`. Frames are 1-based and must
    /// start at 1 and increase.
    pub fn set_keyframes(&mut self, id: u32, keyframes: Vec<(usize, Vec3<f64>)>) -> Result<(), ServiceError> {
        let n = self.num_frames;
        let obj = self
            .objects
            .get_mut(&id)
            .ok_or_else(|| ServiceError::NotFound(format!("object {id}")))?;
        if keyframes.first().map(|k| k.0) != Some(1)
            || keyframes.windows(2).any(|w| w[1].0 <= w[0].0)
            || keyframes.iter().any(|k| k.0 > n || k.1.iter().any(|v| !v.is_finite()))
        {
            return Err(ServiceError::BadRequest(format!(
                "keyframes of object {id} must start at frame 1, increase, stay within {n} frames and be finite"
            )));
        }
        obj.keyframes = keyframes;
        Ok(())
    }

    /// The control spec for the current draft. Image paths are relative to
    /// the session directory.
    pub fn spec(&self) -> ControlSpec {
        let caption = if self.caption.is_empty() {
            let labels: Vec<&str> = self.objects.values().map(|o| o.label.as_str()).collect();
            if labels.is_empty() {
                "a scene".to_string()
            } else {
                format!("a {}", labels.join(" and a "))
            }
        } else {
            self.caption.clone()
        };
        ControlSpec {
            reference_image: REFERENCE_FILE.into(),
            depth_map: DEPTH_FILE.into(),
            intrinsics: self.intrinsics,
            num_frames: self.num_frames,
            camera: self.camera.clone(),
            objects: self
                .objects
                .iter()
                .map(|(&id, o)| ObjectSpec {
                    id,
                    label: o.label.clone(),
                    motion: ObjectMotion::Keyframes {
                        bbox: o.bbox,
                        keyframes: o.keyframes.clone(),
                    },
                })
                .collect(),
            caption,
            seed: self.seed,
        }
    }

    /// Guidance frames with box outlines for the current draft, every
    /// `stride`-th frame.
    pub fn preview(&self, stride: usize) -> Result<Vec<Image>, ServiceError> {
        if stride == 0 {
            return Err(ServiceError::BadRequest("stride must be at least 1".into()));
        }
        let opts = ConditioningOptions {
            stride,
            ..ConditioningOptions::default()
        };
        let pkg = build_control_package_from(&self.spec(), &self.image, &self.depth, &opts)
            .map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        Ok(pkg.guidance.frames.into_iter().step_by(stride).collect())
    }
}

/// Linear-interpolated percentile of sorted values.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (i, f) = (pos.floor() as usize, pos.fract());
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - f) + sorted[i + 1] * f
    } else {
        sorted[i]
    }
}
