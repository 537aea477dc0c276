//! Motion-control metrics: similarity-aligned camera translation error,
//! relative rotation error, Box-IoU of color-recovered object boxes, and
//! background shift by cross-correlation.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditioning::{commanded_boxes, BoxSequence2D, ConditioningError, ControlSpec, PixelBox};
use crate::geometry::{rotation_angle, CameraPose, Mat3, Vec3};
use crate::raster::{Image, Mask};
use crate::synth::{color_for_label, SceneAnnotation};

/// Euclidean RGB distance under which a pixel counts as an object's color.
pub const COLOR_TOLERANCE: f32 = 60.0 / 255.0;
/// Recovered masks smaller than this many pixels mark the object invisible.
pub const MIN_VISIBLE_AREA: usize = 4;
/// Center spread (squared world units) below which alignment is degenerate.
const DEGENERATE_VARIANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{what}: expected {expected} frames, found {found}")]
    FrameCount {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("trajectories are empty")]
    Empty,
    #[error("no color known for object {0}")]
    MissingObject(u32),
    #[error(transparent)]
    Conditioning(#[from] ConditioningError),
}

fn check_len(what: &'static str, expected: usize, found: usize) -> Result<(), MetricsError> {
    if expected == found {
        Ok(())
    } else {
        Err(MetricsError::FrameCount { what, expected, found })
    }
}

/// Estimated and reference camera paths of equal length, both re-expressed
/// relative to their first frame.
#[derive(Clone, Debug)]
pub struct TrajectoryPair {
    estimated: Vec<CameraPose<f64>>,
    reference: Vec<CameraPose<f64>>,
}

fn relative_to_first(poses: &[CameraPose<f64>]) -> Vec<CameraPose<f64>> {
    let inv0 = poses[0].inverse();
    std::iter::once(CameraPose::identity())
        .chain(poses[1..].iter().map(|p| inv0.compose(p)))
        .collect()
}

impl TrajectoryPair {
    pub fn new(estimated: &[CameraPose<f64>], reference: &[CameraPose<f64>]) -> Result<Self, MetricsError> {
        check_len("estimated trajectory", reference.len(), estimated.len())?;
        if reference.is_empty() {
            return Err(MetricsError::Empty);
        }
        Ok(Self {
            estimated: relative_to_first(estimated),
            reference: relative_to_first(reference),
        })
    }

    pub fn len(&self) -> usize {
        self.reference.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reference.is_empty()
    }

    pub fn estimated(&self) -> &[CameraPose<f64>] {
        &self.estimated
    }

    pub fn reference(&self) -> &[CameraPose<f64>] {
        &self.reference
    }
}

/// `x ↦ s·R·x + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Mat3<f64>,
    pub translation: Vec3<f64>,
    /// Set when either point set had no spread and only a translation was fitted.
    pub degenerate: bool,
}

impl Similarity {
    pub fn apply(&self, p: &Vec3<f64>) -> Vec3<f64> {
        let r = &self.rotation;
        std::array::from_fn(|i| {
            self.scale * (r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2]) + self.translation[i]
        })
    }
}

fn to_na(p: &Vec3<f64>) -> Vector3<f64> {
    Vector3::new(p[0], p[1], p[2])
}

/// Least-squares similarity taking `est` onto `reference`.
pub fn umeyama_align(est: &[Vec3<f64>], reference: &[Vec3<f64>]) -> Result<Similarity, MetricsError> {
    check_len("estimated centers", reference.len(), est.len())?;
    if est.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = est.len() as f64;
    let mu_e = est.iter().map(to_na).sum::<Vector3<f64>>() / n;
    let mu_r = reference.iter().map(to_na).sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let (mut var_e, mut var_r) = (0.0, 0.0);
    for (e, r) in est.iter().zip(reference) {
        let (de, dr) = (to_na(e) - mu_e, to_na(r) - mu_r);
        cov += dr * de.transpose();
        var_e += de.norm_squared();
        var_r += dr.norm_squared();
    }
    let (cov, var_e, var_r) = (cov / n, var_e / n, var_r / n);

    if var_e < DEGENERATE_VARIANCE || var_r < DEGENERATE_VARIANCE {
        let t = mu_r - mu_e;
        return Ok(Similarity {
            scale: 1.0,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [t.x, t.y, t.z],
            degenerate: true,
        });
    }

    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut s = Vector3::new(1.0, 1.0, 1.0);
    if u.determinant() * v_t.determinant() < 0.0 {
        s.z = -1.0;
    }
    let rot = u * Matrix3::from_diagonal(&s) * v_t;
    let scale = svd.singular_values.dot(&s) / var_e;
    let t = mu_r - scale * rot * mu_e;
    Ok(Similarity {
        scale,
        rotation: std::array::from_fn(|i| std::array::from_fn(|j| rot[(i, j)])),
        translation: [t.x, t.y, t.z],
        degenerate: false,
    })
}

/// Mean distance between aligned estimated camera centers and reference
/// centers, plus the alignment used.
pub fn cam_trans_err_detail(pair: &TrajectoryPair) -> Result<(f64, Similarity), MetricsError> {
    let est: Vec<_> = pair.estimated.iter().map(CameraPose::center).collect();
    let reference: Vec<_> = pair.reference.iter().map(CameraPose::center).collect();
    let sim = umeyama_align(&est, &reference)?;
    let total: f64 = est
        .iter()
        .zip(&reference)
        .map(|(e, r)| {
            let a = sim.apply(e);
            ((a[0] - r[0]).powi(2) + (a[1] - r[1]).powi(2) + (a[2] - r[2]).powi(2)).sqrt()
        })
        .sum();
    Ok((total / est.len() as f64, sim))
}

pub fn cam_trans_err(pair: &TrajectoryPair) -> Result<f64, MetricsError> {
    cam_trans_err_detail(pair).map(|(e, _)| e)
}

/// Mean geodesic angle between first-frame-relative rotations over frames
/// after the first. A global alignment rotation cancels in the relative
/// rotations, so none is applied. Single-frame paths score 0.
pub fn cam_rot_err(pair: &TrajectoryPair) -> Result<f64, MetricsError> {
    let n = pair.len();
    if n < 2 {
        return Ok(0.0);
    }
    let total: f64 = pair.estimated[1..]
        .iter()
        .zip(&pair.reference[1..])
        .map(|(e, r)| rotation_angle(&e.rotation, &r.rotation))
        .sum();
    Ok(total / (n - 1) as f64)
}

/// Pixels within [`COLOR_TOLERANCE`] of `color`.
pub fn color_mask(frame: &Image, color: [f32; 3]) -> Mask {
    let mut m = Mask::new(frame.width, frame.height, false);
    for y in 0..frame.height {
        for x in 0..frame.width {
            let p = frame.get(x, y);
            let d2: f32 = (0..3).map(|c| (p[c] - color[c]).powi(2)).sum();
            m.data[y * frame.width + x] = d2 <= COLOR_TOLERANCE * COLOR_TOLERANCE;
        }
    }
    m
}

/// Tight box around the set pixels, or `None` below [`MIN_VISIBLE_AREA`].
pub fn mask_box(m: &Mask) -> Option<PixelBox> {
    if m.count() < MIN_VISIBLE_AREA {
        return None;
    }
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..m.height {
        for x in 0..m.width {
            if m.get(x, y) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    Some(PixelBox {
        x0: x0 as f64 - 0.5,
        y0: y0 as f64 - 0.5,
        x1: x1 as f64 + 0.5,
        y1: y1 as f64 + 0.5,
    })
}

/// Per-object box sequences found by color thresholding each frame.
pub fn recover_boxes(video: &[Image], objects: &[(u32, [f32; 3])]) -> Vec<BoxSequence2D> {
    objects
        .iter()
        .map(|&(id, color)| BoxSequence2D {
            object_id: id,
            boxes: video.iter().map(|f| mask_box(&color_mask(f, color))).collect(),
        })
        .collect()
}

/// Per-frame IoU terms: frames invisible in `gt` are skipped, frames missing
/// from `pred` score 0.
fn iou_terms(pred: &BoxSequence2D, gt: &BoxSequence2D) -> Result<Vec<f64>, MetricsError> {
    check_len("predicted boxes", gt.boxes.len(), pred.boxes.len())?;
    Ok(gt
        .boxes
        .iter()
        .zip(&pred.boxes)
        .filter_map(|(g, p)| g.map(|g| p.map_or(0.0, |p| p.iou(&g))))
        .collect())
}

/// Mean IoU over frames where `gt` is visible; `None` if there are none.
pub fn box_iou_sequence(pred: &BoxSequence2D, gt: &BoxSequence2D) -> Result<Option<f64>, MetricsError> {
    let terms = iou_terms(pred, gt)?;
    Ok((!terms.is_empty()).then(|| terms.iter().sum::<f64>() / terms.len() as f64))
}

/// Background luminance of `frame`, with pixels near any of `exclude`
/// (object colors) marked invalid.
fn background(frame: &Image, exclude: &[[f32; 3]]) -> (Vec<f64>, Vec<bool>) {
    let masks: Vec<Mask> = exclude.iter().map(|c| color_mask(frame, *c)).collect();
    let n = frame.width * frame.height;
    let valid: Vec<bool> = (0..n).map(|i| !masks.iter().any(|m| m.data[i])).collect();
    let luma = frame
        .data
        .chunks(3)
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect();
    (luma, valid)
}

/// Integer shift `(dx, dy)`, within `max_shift` on each axis, that best
/// aligns the background of `to` with that of `from`: `to(x + dx, y + dy)`
/// matches `from(x, y)`. The score is the correlation coefficient over the
/// overlap; ties go to the smaller shift.
pub fn background_shift(from: &Image, to: &Image, exclude: &[[f32; 3]], max_shift: usize) -> Option<(i64, i64)> {
    let (w, h) = (from.width as i64, from.height as i64);
    if (to.width, to.height) != (from.width, from.height) {
        return None;
    }
    let (a, va) = background(from, exclude);
    let (b, vb) = background(to, exclude);
    let min_overlap = (w * h / 4).max(1) as usize;
    let m = max_shift as i64;
    let mut best: Option<(f64, i64, (i64, i64))> = None;
    for dy in -m..=m {
        for dx in -m..=m {
            let (mut n, mut sa, mut sb, mut saa, mut sbb, mut sab) = (0usize, 0.0, 0.0, 0.0, 0.0, 0.0);
            for y in 0.max(-dy)..h.min(h - dy) {
                for x in 0.max(-dx)..w.min(w - dx) {
                    let i = (y * w + x) as usize;
                    let j = ((y + dy) * w + x + dx) as usize;
                    if va[i] && vb[j] {
                        n += 1;
                        sa += a[i];
                        sb += b[j];
                        saa += a[i] * a[i];
                        sbb += b[j] * b[j];
                        sab += a[i] * b[j];
                    }
                }
            }
            if n < min_overlap {
                continue;
            }
            let nf = n as f64;
            let cov = sab - sa * sb / nf;
            let var = (saa - sa * sa / nf) * (sbb - sb * sb / nf);
            let score = if var > 1e-12 { cov / var.sqrt() } else { 0.0 };
            let size = dx.abs() + dy.abs();
            let better = match best {
                None => true,
                Some((s, sz, _)) => score > s + 1e-12 || ((score - s).abs() <= 1e-12 && size < sz),
            };
            if better {
                best = Some((score, size, (dx, dy)));
            }
        }
    }
    best.map(|b| b.2)
}

/// Mean distance in pixels between the background shifts of `video` and
/// those of `reference`, each frame measured against the first one.
pub fn background_shift_error(
    video: &[Image],
    reference: &[Image],
    exclude: &[[f32; 3]],
    max_shift: usize,
) -> Result<f64, MetricsError> {
    check_len("video", reference.len(), video.len())?;
    if video.len() < 2 {
        return Err(MetricsError::Empty);
    }
    let shifts = |frames: &[Image]| -> Vec<(i64, i64)> {
        frames[1..]
            .iter()
            .map(|f| background_shift(&frames[0], f, exclude, max_shift).unwrap_or((0, 0)))
            .collect()
    };
    let (got, want) = (shifts(video), shifts(reference));
    let total: f64 = got
        .iter()
        .zip(&want)
        .map(|(g, r)| (((g.0 - r.0).pow(2) + (g.1 - r.1).pow(2)) as f64).sqrt())
        .sum();
    Ok(total / got.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EvalMode {
    /// The video came from a generator; no camera path can be read back.
    #[default]
    Generated,
    /// The video is ground truth, so the commanded camera path is compared
    /// with the annotated one.
    Conditioning,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub clip_id: String,
    pub cam_trans_err: Option<f64>,
    pub cam_rot_err: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub box_iou: Option<f64>,
    pub fid: Option<f64>,
    pub fvd: Option<f64>,
    pub clipsim: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Scores `video` against the boxes `spec` commands. Commanded boxes are
/// snapped to whole pixels, the resolution at which boxes can be recovered.
pub fn evaluate(
    spec: &ControlSpec,
    video: &[Image],
    annotation: &SceneAnnotation,
    mode: EvalMode,
) -> Result<MetricsReport, MetricsError> {
    check_len("video", spec.num_frames, video.len())?;
    check_len("annotation poses", spec.num_frames, annotation.poses.len())?;
    let mut warnings = Vec::new();

    let commanded = commanded_boxes(spec, 0.0)?;
    let mut colors = Vec::new();
    for seq in &commanded {
        let from_ann = annotation.objects.iter().find(|o| o.id == seq.object_id).map(|o| o.color);
        let from_label = spec
            .objects
            .iter()
            .find(|o| o.id == seq.object_id)
            .and_then(|o| color_for_label(&o.label));
        colors.push((
            seq.object_id,
            from_ann.or(from_label).ok_or(MetricsError::MissingObject(seq.object_id))?,
        ));
    }
    let recovered = recover_boxes(video, &colors);
    let mut terms = Vec::new();
    for (gt, pred) in commanded.iter().zip(&recovered) {
        let snapped = BoxSequence2D {
            object_id: gt.object_id,
            boxes: gt.boxes.iter().map(|b| b.map(|b| b.snapped())).collect(),
        };
        terms.extend(iou_terms(pred, &snapped)?);
    }
    let box_iou = (!terms.is_empty()).then(|| terms.iter().sum::<f64>() / terms.len() as f64);

    let (cam_trans_err, cam_rot_err) = match mode {
        EvalMode::Generated => (None, None),
        EvalMode::Conditioning => {
            let pair = TrajectoryPair::new(&spec.camera, &annotation.poses)?;
            let (te, sim) = cam_trans_err_detail(&pair)?;
            if sim.degenerate {
                warnings.push("camera centers have no spread; translation-only alignment used".into());
            }
            (Some(te), Some(cam_rot_err(&pair)?))
        }
    };
    Ok(MetricsReport {
        clip_id: annotation.clip_id.clone(),
        cam_trans_err,
        cam_rot_err,
        box_iou,
        fid: None,
        fvd: None,
        clipsim: None,
        warnings,
    })
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per clip plus a `mean` row; missing values are empty cells and
/// are left out of the means.
pub fn aggregate_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from("clip_id,cam_trans_err,cam_rot_err,box_iou\n");
    for r in reports {
        out += &format!(
            "{},{},{},{}\n",
            r.clip_id,
            cell(r.cam_trans_err),
            cell(r.cam_rot_err),
            cell(r.box_iou)
        );
    }
    out += &format!(
        "mean,{},{},{}\n",
        cell(mean_of(reports.iter().map(|r| r.cam_trans_err))),
        cell(mean_of(reports.iter().map(|r| r.cam_rot_err))),
        cell(mean_of(reports.iter().map(|r| r.box_iou)))
    );
    out
}

/// Aggregate line in table units: Box-IoU as a percentage.
pub fn format_summary(reports: &[MetricsReport]) -> String {
    let fmt = |v: Option<f64>, scale: f64, prec: usize| v.map_or("n/a".to_string(), |x| format!("{:.*}", prec, x * scale));
    format!(
        "clips {}  CamTransErr {}  CamRotErr {}  Box-IoU {}",
        reports.len(),
        fmt(mean_of(reports.iter().map(|r| r.cam_trans_err)), 1.0, 3),
        fmt(mean_of(reports.iter().map(|r| r.cam_rot_err)), 1.0, 3),
        fmt(mean_of(reports.iter().map(|r| r.box_iou)), 100.0, 2)
    )
}
