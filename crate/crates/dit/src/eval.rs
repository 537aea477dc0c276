//! Scoring a trained model on a held-out dataset.

use std::path::Path;

use mf_core::io::write_frames;
use mf_core::metrics::{background_shift_error, evaluate, EvalMode, MetricsReport};
use mf_core::synth::{load_clip, read_index, CameraMotion, Clip, OBJECT_PALETTE};
use mf_core::tensor::ParamStore;

use crate::generate::generate_from_spec;
use crate::model::{Branches, DitModel};
use crate::DitError;

/// Largest background shift searched, as a fraction of the frame width.
const MAX_SHIFT_FRACTION: usize = 4;

/// One held-out clip's scores.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipScore {
    pub report: MetricsReport,
    pub camera_motion: Option<CameraMotion>,
    /// Commanded-vs-realized background shift error in pixels.
    pub shift_error: f64,
}

fn format_err(path: &Path, e: impl ToString) -> DitError {
    DitError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Loads every clip listed in `dir/index.json`.
pub fn load_dataset(dir: &Path) -> Result<Vec<Clip>, DitError> {
    let index = read_index(&dir.join("index.json")).map_err(|e| format_err(dir, e))?;
    index
        .clips
        .iter()
        .map(|c| load_clip(&dir.join(&c.id)).map_err(|e| format_err(dir, e)))
        .collect()
}

/// Generates each clip from its own control spec and scores it. With
/// `save_dir`, the frames of clip `id` are written to `save_dir/id`.
pub fn evaluate_clips(
    model: &DitModel,
    store: &ParamStore<f32>,
    clips: &[Clip],
    steps: usize,
    branches: Branches,
    save_dir: Option<&Path>,
) -> Result<Vec<ClipScore>, DitError> {
    let exclude: Vec<[f32; 3]> = OBJECT_PALETTE.iter().map(|p| p.1).collect();
    clips
        .iter()
        .map(|clip| {
            let spec = clip.spec();
            let video = generate_from_spec(model, store, &spec, &clip.dir, steps, branches)?;
            if let Some(root) = save_dir {
                let dir = root.join(&clip.annotation.clip_id);
                write_frames(&dir, &video).map_err(|e| format_err(&dir, e))?;
            }
            let report = evaluate(&spec, &video, &clip.annotation, EvalMode::Generated)
                .map_err(|e| format_err(&clip.dir, e))?;
            let max_shift = clip.annotation.intrinsics.width / MAX_SHIFT_FRACTION;
            let shift_error =
                background_shift_error(&video, &clip.frames, &exclude, max_shift).map_err(|e| format_err(&clip.dir, e))?;
            Ok(ClipScore {
                report,
                camera_motion: clip.annotation.config.as_ref().map(|c| c.camera_motion),
                shift_error,
            })
        })
        .collect()
}

/// Mean Box-IoU over clips that have one.
pub fn mean_box_iou(scores: &[ClipScore]) -> Option<f64> {
    let v: Vec<f64> = scores.iter().filter_map(|s| s.report.box_iou).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Mean background shift error over clips with the given camera motion.
pub fn mean_shift_error(scores: &[ClipScore], motion: CameraMotion) -> Option<f64> {
    let v: Vec<f64> = scores
        .iter()
        .filter(|s| s.camera_motion == Some(motion))
        .map(|s| s.shift_error)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}
