use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{generate_scene, mix, read_annotation, write_annotation, CameraMotion, ObjectMotionFamily, SceneAnnotation, SceneConfig, SceneOutput};
use crate::conditioning::{spec_to_json, ControlSpec, ObjectMotion, ObjectSpec};
use crate::io::{read_frames, read_pfm, write_frames, write_pfm};
use crate::raster::{DepthMap, Image};
use crate::tensor::write_bytes_atomic;

pub const INDEX_SCHEMA: &str = "rc-index-1";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("clip {clip}: {msg}")]
    Clip { clip: String, msg: String },
    #[error("dataset index {path}: {msg}")]
    Index { path: String, msg: String },
}

fn clip_err(clip: &str, e: impl ToString) -> DatasetError {
    DatasetError::Clip {
        clip: clip.to_string(),
        msg: e.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetOptions {
    pub num_frames: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub camera_families: Vec<CameraMotion>,
    pub object_families: Vec<ObjectMotionFamily>,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Worker threads; 0 picks the available parallelism.
    #[serde(skip)]
    pub threads: usize,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            num_frames: 17,
            width: 64,
            height: 64,
            focal: 64.0,
            camera_families: CameraMotion::ALL.to_vec(),
            object_families: ObjectMotionFamily::ALL.to_vec(),
            min_objects: 1,
            max_objects: 2,
            threads: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub seed: u64,
    pub config: SceneConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub schema: String,
    pub base_seed: u64,
    pub options: DatasetOptions,
    pub clips: Vec<IndexEntry>,
}

/// Scene config for clip `index` of a dataset. Families and object count are
/// drawn from the clip's own seed.
pub fn derive_scene_config(base_seed: u64, index: usize, opts: &DatasetOptions) -> SceneConfig {
    let seed = mix(base_seed, index as u64 + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = opts.camera_families[rng.random_range(0..opts.camera_families.len())];
    let obj = opts.object_families[rng.random_range(0..opts.object_families.len())];
    SceneConfig {
        seed,
        num_frames: opts.num_frames,
        width: opts.width,
        height: opts.height,
        focal: opts.focal,
        camera_motion: cam,
        num_objects: rng.random_range(opts.min_objects..=opts.max_objects),
        object_motion: obj,
        ..SceneConfig::default()
    }
}

/// A clip loaded back from disk.
#[derive(Clone, Debug)]
pub struct Clip {
    pub dir: PathBuf,
    pub frames: Vec<Image>,
    pub depth: DepthMap,
    pub annotation: SceneAnnotation,
}

impl Clip {
    pub fn spec(&self) -> ControlSpec {
        spec_for_clip(&self.annotation)
    }
}

/// The control spec that commands exactly the clip's ground-truth motion.
pub fn spec_for_clip(a: &SceneAnnotation) -> ControlSpec {
    ControlSpec {
        reference_image: "frames/000.png".into(),
        depth_map: a.depth.clone(),
        intrinsics: a.intrinsics,
        num_frames: a.poses.len(),
        camera: a.poses.clone(),
        objects: a
            .objects
            .iter()
            .map(|o| ObjectSpec {
                id: o.id,
                label: o.label.clone(),
                motion: ObjectMotion::Points(o.points.clone()),
            })
            .collect(),
        caption: a.caption.clone(),
        seed: a.config.as_ref().map_or(0, |c| c.seed),
    }
}

/// Writes `frames/NNN.png`, `depth0.pfm`, `caption.txt`, `spec.json` and,
/// last, `annotation.json` (its presence marks the clip complete).
pub fn write_clip(dir: &Path, out: &SceneOutput) -> Result<(), DatasetError> {
    let id = dir.display().to_string();
    write_frames(&dir.join("frames"), &out.frames).map_err(|e| clip_err(&id, e))?;
    write_pfm(&dir.join(&out.annotation.depth), &out.depth).map_err(|e| clip_err(&id, e))?;
    write_bytes_atomic(&dir.join("caption.txt"), format!("{}\n", out.annotation.caption).as_bytes())
        .map_err(|e| clip_err(&id, e))?;
    let spec = spec_for_clip(&out.annotation);
    write_bytes_atomic(&dir.join("spec.json"), spec_to_json(&spec).as_bytes()).map_err(|e| clip_err(&id, e))?;
    write_annotation(&dir.join("annotation.json"), &out.annotation).map_err(|e| clip_err(&id, e))
}

pub fn load_clip(dir: &Path) -> Result<Clip, DatasetError> {
    let id = dir.display().to_string();
    let annotation = read_annotation(&dir.join("annotation.json")).map_err(|e| clip_err(&id, e))?;
    let frames = read_frames(&dir.join("frames")).map_err(|e| clip_err(&id, e))?;
    let depth = read_pfm(&dir.join(&annotation.depth)).map_err(|e| clip_err(&id, e))?;
    if frames.len() != annotation.poses.len() {
        return Err(clip_err(
            &id,
            format!("{} frames on disk, annotation lists {}", frames.len(), annotation.poses.len()),
        ));
    }
    Ok(Clip {
        dir: dir.to_path_buf(),
        frames,
        depth,
        annotation,
    })
}

pub fn read_index(path: &Path) -> Result<DatasetIndex, DatasetError> {
    let err = |m: String| DatasetError::Index {
        path: path.display().to_string(),
        msg: m,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let idx: DatasetIndex = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
    if idx.schema != INDEX_SCHEMA {
        return Err(err(format!("expected schema \"{INDEX_SCHEMA}\", found \"{}\"", idx.schema)));
    }
    Ok(idx)
}

/// Generates `count` clips under `out_dir` plus `index.json`. Clips whose
/// annotation already exists are skipped, so interrupted runs can resume.
pub fn make_dataset(count: usize, base_seed: u64, out_dir: &Path, opts: &DatasetOptions) -> Result<DatasetIndex, DatasetError> {
    if count == 0 {
        return Err(DatasetError::Index {
            path: out_dir.display().to_string(),
            msg: "count must be at least 1".into(),
        });
    }
    if opts.camera_families.is_empty() || opts.object_families.is_empty() || opts.min_objects > opts.max_objects {
        return Err(DatasetError::Index {
            path: out_dir.display().to_string(),
            msg: "options need at least one camera and object family and min_objects <= max_objects".into(),
        });
    }
    let clips: Vec<IndexEntry> = (0..count)
        .map(|i| {
            let config = derive_scene_config(base_seed, i, opts);
            IndexEntry {
                id: format!("clip_{i:04}"),
                seed: config.seed,
                config,
            }
        })
        .collect();
    let todo: Vec<&IndexEntry> = clips
        .iter()
        .filter(|c| !out_dir.join(&c.id).join("annotation.json").exists())
        .collect();
    let threads = match opts.threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        t => t,
    }
    .min(todo.len().max(1));
    let results: Vec<Result<(), DatasetError>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let todo = &todo;
                s.spawn(move || {
                    todo.iter()
                        .skip(t)
                        .step_by(threads)
                        .map(|c| {
                            let out = generate_scene(&c.config).map_err(|e| clip_err(&c.id, e))?;
                            write_clip(&out_dir.join(&c.id), &out)
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("clip worker panicked")).collect()
    });
    results.into_iter().collect::<Result<Vec<()>, _>>()?;

    let index = DatasetIndex {
        schema: INDEX_SCHEMA.into(),
        base_seed,
        options: opts.clone(),
        clips,
    };
    let path = out_dir.join("index.json");
    let bytes = serde_json::to_vec_pretty(&index).expect("index serializes");
    if std::fs::read(&path).ok().as_deref() != Some(&bytes[..]) {
        write_bytes_atomic(&path, &bytes).map_err(|e| DatasetError::Index {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
    }
    Ok(index)
}
