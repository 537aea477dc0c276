//! Sampling videos from a trained run directory.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mf_core::conditioning::{build_control_package, ConditioningOptions, ControlPackage, ControlSpec};
use mf_core::io::read_png;
use mf_core::raster::Image;
use mf_core::tensor::{read_checkpoint, ParamStore, Tensor};
use mf_core::Scalar;

use crate::flow::{euler_sample, gaussian, VelocityField};
use crate::latent::tensor_frames;
use crate::model::{Branches, DitModel};
use crate::train::{read_run_config, WEIGHTS_FILE};
use crate::{CondInputs, DitError};

pub const DEFAULT_STEPS: usize = 20;

/// The trained model as a velocity field for one conditioning.
pub struct ModelVelocity<'a, T> {
    pub model: &'a DitModel,
    pub store: &'a ParamStore<T>,
    pub cond: &'a CondInputs<T>,
    pub branches: Branches,
}

impl<T: Scalar> VelocityField<T> for ModelVelocity<'_, T> {
    fn velocity(&mut self, z: &Tensor<T>, t: T) -> Result<Tensor<T>, DitError> {
        self.model.velocity(self.store, z, t, self.cond, self.branches)
    }
}

struct Reporting<'a, 'b> {
    inner: ModelVelocity<'a, f32>,
    calls: usize,
    on_step: &'b mut dyn FnMut(usize) -> bool,
}

impl VelocityField<f32> for Reporting<'_, '_> {
    fn velocity(&mut self, z: &Tensor<f32>, t: f32) -> Result<Tensor<f32>, DitError> {
        if !(self.on_step)(self.calls) {
            return Err(DitError::Cancelled);
        }
        self.calls += 1;
        self.inner.velocity(z, t)
    }
}

/// Loads `config.json` and `weights.ckpt` from a run directory, or a
/// specific weights file when `weights` is given.
pub fn load_model(run_dir: &Path, weights: Option<&Path>) -> Result<(DitModel, ParamStore<f32>), DitError> {
    let run = read_run_config(run_dir)?;
    let (model, mut store) = DitModel::new(run.model)?;
    let path = weights.map_or_else(|| run_dir.join(WEIGHTS_FILE), Path::to_path_buf);
    read_checkpoint(&path, &mut store)?;
    Ok((model, store))
}

/// Denoises seeded noise with `steps` Euler steps and decodes to frames
/// quantized to 8 bits.
pub fn generate(
    model: &DitModel,
    store: &ParamStore<f32>,
    cond: &CondInputs<f32>,
    steps: usize,
    seed: u64,
    branches: Branches,
) -> Result<Vec<Image>, DitError> {
    generate_with_progress(model, store, cond, steps, seed, branches, &mut |_| true)
}

/// [`generate`] reporting each finished step to `on_step`; returning
/// `false` from it cancels the run.
pub fn generate_with_progress(
    model: &DitModel,
    store: &ParamStore<f32>,
    cond: &CondInputs<f32>,
    steps: usize,
    seed: u64,
    branches: Branches,
    on_step: &mut dyn FnMut(usize) -> bool,
) -> Result<Vec<Image>, DitError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = gaussian::<f32>(&model.config.latent_shape(), &mut rng);
    let mut field = Reporting {
        inner: ModelVelocity {
            model,
            store,
            cond,
            branches,
        },
        calls: 0,
        on_step,
    };
    let latent = euler_sample(&mut field, noise, steps)?;
    if !(field.on_step)(steps) {
        return Err(DitError::Cancelled);
    }
    let video = model.decode(store, &latent)?;
    let mut frames = tensor_frames(&video);
    for f in &mut frames {
        for v in &mut f.data {
            *v = (*v * 255.0).round() / 255.0;
        }
    }
    Ok(frames)
}

/// Builds the control package for `spec` (paths relative to `base_dir`).
pub fn prepare_spec(
    model: &DitModel,
    spec: &ControlSpec,
    base_dir: &Path,
) -> Result<(ControlPackage, CondInputs<f32>), DitError> {
    let cfg = &model.config;
    let opts = ConditioningOptions {
        stride: cfg.stride,
        num_points: cfg.num_points,
        ..ConditioningOptions::default()
    };
    let pkg = build_control_package(spec, base_dir, &opts)?;
    let reference = read_png(&base_dir.join(&spec.reference_image))
        .map_err(|e| DitError::Conditioning(e.into()))?;
    let cond = CondInputs::from_package(&pkg, &reference, &spec.caption, cfg)?;
    Ok((pkg, cond))
}

/// Generates the video a spec commands, seeded by the spec.
pub fn generate_from_spec(
    model: &DitModel,
    store: &ParamStore<f32>,
    spec: &ControlSpec,
    base_dir: &Path,
    steps: usize,
    branches: Branches,
) -> Result<Vec<Image>, DitError> {
    let (_, cond) = prepare_spec(model, spec, base_dir)?;
    generate(model, store, &cond, steps, spec.seed, branches)
}
