use mf_core::conditioning::{caption_tokens, ControlPackage};
use mf_core::raster::Image;
use mf_core::tensor::Tensor;
use mf_core::Scalar;

use crate::config::{ModelConfig, CHANNELS, GUIDANCE_CHANNELS, PLUCKER_CHANNELS};
use crate::latent::{patchify, video_tensor};
use crate::DitError;

/// Model-ready conditioning for one clip, already laid out as token rows.
#[derive(Clone, Debug, PartialEq)]
pub struct CondInputs<T> {
    /// Reference frame patches `[P, (pool·patch)²·3]`.
    pub reference: Tensor<T>,
    pub caption: Vec<usize>,
    /// Guidance renders (RGB and coverage) at latent frames, `[L, (pool·patch)²·4]`.
    pub guidance: Tensor<T>,
    /// Plücker rays pooled to latent resolution, `[L, patch²·6]`.
    pub plucker: Tensor<T>,
    /// Object trajectory tokens `[M·Ñ, 3·N_p]`; `None` when `M = 0`.
    pub trajectories: Option<Tensor<T>>,
    pub entities: Vec<usize>,
}

impl<T: Scalar> CondInputs<T> {
    pub fn cast<U: Scalar>(&self) -> CondInputs<U> {
        CondInputs {
            reference: self.reference.cast(),
            caption: self.caption.clone(),
            guidance: self.guidance.cast(),
            plucker: self.plucker.cast(),
            trajectories: self.trajectories.as_ref().map(Tensor::cast),
            entities: self.entities.clone(),
        }
    }

    pub fn num_objects(&self) -> usize {
        self.entities.len()
    }

    pub fn from_package(
        pkg: &ControlPackage,
        reference: &Image,
        caption: &str,
        cfg: &ModelConfig,
    ) -> Result<Self, DitError> {
        let (nl, pp) = (cfg.latent_frames(), cfg.pixel_patch());
        if pkg.width != cfg.width || pkg.height != cfg.height || pkg.num_frames != cfg.frames {
            return Err(DitError::Input(format!(
                "package is {} frames of {}x{}, model expects {} of {}x{}",
                pkg.num_frames, pkg.width, pkg.height, cfg.frames, cfg.width, cfg.height
            )));
        }
        if pkg.latent_frames != nl || pkg.num_points != cfg.num_points {
            return Err(DitError::Input(format!(
                "package has {} latent frames and {} points, model expects {nl} and {}",
                pkg.latent_frames, pkg.num_points, cfg.num_points
            )));
        }
        let (w, h) = (cfg.width, cfg.height);

        let reference = patchify(&video_tensor::<T>(std::slice::from_ref(reference))?, pp)?;

        let mut guidance = Vec::with_capacity(nl * w * h * GUIDANCE_CHANNELS);
        for j in (0..cfg.frames).step_by(cfg.stride) {
            let (f, m) = (&pkg.guidance.frames[j], &pkg.guidance.masks[j]);
            for i in 0..w * h {
                guidance.extend(f.data[i * CHANNELS..(i + 1) * CHANNELS].iter().map(|v| T::from_f64_lossy(*v as f64)));
                guidance.push(if m.data[i] { T::one() } else { T::zero() });
            }
        }
        let guidance = patchify(&Tensor::new(vec![nl, h, w, GUIDANCE_CHANNELS], guidance)?, pp)?;

        let (lh, lw, pool) = (cfg.latent_height(), cfg.latent_width(), cfg.pool);
        let src = pkg.plucker.data();
        let inv = 1.0 / (pool * pool) as f64;
        let mut plucker = Vec::with_capacity(nl * lh * lw * PLUCKER_CHANNELS);
        for j in (0..cfg.frames).step_by(cfg.stride) {
            for y in 0..lh {
                for x in 0..lw {
                    for c in 0..PLUCKER_CHANNELS {
                        let mut acc = 0.0;
                        for dy in 0..pool {
                            for dx in 0..pool {
                                acc += src[((j * PLUCKER_CHANNELS + c) * h + y * pool + dy) * w + x * pool + dx] as f64;
                            }
                        }
                        plucker.push(T::from_f64_lossy(acc * inv));
                    }
                }
            }
        }
        let plucker = patchify(&Tensor::new(vec![nl, lh, lw, PLUCKER_CHANNELS], plucker)?, cfg.patch)?;

        let width = 3 * cfg.num_points;
        let mut traj = Vec::new();
        for obj in &pkg.traj_tokens {
            if obj.len() != nl || obj.iter().any(|f| f.len() != width) {
                return Err(DitError::Input(format!("trajectory tokens must be {nl} frames of {width} values")));
            }
            traj.extend(obj.iter().flatten().map(|v| T::from_f64_lossy(*v as f64)));
        }
        let m = pkg.traj_tokens.len();
        let entities = pkg.entity_indices();
        if let Some(bad) = entities.iter().find(|&&e| e >= cfg.vocab) {
            return Err(DitError::Input(format!("label index {bad} outside vocabulary of {}", cfg.vocab)));
        }
        Ok(Self {
            reference,
            caption: caption_tokens(caption),
            guidance,
            plucker,
            trajectories: if m == 0 {
                None
            } else {
                Some(Tensor::new(vec![m * nl, width], traj)?)
            },
            entities,
        })
    }
}
