//! Fixed pixel encoder, token layout and the inverse mappings.
//!
//! Latents and videos are `[frames, height, width, channels]` tensors.
//! Tokens are ordered frame-major, then grid row, then grid column; inside a
//! token values run over patch row, patch column, channel.

use mf_core::raster::Image;
use mf_core::tensor::{Graph, Tensor, Var};
use mf_core::Scalar;

use crate::config::CHANNELS;
use crate::DitError;

/// Stacks frames into a `[N, H, W, 3]` tensor.
pub fn video_tensor<T: Scalar>(frames: &[Image]) -> Result<Tensor<T>, DitError> {
    let first = frames.first().ok_or_else(|| DitError::Input("video has no frames".into()))?;
    let (w, h) = (first.width, first.height);
    if frames.iter().any(|f| f.width != w || f.height != h) {
        return Err(DitError::Input("frames differ in size".into()));
    }
    let data = frames.iter().flat_map(|f| f.data.iter().map(|v| T::from_f64_lossy(*v as f64))).collect();
    Ok(Tensor::new(vec![frames.len(), h, w, CHANNELS], data)?)
}

/// Splits a `[N, H, W, 3]` tensor into frames, clamped to `[0, 1]`.
pub fn tensor_frames<T: Scalar>(t: &Tensor<T>) -> Vec<Image> {
    let s = t.shape();
    let (h, w) = (s[1], s[2]);
    t.data()
        .chunks(h * w * CHANNELS)
        .map(|c| {
            let mut img = Image::new(w, h);
            for (o, v) in img.data.iter_mut().zip(c) {
                *o = v.to_f64_lossy().clamp(0.0, 1.0) as f32;
            }
            img
        })
        .collect()
}

/// Average-pools each frame by `pool` and keeps every `stride`-th frame.
pub fn encode_pixels(video: &[Image], stride: usize, pool: usize) -> Result<Tensor<f32>, DitError> {
    let n = video.len();
    if n == 0 || stride == 0 || (n - 1) % stride != 0 {
        return Err(DitError::Input(format!(
            "{n} frames cannot be encoded with temporal stride {stride}: need N = 1 mod stride"
        )));
    }
    let (w, h) = (video[0].width, video[0].height);
    if pool == 0 || w % pool != 0 || h % pool != 0 {
        return Err(DitError::Input(format!("{w}x{h} frames are not divisible by pool {pool}")));
    }
    let (lw, lh) = (w / pool, h / pool);
    let inv = 1.0 / (pool * pool) as f32;
    let mut data = Vec::with_capacity(((n - 1) / stride + 1) * lw * lh * CHANNELS);
    for f in video.iter().step_by(stride) {
        if f.width != w || f.height != h {
            return Err(DitError::Input("frames differ in size".into()));
        }
        for y in 0..lh {
            for x in 0..lw {
                let mut acc = [0.0f32; CHANNELS];
                for dy in 0..pool {
                    for dx in 0..pool {
                        let p = f.get(x * pool + dx, y * pool + dy);
                        for c in 0..CHANNELS {
                            acc[c] += p[c];
                        }
                    }
                }
                data.extend(acc.iter().map(|a| a * inv));
            }
        }
    }
    Ok(Tensor::new(vec![(n - 1) / stride + 1, lh, lw, CHANNELS], data)?)
}

fn check_patch(shape: &[usize], p: usize) -> Result<(usize, usize, usize, usize), DitError> {
    if shape.len() != 4 || p == 0 || shape[1] % p != 0 || shape[2] % p != 0 {
        return Err(DitError::Input(format!("shape {shape:?} cannot be split into {p}x{p} patches")));
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

/// `[F, H, W, C]` to `[F·(H/p)·(W/p), p·p·C]`.
pub fn patchify<T: Scalar>(x: &Tensor<T>, p: usize) -> Result<Tensor<T>, DitError> {
    let (f, h, w, c) = check_patch(x.shape(), p)?;
    let (gh, gw) = (h / p, w / p);
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    for fi in 0..f {
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..p {
                    let row = ((fi * h + gy * p + py) * w + gx * p) * c;
                    out.extend_from_slice(&src[row..row + p * c]);
                }
            }
        }
    }
    Ok(Tensor::new(vec![f * gh * gw, p * p * c], out)?)
}

/// Inverse of [`patchify`] for a target `[F, H, W, C]` shape.
pub fn unpatchify<T: Scalar>(tokens: &Tensor<T>, shape: [usize; 4], p: usize) -> Result<Tensor<T>, DitError> {
    let (f, h, w, c) = check_patch(&shape, p)?;
    let (gh, gw) = (h / p, w / p);
    if tokens.shape() != [f * gh * gw, p * p * c] {
        return Err(DitError::Input(format!(
            "tokens {:?} do not tile {shape:?} with patch {p}",
            tokens.shape()
        )));
    }
    let src = tokens.data();
    let mut out = vec![T::zero(); src.len()];
    let mut k = 0;
    for fi in 0..f {
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..p {
                    let row = ((fi * h + gy * p + py) * w + gx * p) * c;
                    out[row..row + p * c].copy_from_slice(&src[k..k + p * c]);
                    k += p * c;
                }
            }
        }
    }
    Ok(Tensor::new(shape.to_vec(), out)?)
}

/// Differentiable [`patchify`].
pub fn patchify_var<T: Scalar>(g: &mut Graph<T>, x: Var, p: usize) -> Result<Var, DitError> {
    let (f, h, w, c) = check_patch(g.shape(x), p)?;
    let v = g.reshape(x, [f, h / p, p, w / p, p, c])?;
    let v = g.permute(v, &[0, 1, 3, 2, 4, 5])?;
    Ok(g.reshape(v, [f * (h / p) * (w / p), p * p * c])?)
}

/// Differentiable [`unpatchify`].
pub fn unpatchify_var<T: Scalar>(g: &mut Graph<T>, tokens: Var, shape: [usize; 4], p: usize) -> Result<Var, DitError> {
    let (f, h, w, c) = check_patch(&shape, p)?;
    let v = g.reshape(tokens, [f, h / p, w / p, p, p, c])?;
    let v = g.permute(v, &[0, 1, 3, 2, 4, 5])?;
    Ok(g.reshape(v, shape.to_vec())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_selects_and_pools() {
        let frames: Vec<Image> = (0..17).map(|i| Image::filled(8, 8, [i as f32 / 16.0, 0.5, 1.0])).collect();
        let z = encode_pixels(&frames, 4, 2).unwrap();
        assert_eq!(z.shape(), [5, 4, 4, 3]);
        assert_eq!(z.data()[0], 0.0);
        assert_eq!(z.data()[4 * 4 * 3], 0.25);
        assert!(z.data().chunks(3).all(|c| c[1] == 0.5 && c[2] == 1.0));
        assert!(encode_pixels(&frames[..16], 4, 2).is_err());
        assert!(encode_pixels(&frames, 4, 3).is_err());
    }

    #[test]
    fn patch_round_trip() {
        let x = Tensor::<f32>::from_fn([5, 8, 8, 3], |i| i as f32);
        let t = patchify(&x, 4).unwrap();
        assert_eq!(t.shape(), [5 * 2 * 2, 48]);
        assert_eq!(unpatchify(&t, [5, 8, 8, 3], 4).unwrap(), x);
        let px = patchify(&x, 1).unwrap();
        assert_eq!(px.shape(), [5 * 64, 3]);
        assert_eq!(px.data(), x.data());
        assert!(patchify(&x, 3).is_err());
    }

    #[test]
    fn graph_patching_matches_tensor_patching() {
        let x = Tensor::<f64>::from_fn([2, 8, 4, 3], |i| (i as f64).sin());
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let t = patchify_var(&mut g, v, 2).unwrap();
        assert_eq!(g.value(t), &patchify(&x, 2).unwrap());
        let back = unpatchify_var(&mut g, t, [2, 8, 4, 3], 2).unwrap();
        assert_eq!(g.value(back), &x);
    }
}
