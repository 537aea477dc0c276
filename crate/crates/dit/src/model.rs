//! The transformer, its camera branch (VCM) and object branch (OMM).
//!
//! Parameter names carry the branch: `vcm.*` for the camera branch and its
//! encoders, `omm.*` for the object token encoder and the per-block object
//! cross-attention, everything else is the base model and pixel decoder.

use mf_core::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use mf_core::Scalar;

use crate::config::{ModelConfig, CHANNELS, GUIDANCE_CHANNELS, PLUCKER_CHANNELS};
use crate::inputs::CondInputs;
use crate::latent::{patchify_var, unpatchify_var};
use crate::layers::{chunks, modulate, sinusoid, Attn, Init, Lin};
use crate::DitError;

/// Which motion branches take part in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Branches {
    pub vcm: bool,
    pub omm: bool,
}

impl Branches {
    pub const NONE: Self = Self { vcm: false, omm: false };
    pub const ALL: Self = Self { vcm: true, omm: true };
    pub const CAMERA: Self = Self { vcm: true, omm: false };
}

#[derive(Clone, Debug)]
struct Block {
    ada: Lin,
    attn: Attn,
    ctx: Attn,
    mlp1: Lin,
    mlp2: Lin,
    /// Object cross-attention; belongs to the object branch.
    obj: Attn,
}

#[derive(Clone, Debug)]
struct VcmBlock {
    ada: Lin,
    attn: Attn,
    mlp1: Lin,
    mlp2: Lin,
    out: Lin,
}

/// Parameter handles and configuration. Values live in a [`ParamStore`],
/// so one model can run in `f32` for training and `f64` for checks.
#[derive(Clone, Debug)]
pub struct DitModel {
    pub config: ModelConfig,
    patch_in: Lin,
    pos: ParamId,
    t_mlp1: Lin,
    t_mlp2: Lin,
    txt: ParamId,
    ref_in: Lin,
    /// Reference patches joined to the first latent frame's tokens.
    ref_cat: Lin,
    ref_pos: ParamId,
    blocks: Vec<Block>,
    final_ada: Lin,
    out: Lin,
    dec_time: ParamId,
    dec_space: Lin,
    pcd_in: Lin,
    cam_in: Lin,
    fuse: Lin,
    vcm: Vec<VcmBlock>,
    traj_in: Lin,
    label: ParamId,
    obj_time: ParamId,
}

/// Result of a forward pass.
pub struct Forward {
    /// Predicted velocity, latent-shaped.
    pub velocity: Var,
    /// Every attention weight map `[heads, queries, keys]` of the pass.
    pub attention: Vec<Var>,
    /// Camera-branch residuals, one per camera block, in block order.
    pub vcm_residuals: Vec<Var>,
}

fn position_table(cfg: &ModelConfig) -> Tensor<f32> {
    let (gh, gw) = cfg.grid();
    let d = cfg.dim;
    let (df, dy) = (d / 3, d / 3);
    let dx = d - df - dy;
    let mut data = Vec::with_capacity(cfg.num_tokens() * d);
    for f in 0..cfg.latent_frames() {
        for y in 0..gh {
            for x in 0..gw {
                for (v, n) in [(f, df), (y, dy), (x, dx)] {
                    data.extend(sinusoid::<f32>(v as f64, n).data().iter().map(|s| 0.5 * s));
                }
            }
        }
    }
    Tensor::new(vec![cfg.num_tokens(), d], data).expect("position table extents")
}

/// Temporal upsampling weights: linear interpolation between kept frames.
fn interpolation_table(cfg: &ModelConfig) -> Tensor<f32> {
    let nl = cfg.latent_frames();
    Tensor::from_fn([cfg.frames, nl], |i| {
        let (j, k) = (i / nl, i % nl);
        let pos = j as f32 / cfg.stride as f32;
        (1.0 - (pos - k as f32).abs()).max(0.0)
    })
}

impl DitModel {
    /// Builds the model and its initial parameters from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<(Self, ParamStore<f32>), DitError> {
        config.validate()?;
        let c = &config;
        let d = c.dim;
        let hidden = d * c.mlp_ratio;
        let pp = c.pixel_patch();
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, c.seed);

        let patch_in = init.linear("patch_in", c.patch_dim(), d);
        let pos = init.tensor("pos", position_table(c));
        let t_mlp1 = init.linear("t_mlp1", d, d);
        let t_mlp2 = init.linear("t_mlp2", d, d);
        let txt = init.normal("txt", &[c.caption_vocab, d], 0.5);
        let ref_in = init.linear("ref_in", pp * pp * CHANNELS, d);
        let ref_cat = init.linear("ref_cat", pp * pp * CHANNELS, d);
        let table = position_table(c);
        let ref_pos = init.tensor(
            "ref_pos",
            Tensor::new(vec![c.tokens_per_frame(), d], table.data()[..c.tokens_per_frame() * d].to_vec())?,
        );
        let mut blocks = Vec::new();
        for i in 0..c.blocks {
            blocks.push(Block {
                ada: init.zero_linear(&format!("block{i}.ada"), d, 6 * d),
                attn: init.attention(&format!("block{i}.attn"), d, c.heads, false),
                ctx: init.attention(&format!("block{i}.ctx"), d, c.heads, false),
                mlp1: init.linear(&format!("block{i}.mlp1"), d, hidden),
                mlp2: init.linear(&format!("block{i}.mlp2"), hidden, d),
                obj: init.attention(&format!("omm.block{i}.xattn"), d, c.heads, true),
            });
        }
        let final_ada = init.zero_linear("final_ada", d, 2 * d);
        let out = init.zero_linear("out", d, c.patch_dim());
        let dec_time = init.tensor("dec.time", interpolation_table(c));
        let p2 = c.pool * c.pool;
        let dec_space = Lin {
            w: init.tensor(
                "dec.space.w",
                Tensor::from_fn([CHANNELS, p2 * CHANNELS], |i| {
                    let (row, col) = (i / (p2 * CHANNELS), i % (p2 * CHANNELS));
                    if col % CHANNELS == row {
                        1.0
                    } else {
                        0.0
                    }
                }),
            ),
            b: Some(init.tensor("dec.space.b", Tensor::zeros([p2 * CHANNELS]))),
        };

        let pcd_in = init.linear("vcm.pcd_in", pp * pp * GUIDANCE_CHANNELS, d);
        let cam_in = init.linear("vcm.cam_in", c.patch * c.patch * PLUCKER_CHANNELS, d);
        let fuse = init.linear("vcm.fuse", 2 * d, d);
        let mut vcm = Vec::new();
        for k in 0..c.vcm_blocks {
            // gates start open: the branch is silenced by its zero output instead
            let mut bias = vec![0.0f32; 6 * d];
            bias[2 * d..3 * d].fill(1.0);
            bias[5 * d..].fill(1.0);
            vcm.push(VcmBlock {
                ada: Lin {
                    w: init.tensor(&format!("vcm.block{k}.ada.w"), Tensor::zeros([d, 6 * d])),
                    b: Some(init.tensor(&format!("vcm.block{k}.ada.b"), Tensor::new(vec![6 * d], bias)?)),
                },
                attn: init.attention(&format!("vcm.block{k}.attn"), d, c.heads, false),
                mlp1: init.linear(&format!("vcm.block{k}.mlp1"), d, hidden),
                mlp2: init.linear(&format!("vcm.block{k}.mlp2"), hidden, d),
                out: init.zero_linear(&format!("vcm.block{k}.out"), d, d),
            });
        }

        let traj_in = init.linear("omm.traj_in", 3 * c.num_points, d);
        let label = init.normal("omm.label", &[c.vocab, d], 0.5);
        let obj_time = init.tensor("omm.time", Tensor::zeros([c.latent_frames(), d]));

        let model = Self {
            config,
            patch_in,
            pos,
            t_mlp1,
            t_mlp2,
            txt,
            ref_in,
            ref_cat,
            ref_pos,
            blocks,
            final_ada,
            out,
            dec_time,
            dec_space,
            pcd_in,
            cam_in,
            fuse,
            vcm,
            traj_in,
            label,
            obj_time,
        };
        Ok((model, store))
    }

    /// Object tokens: projected trajectory points plus the entity's label
    /// embedding plus a per-latent-frame embedding. `None` without objects.
    pub fn omm_encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        trajectories: Option<&Tensor<T>>,
        entities: &[usize],
    ) -> Result<Option<Var>, DitError> {
        let Some(traj) = trajectories else {
            return Ok(None);
        };
        let nl = self.config.latent_frames();
        if traj.shape() != [entities.len() * nl, 3 * self.config.num_points] {
            return Err(DitError::Input(format!(
                "trajectory tokens {:?} do not match {} objects over {nl} frames",
                traj.shape(),
                entities.len()
            )));
        }
        let x = g.constant(traj.clone());
        let proj = self.traj_in.apply(g, store, x)?;
        let label_idx: Vec<usize> = entities.iter().flat_map(|&e| std::iter::repeat_n(e, nl)).collect();
        let table = g.param(store, self.label);
        let lab = g.embedding(table, &label_idx)?;
        let time_idx: Vec<usize> = entities.iter().flat_map(|_| 0..nl).collect();
        let table = g.param(store, self.obj_time);
        let tim = g.embedding(table, &time_idx)?;
        let s = g.add(proj, lab)?;
        Ok(Some(g.add(s, tim)?))
    }

    /// `z + CrossAttn(LN(z), c_obj)` through block `i`'s object attention;
    /// `z` itself when there are no object tokens.
    pub fn object_cross_attention<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        block: usize,
        z: Var,
        c_obj: Option<Var>,
    ) -> Result<(Var, Option<Var>), DitError> {
        let Some(c_obj) = c_obj else {
            return Ok((z, None));
        };
        if g.shape(c_obj).last() != g.shape(z).last() {
            return Err(DitError::Input(format!(
                "object tokens {:?} and latent tokens {:?} differ in width",
                g.shape(c_obj),
                g.shape(z)
            )));
        }
        let h = g.layer_norm(z);
        let (o, w) = self.blocks[block].obj.attend(g, store, h, c_obj)?;
        Ok((g.add(z, o)?, Some(w)))
    }

    /// Camera branch: guidance and latent tokens fused, Plücker features
    /// added, then one zero-initialized residual per camera block.
    pub fn vcm_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        tokens: Var,
        cond_vec: Var,
        cond: &CondInputs<T>,
        attention: &mut Vec<Var>,
    ) -> Result<Vec<Var>, DitError> {
        let cfg = &self.config;
        let (l, d) = (cfg.num_tokens(), cfg.dim);
        if cond.guidance.shape()[0] != l || cond.plucker.shape()[0] != l {
            return Err(DitError::Input(format!(
                "camera conditioning has {} / {} rows, expected {l}",
                cond.guidance.shape()[0],
                cond.plucker.shape()[0]
            )));
        }
        let pcd = if cfg.use_pcd {
            let x = g.constant(cond.guidance.clone());
            self.pcd_in.apply(g, store, x)?
        } else {
            g.constant(Tensor::zeros([l, d]))
        };
        let cat = g.concat_last(&[pcd, tokens])?;
        let fused = self.fuse.apply(g, store, cat)?;
        let cam = g.constant(cond.plucker.clone());
        let cam = self.cam_in.apply(g, store, cam)?;
        let mut h = g.add(fused, cam)?;
        let mut residuals = Vec::with_capacity(self.vcm.len());
        for b in &self.vcm {
            let m = b.ada.apply(g, store, cond_vec)?;
            let m = chunks(g, m, 6)?;
            h = self.attn_mlp(g, store, h, &m, &b.attn, &b.mlp1, &b.mlp2, None, attention)?;
            residuals.push(b.out.apply(g, store, h)?);
        }
        Ok(residuals)
    }

    /// Modulated self-attention and MLP, with an optional cross-attention
    /// in between.
    #[allow(clippy::too_many_arguments)]
    fn attn_mlp<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        m: &[Var],
        attn: &Attn,
        mlp1: &Lin,
        mlp2: &Lin,
        ctx: Option<(&Attn, Var)>,
        attention: &mut Vec<Var>,
    ) -> Result<Var, DitError> {
        let n = g.layer_norm(x);
        let h = modulate(g, n, m[0], m[1])?;
        let (a, w) = attn.attend(g, store, h, h)?;
        attention.push(w);
        let a = g.mul_bcast(a, m[2])?;
        let mut x = g.add(x, a)?;
        if let Some((ca, c)) = ctx {
            let n = g.layer_norm(x);
            let (o, w) = ca.attend(g, store, n, c)?;
            attention.push(w);
            x = g.add(x, o)?;
        }
        let n = g.layer_norm(x);
        let h = modulate(g, n, m[3], m[4])?;
        let h = mlp1.apply(g, store, h)?;
        let h = g.gelu(h);
        let h = mlp2.apply(g, store, h)?;
        let h = g.mul_bcast(h, m[5])?;
        Ok(g.add(x, h)?)
    }

    /// Predicted velocity for a latent `z_t` of shape `[Ñ, h, w, 3]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z_t: Var,
        t: T,
        cond: &CondInputs<T>,
        branches: Branches,
    ) -> Result<Forward, DitError> {
        let cfg = &self.config;
        let shape = cfg.latent_shape();
        if g.shape(z_t) != shape {
            return Err(DitError::Input(format!(
                "latent {:?} does not match model latent {shape:?}",
                g.shape(z_t)
            )));
        }
        let mut attention = Vec::new();
        let tokens = patchify_var(g, z_t, cfg.patch)?;
        let tokens = self.patch_in.apply(g, store, tokens)?;
        let pos = g.param(store, self.pos);
        let x = g.add(tokens, pos)?;
        // image-to-video conditioning: the reference enters the first latent
        // frame as if concatenated channel-wise, later frames get zeros
        let r = g.constant(cond.reference.clone());
        let first = self.ref_cat.apply(g, store, r)?;
        let rest = g.constant(Tensor::zeros([cfg.num_tokens() - cfg.tokens_per_frame(), cfg.dim]));
        let joined = g.concat_rows(&[first, rest])?;
        let mut x = g.add(x, joined)?;

        let temb = g.constant(sinusoid(t.to_f64_lossy() * 1000.0, cfg.dim));
        let temb = self.t_mlp1.apply(g, store, temb)?;
        let temb = g.silu(temb);
        let temb = self.t_mlp2.apply(g, store, temb)?;
        let table = g.param(store, self.txt);
        let txt = g.embedding(table, &cond.caption)?;
        let txt_mean = g.mean_rows(txt);
        let c = g.add(temb, txt_mean)?;
        let c = g.silu(c);

        let r = g.constant(cond.reference.clone());
        let r = self.ref_in.apply(g, store, r)?;
        let rp = g.param(store, self.ref_pos);
        let refs = g.add(r, rp)?;
        let ctx = g.concat_rows(&[txt, refs])?;

        let vcm_residuals = if branches.vcm {
            self.vcm_forward(g, store, x, c, cond, &mut attention)?
        } else {
            Vec::new()
        };
        let c_obj = if branches.omm {
            self.omm_encode(g, store, cond.trajectories.as_ref(), &cond.entities)?
        } else {
            None
        };

        for (i, b) in self.blocks.iter().enumerate() {
            let m = b.ada.apply(g, store, c)?;
            let m = chunks(g, m, 6)?;
            // self-attention, reference/caption cross-attention, then the
            // object cross-attention ahead of the MLP
            let n = g.layer_norm(x);
            let h = modulate(g, n, m[0], m[1])?;
            let (a, w) = b.attn.attend(g, store, h, h)?;
            attention.push(w);
            let a = g.mul_bcast(a, m[2])?;
            x = g.add(x, a)?;
            let n = g.layer_norm(x);
            let (o, w) = b.ctx.attend(g, store, n, ctx)?;
            attention.push(w);
            x = g.add(x, o)?;
            let (xo, w) = self.object_cross_attention(g, store, i, x, c_obj)?;
            x = xo;
            attention.extend(w);
            let n = g.layer_norm(x);
            let h = modulate(g, n, m[3], m[4])?;
            let h = b.mlp1.apply(g, store, h)?;
            let h = g.gelu(h);
            let h = b.mlp2.apply(g, store, h)?;
            let h = g.mul_bcast(h, m[5])?;
            x = g.add(x, h)?;
            if let Some(r) = vcm_residuals.get(i) {
                x = g.add(x, *r)?;
            }
        }

        let m = self.final_ada.apply(g, store, c)?;
        let m = chunks(g, m, 2)?;
        let n = g.layer_norm(x);
        let h = modulate(g, n, m[0], m[1])?;
        let out = self.out.apply(g, store, h)?;
        let velocity = unpatchify_var(g, out, shape, cfg.patch)?;
        Ok(Forward {
            velocity,
            attention,
            vcm_residuals,
        })
    }

    /// Velocity without keeping the graph.
    pub fn velocity<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        z_t: &Tensor<T>,
        t: T,
        cond: &CondInputs<T>,
        branches: Branches,
    ) -> Result<Tensor<T>, DitError> {
        let mut g = Graph::new();
        let z = g.constant(z_t.clone());
        let f = self.forward(&mut g, store, z, t, cond, branches)?;
        Ok(g.value(f.velocity).clone())
    }

    /// Learned decoder: undoes the latent normalization, upsamples latent
    /// frames in time, then maps each latent pixel linearly to
    /// `pool × pool` output pixels.
    pub fn decode_var<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, latent: Var) -> Result<Var, DitError> {
        let cfg = &self.config;
        let [nl, lh, lw, c] = cfg.latent_shape();
        if g.shape(latent) != [nl, lh, lw, c] {
            return Err(DitError::Input(format!("cannot decode latent {:?}", g.shape(latent))));
        }
        let p = cfg.pool;
        let un = g.scale(latent, T::from_f64_lossy(1.0 / cfg.latent_scale as f64));
        let shift = g.constant(Tensor::full([CHANNELS], T::from_f64_lossy(cfg.latent_shift as f64)));
        let un = g.add_bcast(un, shift)?;
        let flat = g.reshape(un, [nl, lh * lw * c])?;
        let time = g.param(store, self.dec_time);
        let frames = g.matmul(time, flat)?;
        let frames = g.reshape(frames, [cfg.frames, lh, lw, c])?;
        let px = self.dec_space.apply(g, store, frames)?;
        let px = g.reshape(px, [cfg.frames, lh, lw, p, p, c])?;
        let px = g.permute(px, &[0, 1, 3, 2, 4, 5])?;
        Ok(g.reshape(px, [cfg.frames, cfg.height, cfg.width, c])?)
    }

    pub fn decode<T: Scalar>(&self, store: &ParamStore<T>, latent: &Tensor<T>) -> Result<Tensor<T>, DitError> {
        let mut g = Graph::new();
        let z = g.constant(latent.clone());
        let v = self.decode_var(&mut g, store, z)?;
        Ok(g.value(v).clone())
    }
}
