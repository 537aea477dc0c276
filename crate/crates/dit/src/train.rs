//! Three-stage training with AdamW, atomic checkpoints and exact resume.
//!
//! A run directory holds `config.json`, `weights.ckpt`, `optim.ckpt`,
//! `train_log.csv` and one `stage{k}.ckpt` snapshot per finished stage.
//! Every step draws its batch, timesteps and noise from an RNG seeded by
//! `(seed, step)`, so a resumed run continues exactly where it stopped.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use mf_core::conditioning::{build_control_package_from, ConditioningOptions};
use mf_core::synth::{load_clip, mix, read_index, Clip};
use mf_core::tensor::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_bytes_atomic, write_checkpoint, Graph, ParamStore,
    Tensor,
};

use crate::flow::{gaussian, sample_timestep, FlowState};
use crate::latent::{encode_pixels, video_tensor};
use crate::model::{Branches, DitModel};
use crate::{CondInputs, DitError, ModelConfig};

/// One training clip in model form.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    /// Encoded clean video `z0`.
    pub latent: Tensor<f32>,
    /// Pixels `[N, H, W, 3]`, the decoder target.
    pub video: Tensor<f32>,
    pub cond: CondInputs<f32>,
}

impl Example {
    pub fn from_clip(clip: &Clip, cfg: &ModelConfig) -> Result<Self, DitError> {
        let spec = clip.spec();
        let opts = ConditioningOptions {
            stride: cfg.stride,
            num_points: cfg.num_points,
            ..ConditioningOptions::default()
        };
        let pkg = build_control_package_from(&spec, &clip.frames[0], &clip.depth, &opts)?;
        let mut latent = encode_pixels(&clip.frames, cfg.stride, cfg.pool)?;
        cfg.normalize(&mut latent);
        Ok(Self {
            id: clip.annotation.clip_id.clone(),
            latent,
            video: video_tensor(&clip.frames)?,
            cond: CondInputs::from_package(&pkg, &clip.frames[0], &spec.caption, cfg)?,
        })
    }
}

/// Loads every clip listed in `dir/index.json`.
pub fn load_training_set(dir: &Path, cfg: &ModelConfig) -> Result<Vec<Example>, DitError> {
    let index = read_index(&dir.join("index.json")).map_err(|e| DitError::Format {
        path: dir.to_path_buf(),
        message: e.to_string(),
    })?;
    index
        .clips
        .iter()
        .map(|c| {
            let clip = load_clip(&dir.join(&c.id)).map_err(|e| DitError::Format {
                path: dir.join(&c.id),
                message: e.to_string(),
            })?;
            Example::from_clip(&clip, cfg)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Base transformer and decoder, both branches off.
    Base,
    /// Camera branch only.
    Camera,
    /// Object branch only, camera branch on but frozen.
    Object,
}

impl Stage {
    pub fn index(self) -> u8 {
        match self {
            Stage::Base => 0,
            Stage::Camera => 1,
            Stage::Object => 2,
        }
    }

    pub fn branches(self) -> Branches {
        match self {
            Stage::Base => Branches::NONE,
            Stage::Camera => Branches::CAMERA,
            Stage::Object => Branches::ALL,
        }
    }

    /// Whether the parameter called `name` is updated in this stage.
    pub fn trains(self, name: &str) -> bool {
        let vcm = name.starts_with("vcm.");
        let omm = name.starts_with("omm.");
        match self {
            Stage::Base => !vcm && !omm,
            Stage::Camera => vcm,
            Stage::Object => omm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Stages in order with their step counts.
    pub schedule: Vec<(Stage, u64)>,
    pub lr: f64,
    /// Linear warmup at the start of every stage.
    pub warmup: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Clips per step; gradients are averaged.
    pub batch: usize,
    /// Global gradient-norm clip; 0 disables it.
    pub clip_norm: f64,
    /// Weight of the decoder reconstruction loss in the base stage.
    pub recon_weight: f64,
    pub checkpoint_every: u64,
    pub seed: u64,
    /// Weights to start from instead of the fresh initialization. Names
    /// and shapes that match are copied; the rest keep their init.
    pub init_weights: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: vec![(Stage::Base, 1500), (Stage::Camera, 750), (Stage::Object, 750)],
            lr: 1e-3,
            warmup: 50,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch: 4,
            clip_norm: 1.0,
            recon_weight: 1.0,
            checkpoint_every: 250,
            seed: 0,
            init_weights: None,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> u64 {
        self.schedule.iter().map(|s| s.1).sum()
    }

    /// Stage and step within that stage for the 0-based global step.
    pub fn stage_at(&self, step: u64) -> Option<(Stage, u64)> {
        let mut start = 0;
        for &(stage, n) in &self.schedule {
            if step < start + n {
                return Some((stage, step - start));
            }
            start += n;
        }
        None
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let local = self.stage_at(step).map_or(0, |s| s.1);
        if local < self.warmup {
            self.lr * (local + 1) as f64 / self.warmup as f64
        } else {
            self.lr
        }
    }

    pub fn validate(&self) -> Result<(), DitError> {
        let bad = |m: &str| Err(DitError::Config(m.into()));
        if self.schedule.is_empty() {
            return bad("schedule needs at least one stage");
        }
        if self.batch == 0 {
            return bad("batch must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1");
        }
        Ok(())
    }
}

/// What `config.json` in a run directory records.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// AdamW moments and per-parameter step counts.
#[derive(Clone, Debug)]
pub struct AdamW {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: Vec<u64>,
}

impl AdamW {
    pub fn new(store: &ParamStore<f32>) -> Self {
        let sizes: Vec<usize> = store.ids().map(|id| store.value(id).numel()).collect();
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: vec![0; sizes.len()],
        }
    }

    /// Updates every trainable parameter from its accumulated gradient.
    /// Decay applies to matrices only.
    pub fn step(&mut self, store: &mut ParamStore<f32>, cfg: &TrainConfig, lr: f64) {
        let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        for id in ids {
            let i = id.index();
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let c1 = 1.0 - (cfg.beta1).powi(t);
            let c2 = 1.0 - (cfg.beta2).powi(t);
            let decay = if store.value(id).rank() >= 2 { cfg.weight_decay } else { 0.0 };
            let grad = store.grad(id).to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = store.value_mut(id).data_mut();
            for k in 0..w.len() {
                let g = grad[k];
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                let mh = m[k] as f64 / c1;
                let vh = v[k] as f64 / c2;
                let upd = mh / (vh.sqrt() + cfg.eps) + decay * w[k] as f64;
                w[k] -= (lr * upd) as f32;
            }
        }
    }

    fn save(&self, path: &Path, store: &ParamStore<f32>, step: u64) -> Result<(), DitError> {
        let mut entries: Vec<(String, Tensor<f32>)> = Vec::new();
        entries.push(("step".into(), Tensor::new(vec![2], split_u64(step))?));
        for id in store.ids() {
            let (i, name, shape) = (id.index(), store.name(id), store.value(id).shape().to_vec());
            entries.push((format!("m.{name}"), Tensor::new(shape.clone(), self.m[i].clone())?));
            entries.push((format!("v.{name}"), Tensor::new(shape, self.v[i].clone())?));
            entries.push((format!("t.{name}"), Tensor::new(vec![2], split_u64(self.t[i]))?));
        }
        let bytes = encode_checkpoint(entries.iter().map(|(n, t)| (n.as_str(), t)));
        write_bytes_atomic(path, &bytes).map_err(|source| DitError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Restores moments for `store`'s parameters; returns the saved step.
    fn load(path: &Path, store: &ParamStore<f32>) -> Result<(Self, u64), DitError> {
        let bytes = fs::read(path).map_err(|source| DitError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let map: std::collections::HashMap<_, _> = decode_checkpoint(&bytes)?.into_iter().collect();
        let corrupt = |m: String| DitError::Format {
            path: path.to_path_buf(),
            message: m,
        };
        let get = |key: &str, shape: &[usize]| -> Result<Vec<f32>, DitError> {
            let t = map.get(key).ok_or_else(|| corrupt(format!("missing entry {key}")))?;
            if t.shape() != shape {
                return Err(corrupt(format!("entry {key} has shape {:?}, expected {shape:?}", t.shape())));
            }
            Ok(t.data().to_vec())
        };
        let mut opt = Self::new(store);
        for id in store.ids() {
            let (i, name, shape) = (id.index(), store.name(id), store.value(id).shape());
            opt.m[i] = get(&format!("m.{name}"), shape)?;
            opt.v[i] = get(&format!("v.{name}"), shape)?;
            opt.t[i] = join_u64(&get(&format!("t.{name}"), &[2])?);
        }
        let step = join_u64(&get("step", &[2])?);
        Ok((opt, step))
    }
}

// Counters are stored as two exact 24-bit halves so they survive the f32
// checkpoint payload.
fn split_u64(v: u64) -> Vec<f32> {
    vec![(v >> 24) as f32, (v & 0xFF_FFFF) as f32]
}

fn join_u64(v: &[f32]) -> u64 {
    ((v[0] as u64) << 24) | v[1] as u64
}

/// Loss of one clip: flow-matching MSE, plus the decoder reconstruction
/// MSE in the base stage. Gradients are accumulated into `store`.
pub fn clip_loss(
    model: &DitModel,
    store: &mut ParamStore<f32>,
    ex: &Example,
    state: &FlowState<f32>,
    stage: Stage,
    recon_weight: f64,
) -> Result<f64, DitError> {
    let mut g = Graph::new();
    let z = g.constant(state.z_t.clone());
    let f = model.forward(&mut g, store, z, state.t, &ex.cond, stage.branches())?;
    let target = g.constant(state.v_t.clone());
    let mut loss = g.mse(f.velocity, target)?;
    if stage == Stage::Base && recon_weight > 0.0 {
        let lat = g.constant(ex.latent.clone());
        let rec = model.decode_var(&mut g, store, lat)?;
        let px = g.constant(ex.video.clone());
        let r = g.mse(rec, px)?;
        let r = g.scale(r, recon_weight as f32);
        loss = g.add(loss, r)?;
    }
    let value = g.value(loss).item() as f64;
    if value.is_finite() {
        let grads = g.backward(loss)?;
        store.accumulate(&grads);
    }
    Ok(value)
}

fn clip_gradients(store: &mut ParamStore<f32>, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    let norm = ids
        .iter()
        .flat_map(|&id| store.grad(id).iter())
        .map(|g| (*g as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        store.scale_grads((max_norm / norm) as f32);
    }
}

fn non_finite_detail(store: &ParamStore<f32>) -> String {
    let bad: Vec<&str> = store
        .ids()
        .filter(|&id| !store.value(id).is_finite() || store.grad(id).iter().any(|g| !g.is_finite()))
        .map(|id| store.name(id))
        .collect();
    if bad.is_empty() {
        "all parameters finite; the loss overflowed".into()
    } else {
        format!("non-finite values or gradients in {}", bad.join(", "))
    }
}

/// One optimizer step at 0-based global step `step`. Returns the mean loss.
pub fn training_step(
    model: &DitModel,
    store: &mut ParamStore<f32>,
    opt: &mut AdamW,
    examples: &[Example],
    cfg: &TrainConfig,
    step: u64,
) -> Result<f64, DitError> {
    let (stage, _) = cfg
        .stage_at(step)
        .ok_or_else(|| DitError::Config(format!("step {step} is past the schedule")))?;
    store.set_trainable_where(|n| stage.trains(n));
    store.zero_grad();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, step));
    let mut total = 0.0;
    for _ in 0..cfg.batch {
        let ex = &examples[rng.random_range(0..examples.len())];
        let t = sample_timestep(&mut rng) as f32;
        let noise = gaussian::<f32>(ex.latent.shape(), &mut rng);
        let state = FlowState::new(ex.latent.clone(), noise, t)?;
        let l = clip_loss(model, store, ex, &state, stage, cfg.recon_weight)?;
        if !l.is_finite() {
            return Err(DitError::NonFinite {
                step: step + 1,
                stage: stage.index(),
                detail: format!("clip {}: {}", ex.id, non_finite_detail(store)),
            });
        }
        total += l;
    }
    store.scale_grads(1.0 / cfg.batch as f32);
    clip_gradients(store, cfg.clip_norm);
    opt.step(store, cfg, cfg.lr_at(step));
    if store.ids().any(|id| !store.value(id).is_finite()) {
        return Err(DitError::NonFinite {
            step: step + 1,
            stage: stage.index(),
            detail: non_finite_detail(store),
        });
    }
    Ok(total / cfg.batch as f64)
}

/// Result of [`train`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    /// Steps completed in the run directory, across invocations.
    pub completed: u64,
    pub total: u64,
    /// Steps run by this invocation.
    pub ran: u64,
    pub resumed_from: Option<u64>,
    pub last_loss: Option<f64>,
}

pub const CONFIG_FILE: &str = "config.json";
pub const WEIGHTS_FILE: &str = "weights.ckpt";
pub const OPTIM_FILE: &str = "optim.ckpt";
pub const LOG_FILE: &str = "train_log.csv";
const LOG_HEADER: &str = "step,stage,loss,lr";

pub fn stage_snapshot(stage: Stage) -> String {
    format!("stage{}.ckpt", stage.index())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DitError + '_ {
    move |source| DitError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads the run configuration of a run directory.
pub fn read_run_config(dir: &Path) -> Result<RunConfig, DitError> {
    let path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| DitError::Format {
        path,
        message: e.to_string(),
    })
}

/// Keeps the header and the rows of steps `1..=step`.
fn truncate_log(path: &Path, step: u64) -> Result<(), DitError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut out = format!("{LOG_HEADER}\n");
    for line in text.lines().skip(1) {
        match line.split(',').next().and_then(|s| s.parse::<u64>().ok()) {
            Some(s) if s <= step => {
                out.push_str(line);
                out.push('\n');
            }
            _ => {}
        }
    }
    write_bytes_atomic(path, out.as_bytes()).map_err(io_err(path))
}

/// Trains into `out_dir`, resuming if it already holds a run with the same
/// configuration. `stop_after` bounds the steps run by this call;
/// `progress` sees `(step, stage, loss)` after every step.
pub fn train(
    examples: &[Example],
    run: &RunConfig,
    out_dir: &Path,
    stop_after: Option<u64>,
    progress: &mut dyn FnMut(u64, Stage, f64),
) -> Result<TrainSummary, DitError> {
    run.train.validate()?;
    if examples.is_empty() {
        return Err(DitError::Input("training set is empty".into()));
    }
    let (model, mut store) = DitModel::new(run.model.clone())?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let cfg = &run.train;
    let weights = out_dir.join(WEIGHTS_FILE);
    let optim = out_dir.join(OPTIM_FILE);
    let log = out_dir.join(LOG_FILE);

    let mut resumed_from = None;
    let (mut opt, mut step) = if weights.exists() && optim.exists() {
        let saved = read_run_config(out_dir)?;
        if &saved != run {
            return Err(DitError::Config(format!(
                "{} holds a run with a different configuration; use a fresh directory",
                out_dir.display()
            )));
        }
        read_checkpoint(&weights, &mut store)?;
        let (opt, step) = AdamW::load(&optim, &store)?;
        resumed_from = Some(step);
        (opt, step)
    } else {
        if let Some(init) = &cfg.init_weights {
            let mut other = ParamStore::new();
            for (name, t) in decode_checkpoint(&fs::read(init).map_err(io_err(init))?)? {
                other.add(name, t);
            }
            store.load_from(&other);
        }
        let json = serde_json::to_string_pretty(run).expect("run config serializes");
        write_bytes_atomic(&out_dir.join(CONFIG_FILE), json.as_bytes()).map_err(io_err(out_dir))?;
        (AdamW::new(&store), 0)
    };
    truncate_log(&log, step)?;

    let total = cfg.total_steps();
    let end = stop_after.map_or(total, |n| (step + n).min(total));
    let mut file = fs::OpenOptions::new().append(true).open(&log).map_err(io_err(&log))?;
    let mut pending = String::new();
    let mut last_loss = None;
    let ran = end.saturating_sub(step);
    let save = |store: &ParamStore<f32>, opt: &AdamW, step: u64, pending: &mut String, file: &mut fs::File| {
        file.write_all(pending.as_bytes()).map_err(io_err(&log))?;
        file.sync_data().map_err(io_err(&log))?;
        pending.clear();
        write_checkpoint(&weights, store)?;
        opt.save(&optim, store, step)
    };
    while step < end {
        let (stage, _) = cfg.stage_at(step).expect("step inside schedule");
        let loss = training_step(&model, &mut store, &mut opt, examples, cfg, step)?;
        let lr = cfg.lr_at(step);
        step += 1;
        last_loss = Some(loss);
        pending.push_str(&format!("{step},{},{loss:.6},{lr:.6e}\n", stage.index()));
        progress(step, stage, loss);
        let stage_done = cfg.stage_at(step).map(|s| s.0) != Some(stage);
        if stage_done {
            write_checkpoint(&out_dir.join(stage_snapshot(stage)), &store)?;
        }
        if stage_done || step % cfg.checkpoint_every == 0 || step == end {
            save(&store, &opt, step, &mut pending, &mut file)?;
        }
    }
    Ok(TrainSummary {
        completed: step,
        total,
        ran,
        resumed_from,
        last_loss,
    })
}
