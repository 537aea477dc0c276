use mf_core::tensor::{grad_check_fn, Graph, ParamStore, Tensor};
use mf_dit::flow::{euler_sample, flow_interpolate, gaussian, sample_timestep, FlowState, OracleVelocity};
use mf_dit::latent::patchify;
use mf_dit::train::{clip_loss, AdamW, Stage, TrainConfig};
use mf_dit::{Branches, CondInputs, DitModel, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn random_cond<T: mf_core::Scalar>(cfg: &ModelConfig, objects: usize, rng: &mut ChaCha8Rng) -> CondInputs<T> {
    let (l, p, pp, nl) = (cfg.num_tokens(), cfg.patch, cfg.pixel_patch(), cfg.latent_frames());
    let mut u = |shape: &[usize]| Tensor::from_fn(shape.to_vec(), |_| T::from_f64_lossy(rng.random::<f64>()));
    let reference = u(&[cfg.tokens_per_frame(), pp * pp * 3]);
    let guidance = u(&[l, pp * pp * 4]);
    let plucker = u(&[l, p * p * 6]);
    let trajectories = (objects > 0).then(|| u(&[objects * nl, 3 * cfg.num_points]));
    CondInputs {
        reference,
        caption: (0..3).map(|_| rng.random_range(0..cfg.caption_vocab)).collect(),
        guidance,
        plucker,
        trajectories,
        entities: (0..objects).map(|_| rng.random_range(0..cfg.vocab)).collect(),
    }
}

fn randomize<T: mf_core::Scalar>(store: &mut ParamStore<T>, std: f64, rng: &mut ChaCha8Rng) {
    let d = Normal::new(0.0, std).unwrap();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = T::from_f64_lossy(d.sample(rng));
        }
    }
}

#[test]
fn attention_rows_are_distributions() {
    let cfg = ModelConfig::tiny();
    let (m, mut store) = DitModel::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    randomize(&mut store, 0.3, &mut rng);
    let cond = random_cond::<f32>(&cfg, 2, &mut rng);
    let mut g = Graph::new();
    let z = g.constant(gaussian(&cfg.latent_shape(), &mut rng));
    let f = m.forward(&mut g, &store, z, 0.4, &cond, Branches::ALL).unwrap();
    // self, context and object attention per base block, self per camera block
    assert_eq!(f.attention.len(), 3 * cfg.blocks + cfg.vcm_blocks);
    for a in &f.attention {
        let k = *g.shape(*a).last().unwrap();
        for row in g.value(*a).data().chunks(k) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|w| *w >= 0.0));
        }
    }
    assert_eq!(g.shape(f.velocity), cfg.latent_shape());
}

#[test]
fn branches_are_silent_at_init() {
    let cfg = ModelConfig::tiny();
    let (m, store) = DitModel::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for objects in [0, 1, 3] {
        let cond = random_cond::<f32>(&cfg, objects, &mut rng);
        let z = gaussian(&cfg.latent_shape(), &mut rng);
        let t = rng.random::<f32>();
        let off = m.velocity(&store, &z, t, &cond, Branches::NONE).unwrap();
        for b in [Branches::ALL, Branches::CAMERA] {
            let on = m.velocity(&store, &z, t, &cond, b).unwrap();
            assert!(on.data().iter().zip(off.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}

#[test]
fn stages_partition_the_parameters() {
    let (_, store) = DitModel::new(ModelConfig::tiny()).unwrap();
    let stages = [Stage::Base, Stage::Camera, Stage::Object];
    for id in store.ids() {
        let name = store.name(id);
        assert_eq!(stages.iter().filter(|s| s.trains(name)).count(), 1, "{name}");
    }
    assert!(store.ids().any(|id| Stage::Camera.trains(store.name(id))));
    assert!(store.ids().any(|id| Stage::Object.trains(store.name(id))));
}

#[test]
fn no_objects_means_no_object_tokens() {
    let cfg = ModelConfig::tiny();
    let (m, mut store) = DitModel::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    randomize(&mut store, 0.2, &mut rng);
    let cond = random_cond::<f32>(&cfg, 0, &mut rng);
    let mut g = Graph::new();
    assert!(m.omm_encode(&mut g, &store, None, &[]).unwrap().is_none());
    let z = gaussian(&cfg.latent_shape(), &mut rng);
    let a = m.velocity(&store, &z, 0.5, &cond, Branches::ALL).unwrap();
    let b = m.velocity(&store, &z, 0.5, &cond, Branches::CAMERA).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_trajectory_tokens_are_label_embeddings() {
    let cfg = ModelConfig::tiny();
    let (m, store) = DitModel::new(cfg.clone()).unwrap();
    let nl = cfg.latent_frames();
    let entities = [2usize, 0];
    let traj = Tensor::<f32>::zeros([entities.len() * nl, 3 * cfg.num_points]);
    let mut g = Graph::new();
    let c = m.omm_encode(&mut g, &store, Some(&traj), &entities).unwrap().unwrap();
    let table = store.value(store.id("omm.label").unwrap());
    let d = cfg.dim;
    for (row, tok) in g.value(c).data().chunks(d).enumerate() {
        let e = entities[row / nl];
        assert_eq!(tok, &table.data()[e * d..(e + 1) * d]);
    }
    let bad = Tensor::<f32>::zeros([nl, 3 * cfg.num_points]);
    assert!(m.omm_encode(&mut g, &store, Some(&bad), &entities).is_err());
}

#[test]
fn decoder_starts_as_interpolating_upsampler() {
    let cfg = ModelConfig::tiny();
    let (m, store) = DitModel::new(cfg.clone()).unwrap();
    let [nl, lh, lw, c] = cfg.latent_shape();
    let lat = Tensor::<f32>::from_fn([nl, lh, lw, c], |i| {
        ((i / (lh * lw * c)) as f32 - cfg.latent_shift) * cfg.latent_scale
    });
    let video = m.decode(&store, &lat).unwrap();
    assert_eq!(video.shape(), [cfg.frames, cfg.height, cfg.width, 3]);
    let per = cfg.height * cfg.width * 3;
    for (j, frame) in video.data().chunks(per).enumerate() {
        let want = j as f32 / cfg.stride as f32;
        assert!(frame.iter().all(|v| (v - want).abs() < 1e-5), "frame {j}");
    }
}

#[test]
fn logit_normal_timesteps_center_on_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 100_000;
    let mean = (0..n).map(|_| sample_timestep(&mut rng)).sum::<f64>() / n as f64;
    assert!((mean - 0.5).abs() < 0.01, "{mean}");
}

#[test]
fn oracle_velocity_has_zero_loss_and_exact_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z0 = gaussian::<f64>(&[5, 8, 8, 3], &mut rng);
    let z1 = gaussian::<f64>(&[5, 8, 8, 3], &mut rng);
    let s = FlowState::new(z0.clone(), z1.clone(), 0.3).unwrap();
    let mut oracle = OracleVelocity { z0: z0.clone(), z1: z1.clone() };
    let v = mf_dit::VelocityField::velocity(&mut oracle, &s.z_t, 0.3).unwrap();
    let mut g = Graph::new();
    let (a, b) = (g.constant(v), g.constant(s.v_t.clone()));
    let loss = g.mse(a, b).unwrap();
    assert_eq!(g.value(loss).item(), 0.0);
    for steps in [1, 5, 20] {
        let z = euler_sample(&mut oracle, z1.clone(), steps).unwrap();
        assert!(z.max_abs_diff(&z0) <= 1e-12);
    }
    let (zt, _) = flow_interpolate(&z0, &z1, 1.0).unwrap();
    assert_eq!(zt, z1);
}

#[test]
fn overfits_a_single_batch() {
    let cfg = ModelConfig::tiny();
    let (m, mut store) = DitModel::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cond = random_cond::<f32>(&cfg, 1, &mut rng);
    let z0 = gaussian::<f32>(&cfg.latent_shape(), &mut rng);
    let ex = mf_dit::train::Example {
        id: "fixed".into(),
        latent: z0.clone(),
        video: Tensor::zeros([cfg.frames, cfg.height, cfg.width, 3]),
        cond,
    };
    let state = FlowState::new(z0, gaussian(&cfg.latent_shape(), &mut rng), 0.6).unwrap();
    let train = TrainConfig {
        lr: 3e-3,
        ..TrainConfig::default()
    };
    store.set_trainable_where(|n| Stage::Base.trains(n));
    let mut opt = AdamW::new(&store);
    let mut losses = Vec::new();
    for _ in 0..200 {
        store.zero_grad();
        losses.push(clip_loss(&m, &mut store, &ex, &state, Stage::Base, 0.0).unwrap());
        opt.step(&mut store, &train, train.lr);
    }
    let (first, last) = (losses[0], *losses.last().unwrap());
    assert!(last * 10.0 <= first, "loss {first} -> {last}");
}

#[test]
fn model_gradients_match_finite_differences() {
    let cfg = ModelConfig::tiny();
    let (m, store) = DitModel::new(cfg.clone()).unwrap();
    let mut store = store.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    randomize(&mut store, 0.3, &mut rng);
    let cond = random_cond::<f64>(&cfg, 2, &mut rng);
    let z_t = gaussian::<f64>(&cfg.latent_shape(), &mut rng);
    let target = gaussian::<f64>(&cfg.latent_shape(), &mut rng);
    let loss = |store: &ParamStore<f64>, grads: bool| {
        let mut g = Graph::new();
        let z = g.constant(z_t.clone());
        let f = m.forward(&mut g, store, z, 0.7, &cond, Branches::ALL).unwrap();
        let t = g.constant(target.clone());
        let l = g.mse(f.velocity, t).unwrap();
        let gr = grads.then(|| g.backward(l).unwrap());
        (g.value(l).item(), gr)
    };
    let (_, grads) = loss(&store, true);
    let grads = grads.unwrap();
    // a sample of coordinates from every parameter tensor
    let mut coords = Vec::new();
    for id in store.ids() {
        let n = store.value(id).numel();
        // distinct, so one perturbation is not overwritten by a duplicate
        for k in rand::seq::index::sample(&mut rng, n, 2.min(n)) {
            coords.push((id, k));
        }
    }
    let analytic: Vec<f64> = coords
        .iter()
        .map(|&(id, k)| grads.param(id).map_or(0.0, |g| g[k]))
        .collect();
    let point: Vec<f64> = coords.iter().map(|&(id, k)| store.value(id).data()[k]).collect();
    let report = grad_check_fn(
        |xs| {
            let mut s = store.clone();
            for (&(id, k), x) in coords.iter().zip(xs) {
                s.value_mut(id).data_mut()[k] = *x;
            }
            loss(&s, false).0
        },
        &analytic,
        &point,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    assert!(report.checked >= coords.len() * 9 / 10);
}

#[test]
fn reference_patches_match_the_token_grid() {
    let cfg = ModelConfig::tiny();
    let x = Tensor::<f32>::zeros([1, cfg.height, cfg.width, 3]);
    let p = patchify(&x, cfg.pixel_patch()).unwrap();
    assert_eq!(p.shape()[0], cfg.tokens_per_frame());
}
