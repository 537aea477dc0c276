use std::fs;
use std::path::Path;

use mf_core::synth::{make_dataset, DatasetOptions};
use mf_dit::train::{load_training_set, stage_snapshot, Example, LOG_FILE, WEIGHTS_FILE};
use mf_dit::{generate, load_model, train, Branches, ModelConfig, RunConfig, Stage, TrainConfig};

fn tiny_dataset(dir: &Path) -> Vec<Example> {
    let opts = DatasetOptions {
        num_frames: 5,
        width: 16,
        height: 16,
        focal: 16.0,
        threads: 1,
        ..DatasetOptions::default()
    };
    make_dataset(4, 7, dir, &opts).unwrap();
    load_training_set(dir, &ModelConfig::tiny()).unwrap()
}

fn run_config() -> RunConfig {
    RunConfig {
        model: ModelConfig::tiny(),
        train: TrainConfig {
            schedule: vec![(Stage::Base, 4), (Stage::Camera, 3), (Stage::Object, 3)],
            warmup: 2,
            checkpoint_every: 3,
            batch: 2,
            ..TrainConfig::default()
        },
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let ex = tiny_dataset(&tmp.path().join("data"));
    let run = run_config();

    let straight = tmp.path().join("straight");
    let s = train(&ex, &run, &straight, None, &mut |_, _, _| {}).unwrap();
    assert_eq!((s.completed, s.ran, s.resumed_from), (10, 10, None));

    let split = tmp.path().join("split");
    let a = train(&ex, &run, &split, Some(5), &mut |_, _, _| {}).unwrap();
    assert_eq!(a.completed, 5);
    let mut seen = Vec::new();
    let b = train(&ex, &run, &split, None, &mut |step, _, _| seen.push(step)).unwrap();
    assert_eq!(b.resumed_from, Some(5));
    assert_eq!(seen, (6..=10).collect::<Vec<_>>());

    for f in [WEIGHTS_FILE, LOG_FILE, "optim.ckpt", &stage_snapshot(Stage::Base)] {
        assert_eq!(fs::read(straight.join(f)).unwrap(), fs::read(split.join(f)).unwrap(), "{f}");
    }
    let log = fs::read_to_string(split.join(LOG_FILE)).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "step,stage,loss,lr");
    assert_eq!(lines.len(), 11);
    assert!(lines[5].starts_with("5,1,"));

    // a finished run resumes to a no-op
    let c = train(&ex, &run, &split, None, &mut |_, _, _| {}).unwrap();
    assert_eq!((c.completed, c.ran), (10, 0));
}

#[test]
fn stages_touch_only_their_parameters() {
    let tmp = tempfile::tempdir().unwrap();
    let ex = tiny_dataset(&tmp.path().join("data"));
    let run = run_config();
    let dir = tmp.path().join("run");
    train(&ex, &run, &dir, None, &mut |_, _, _| {}).unwrap();
    let snap = |s: Stage| load_model(&dir, Some(&dir.join(stage_snapshot(s)))).unwrap().1;
    let (s0, s1, s2) = (snap(Stage::Base), snap(Stage::Camera), snap(Stage::Object));
    let (_, init) = mf_dit::DitModel::new(run.model.clone()).unwrap();
    for id in init.ids() {
        let name = init.name(id);
        let changed = |a: &mf_core::ParamStore, b: &mf_core::ParamStore| a.value(id) != b.value(id);
        if Stage::Base.trains(name) {
            assert!(!changed(&s0, &s1) && !changed(&s1, &s2), "{name}");
        } else if Stage::Camera.trains(name) {
            assert!(!changed(&init, &s0) && !changed(&s1, &s2), "{name}");
        } else {
            assert!(!changed(&init, &s1), "{name}");
        }
    }
}

#[test]
fn mismatched_configuration_refuses_to_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let ex = tiny_dataset(&tmp.path().join("data"));
    let mut run = run_config();
    let dir = tmp.path().join("run");
    train(&ex, &run, &dir, Some(2), &mut |_, _, _| {}).unwrap();
    run.train.lr *= 2.0;
    assert!(train(&ex, &run, &dir, None, &mut |_, _, _| {}).is_err());
}

#[test]
fn diverging_training_stops_with_a_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let mut ex = tiny_dataset(&tmp.path().join("data"));
    for e in &mut ex {
        e.latent.data_mut()[0] = f32::INFINITY;
    }
    let err = train(&ex, &run_config(), &tmp.path().join("run"), None, &mut |_, _, _| {}).unwrap_err();
    assert!(matches!(err, mf_dit::DitError::NonFinite { step: 1, stage: 0, .. }), "{err}");
}

#[test]
fn checkpoint_round_trip_reproduces_generation() {
    let tmp = tempfile::tempdir().unwrap();
    let ex = tiny_dataset(&tmp.path().join("data"));
    let run = run_config();
    let dir = tmp.path().join("run");
    train(&ex, &run, &dir, None, &mut |_, _, _| {}).unwrap();
    let (m, store) = load_model(&dir, None).unwrap();
    let (m2, store2) = load_model(&dir, None).unwrap();
    let a = generate(&m, &store, &ex[0].cond, 3, 9, Branches::ALL).unwrap();
    let b = generate(&m2, &store2, &ex[0].cond, 3, 9, Branches::ALL).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 5);
    assert!(a.iter().all(|f| f.data.iter().all(|v| (0.0..=1.0).contains(v))));
    let c = generate(&m, &store, &ex[0].cond, 3, 10, Branches::ALL).unwrap();
    assert_ne!(a, c);
}
