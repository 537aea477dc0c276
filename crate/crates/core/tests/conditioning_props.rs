use mf_core::conditioning::{
    build_control_package_from, fit_boxes, project_trajectory, temporal_downsample, Box3D, ConditioningOptions,
    ControlSpec, ObjectMotion, ObjectSpec, ObjectTrajectory3D,
};
use mf_core::geometry::{axis_angle, CameraIntrinsics, CameraPose, CameraTrajectory};
use mf_core::raster::{DepthMap, Image};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn intr() -> CameraIntrinsics<f64> {
    CameraIntrinsics::new(64.0, 64.0, 31.5, 31.5, 64, 64).unwrap()
}

#[test]
fn fitted_boxes_contain_every_valid_point() {
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..10);
        let np = rng.random_range(1..12);
        let traj = ObjectTrajectory3D {
            object_id: 0,
            frames: (0..n)
                .map(|_| {
                    (0..np)
                        .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-1.0..5.0)])
                        .collect()
                })
                .collect(),
        };
        let poses = (0..n)
            .map(|_| {
                CameraPose::new(
                    axis_angle([0.0, 1.0, 0.1], rng.random_range(-0.3..0.3)),
                    [rng.random_range(-0.5..0.5), 0.0, rng.random_range(-0.5..0.5)],
                )
            })
            .collect();
        let cams = CameraTrajectory::new(poses, intr()).unwrap();
        let proj = project_trajectory(&traj, &cams).unwrap();
        let pad = rng.random_range(0.0..3.0);
        let boxes = fit_boxes(0, &proj, pad, 64, 64);
        for (frame, b) in proj.iter().zip(&boxes.boxes) {
            let Some(b) = b else { continue };
            assert!(b.x0 <= b.x1 && b.y0 <= b.y1);
            for p in frame.iter().filter(|p| p.valid) {
                let inside_image = (-0.5..=63.5).contains(&p.u) && (-0.5..=63.5).contains(&p.v);
                if inside_image {
                    assert!(p.u >= b.x0 && p.u <= b.x1 && p.v >= b.y0 && p.v <= b.y1, "seed {seed}");
                }
            }
        }
    }
}

#[test]
fn static_camera_boxes_follow_linear_motion() {
    let b = Box3D {
        center: [-0.6, 0.2, 3.0],
        half_extents: [0.25; 3],
    };
    let traj = mf_core::conditioning::box_keyframes_to_trajectory(0, &b, &[(1, b.center), (9, [0.6, -0.2, 3.0])], 9, 9)
        .unwrap();
    let proj = project_trajectory(&traj, &CameraTrajectory::static_identity(9, intr())).unwrap();
    let boxes: Vec<_> = fit_boxes(0, &proj, 0.0, 64, 64).boxes.into_iter().map(Option::unwrap).collect();
    assert!(boxes.windows(2).all(|w| w[1].x0 > w[0].x0 && w[1].x1 > w[0].x1));
    assert!(boxes.windows(2).all(|w| w[1].y0 < w[0].y0 && w[1].y1 < w[0].y1));
}

#[test]
fn downsampling_keeps_first_frame() {
    let frames: Vec<u32> = (0..23).collect();
    for s in 1..30 {
        assert_eq!(temporal_downsample(&frames, s)[0], 0);
    }
}

#[test]
fn package_is_stable_across_runs() {
    let spec = ControlSpec {
        reference_image: "r.png".into(),
        depth_map: "d.pfm".into(),
        intrinsics: intr(),
        num_frames: 9,
        camera: (0..9)
            .map(|j| CameraPose::new(axis_angle([0.0, 1.0, 0.0], 0.02 * j as f64), [0.05 * j as f64, 0.0, 0.0]))
            .collect(),
        objects: vec![ObjectSpec {
            id: 3,
            label: "yellow cube".into(),
            motion: ObjectMotion::Points(
                (0..9)
                    .map(|j| (0..9).map(|i| [0.1 * i as f64, 0.05 * j as f64, 3.0]).collect())
                    .collect(),
            ),
        }],
        caption: "a yellow cube".into(),
        seed: 0,
    };
    let img = Image::from_rgb8(64, 64, &(0..64 * 64 * 3).map(|i| (i % 255) as u8).collect::<Vec<_>>());
    let depth = DepthMap::new(64, 64, (0..64 * 64).map(|i| 2.0 + (i % 17) as f32 * 0.1).collect());
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let pkg = build_control_package_from(&spec, &img, &depth, &ConditioningOptions::default()).unwrap();
        pkg.write_to_dir(d.path()).unwrap();
    }
    for f in ["plucker.bin", "package.json", "guidance/000.png", "guidance/008.png"] {
        let a = std::fs::read(dirs[0].path().join(f)).unwrap();
        let b = std::fs::read(dirs[1].path().join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}
