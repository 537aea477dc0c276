use mf_core::geometry::{
    axis_angle, canonicalize, dot, norm, plucker_map, project_point, render_trajectory, splat_render, unproject_depth,
    CameraIntrinsics, CameraPose, CameraTrajectory, PointCloud,
};
use mf_core::raster::{DepthMap, Image};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_pose(rng: &mut impl Rng, max_angle: f64, max_shift: f64) -> CameraPose<f64> {
    let axis = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.1..1.0)];
    let t = [
        rng.random_range(-max_shift..max_shift),
        rng.random_range(-max_shift..max_shift),
        rng.random_range(-max_shift..max_shift),
    ];
    CameraPose::new(axis_angle(axis, rng.random_range(-max_angle..max_angle)), t)
}

fn random_cloud(rng: &mut impl Rng, n: usize) -> PointCloud<f64> {
    let points = (0..n)
        .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-0.5..6.0)])
        .collect();
    let colors = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    PointCloud::new(points, colors)
}

/// Per-pixel scan over all points: the nearest point centered on the pixel
/// wins; failing that, the nearest covering footprint. Earlier points win
/// ties.
fn brute_force(cloud: &PointCloud<f64>, k: &CameraIntrinsics<f64>, pose: &CameraPose<f64>, r: i64, bg: [f32; 3]) -> (Image, Vec<bool>) {
    let r_t = [
        [pose.rotation[0][0], pose.rotation[1][0], pose.rotation[2][0]],
        [pose.rotation[0][1], pose.rotation[1][1], pose.rotation[2][1]],
        [pose.rotation[0][2], pose.rotation[1][2], pose.rotation[2][2]],
    ];
    let cam: Vec<[f64; 3]> = cloud
        .points
        .iter()
        .map(|p| {
            let d = [p[0] - pose.translation[0], p[1] - pose.translation[1], p[2] - pose.translation[2]];
            [
                r_t[0][0] * d[0] + r_t[0][1] * d[1] + r_t[0][2] * d[2],
                r_t[1][0] * d[0] + r_t[1][1] * d[1] + r_t[1][2] * d[2],
                r_t[2][0] * d[0] + r_t[2][1] * d[1] + r_t[2][2] * d[2],
            ]
        })
        .collect();
    let mut img = Image::filled(k.width, k.height, bg);
    let mut mask = vec![false; k.width * k.height];
    for y in 0..k.height as i64 {
        for x in 0..k.width as i64 {
            let nearest = |reach: i64| {
                let mut best: Option<(f64, usize)> = None;
                for (i, c) in cam.iter().enumerate() {
                    if c[2] <= 1e-4 {
                        continue;
                    }
                    let u = (k.fx * c[0] / c[2] + k.cx).round() as i64;
                    let v = (k.fy * c[1] / c[2] + k.cy).round() as i64;
                    if (u - x).abs() <= reach && (v - y).abs() <= reach && best.is_none_or(|(d, _)| c[2] < d) {
                        best = Some((c[2], i));
                    }
                }
                best
            };
            let best = nearest(0).or_else(|| nearest(r));
            if let Some((_, i)) = best {
                img.set(x as usize, y as usize, cloud.colors[i]);
                mask[y as usize * k.width + x as usize] = true;
            }
        }
    }
    (img, mask)
}

#[test]
fn splat_matches_brute_force_oracle() {
    let k = CameraIntrinsics::new(12.0, 12.0, 7.5, 8.0, 16, 16).unwrap();
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(0..=200);
        let cloud = random_cloud(&mut rng, n);
        let pose = random_pose(&mut rng, 0.4, 0.5);
        let r = rng.random_range(0..=2);
        let bg = [0.0, 0.1, 0.2];
        let out = splat_render(&cloud, &k, &pose, r, bg);
        let (img, mask) = brute_force(&cloud, &k, &pose, r as i64, bg);
        assert_eq!(out.image, img, "seed {seed}");
        assert_eq!(out.mask.data, mask, "seed {seed}");
    }
}

#[test]
fn rendering_is_invariant_to_rigid_motion_of_scene_and_camera() {
    let k = CameraIntrinsics::new(12.0, 12.0, 8.0, 8.0, 16, 16).unwrap();
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let cloud = random_cloud(&mut rng, 150);
        let p = random_pose(&mut rng, 3.0, 5.0);
        let q = random_pose(&mut rng, 0.3, 0.5);
        let a = splat_render(&cloud.transformed(&p), &k, &p.compose(&q), 1, [0.0; 3]);
        let b = splat_render(&cloud, &k, &q, 1, [0.0; 3]);
        assert_eq!(a.image, b.image, "seed {seed}");
        assert_eq!(a.mask, b.mask, "seed {seed}");
    }
}

#[test]
fn canonicalize_is_idempotent() {
    let k = CameraIntrinsics::new(20.0, 20.0, 8.0, 8.0, 16, 16).unwrap();
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..6);
        let poses = (0..n).map(|_| random_pose(&mut rng, 3.0, 4.0)).collect();
        let once = canonicalize(&CameraTrajectory::new(poses, k).unwrap()).unwrap();
        assert!(once.is_canonical());
        assert_eq!(canonicalize(&once).unwrap(), once);
    }
}

#[test]
fn plucker_rays_are_unit_and_orthogonal_to_moments() {
    let k = CameraIntrinsics::new(30.0, 25.0, 10.0, 6.5, 20, 12).unwrap();
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pose = random_pose(&mut rng, 3.0, 10.0);
        for r in plucker_map(&k, &pose).rays {
            let d = [r[0], r[1], r[2]];
            let m = [r[3], r[4], r[5]];
            assert!((norm(&d) - 1.0).abs() < 1e-5);
            assert!(dot(&d, &m).abs() < 1e-5);
        }
    }
}

#[test]
fn projection_inverts_unprojection() {
    let k = CameraIntrinsics::new(40.0, 36.0, 15.5, 11.0, 32, 24).unwrap();
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pose = random_pose(&mut rng, 3.0, 10.0);
        let depth: Vec<f32> = (0..32 * 24)
            .map(|_| if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.2..20.0) })
            .collect();
        let depth = DepthMap::new(32, 24, depth);
        let cloud = unproject_depth(&depth, &k, &pose, &Image::new(32, 24)).unwrap();
        for (p, &src) in cloud.points.iter().zip(&cloud.source_pixels) {
            let pr = project_point(p, &k, &pose);
            assert!(pr.valid);
            assert!((pr.u - (src % 32) as f64).abs() < 1e-3);
            assert!((pr.v - (src / 32) as f64).abs() < 1e-3);
        }
    }
}

#[test]
fn static_camera_reprojects_reference_colors() {
    let k = CameraIntrinsics::new(20.0, 20.0, 8.0, 8.0, 16, 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let reference = Image::from_rgb8(16, 16, &(0..16 * 16 * 3).map(|_| rng.random()).collect::<Vec<u8>>());
    let depth = DepthMap::new(16, 16, (0..256).map(|i| if i % 7 == 0 { 0.0 } else { 1.0 + (i % 5) as f32 }).collect());
    let cloud = unproject_depth(&depth, &k, &CameraPose::identity(), &reference).unwrap();
    let traj = CameraTrajectory::static_identity(3, k);
    for radius in [0, 1, 2] {
        let g = render_trajectory(&cloud, &traj, &reference, radius, [0.0; 3]).unwrap();
        assert_eq!(g.frames[0], reference);
        for f in &g.frames[1..] {
            assert_eq!(f, &g.frames[1]);
            for y in 0..16 {
                for x in 0..16 {
                    if depth.is_valid(x, y) {
                        let (a, b) = (f.get(x, y), reference.get(x, y));
                        assert!((0..3).all(|c| (a[c] - b[c]).abs() <= 1.0 / 255.0), "radius {radius}");
                    }
                }
            }
        }
    }
}

#[test]
fn dolly_forward_reduces_mean_depth() {
    let k = CameraIntrinsics::new(20.0, 20.0, 8.0, 8.0, 16, 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cloud = PointCloud::new(
        (0..100)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(4.0..6.0)])
            .collect(),
        vec![[1.0; 3]; 100],
    );
    let mean_depth = |pose: &CameraPose<f64>| {
        let d: Vec<f64> = cloud.points.iter().map(|p| project_point(p, &k, pose).depth).collect();
        d.iter().sum::<f64>() / d.len() as f64
    };
    let depths: Vec<f64> = (0..5).map(|j| mean_depth(&CameraPose::from_translation([0.0, 0.0, 0.5 * j as f64]))).collect();
    assert!(depths.windows(2).all(|w| w[1] < w[0]));
}
