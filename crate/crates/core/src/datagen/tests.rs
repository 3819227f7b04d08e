use super::*;

fn rigid_cfg(h: usize, w: usize) -> DataConfig {
    DataConfig {
        mode: DataMode::Rigid,
        height: h,
        width: w,
        ..DataConfig::default()
    }
}

fn plane_scene(h: usize, w: usize, depth: f64, pose: Pose) -> RigidScene {
    RigidScene {
        height: h,
        width: w,
        depth: vec![depth; h * w],
        intrinsics: Intrinsics::for_size(h, w),
        pose,
    }
}

/// Homogeneous 4x4 camera motion followed by the pinhole projection.
fn oracle_target(scene: &RigidScene, y: usize, x: usize) -> [f64; 2] {
    let k = scene.intrinsics;
    let d = scene.depth[y * scene.width + x];
    let mut m = [[0.0; 4]; 4];
    for ((row, rot), t) in m.iter_mut().zip(&scene.pose.rotation).zip(scene.pose.translation) {
        row[..3].copy_from_slice(rot);
        row[3] = t;
    }
    m[3][3] = 1.0;
    let ray = [(x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0];
    let pt = [ray[0] * d, ray[1] * d, d, 1.0];
    let c: Vec<f64> = (0..4).map(|i| (0..4).map(|j| m[i][j] * pt[j]).sum()).collect();
    [k.fx * (c[0] / c[2]) + k.cx, k.fy * (c[1] / c[2]) + k.cy]
}

#[test]
fn identity_pose_gives_zero_flow() {
    let mut scene = synth_scene(3, 16, 16, &rigid_cfg(16, 16));
    scene.pose = Pose::identity();
    let f = rigid_flow(&scene);
    assert_eq!(f.n_valid(), 256);
    assert!(f.tensor().data().iter().all(|&v| v == 0.0));
    let pair = render_pair(&scene, 9);
    assert_eq!(pair.i1, pair.i2);
    assert!(pair.gt.tensor().data().iter().all(|&v| v == 0.0));
}

#[test]
fn forward_motion_expands_radially() {
    let scene = plane_scene(33, 33, 5.0, Pose::from_axis_angle([0.0, 0.0, 1.0], 0.0, [0.0, 0.0, -0.5]));
    let f = rigid_flow(&scene);
    assert_eq!(f.get(16, 16), [0.0, 0.0]);
    for y in 0..33 {
        for x in 0..33 {
            if (y, x) == (16, 16) || !f.is_valid(y, x) {
                continue;
            }
            let [u, v] = f.get(y, x);
            let (dx, dy) = (x as f64 - 16.0, y as f64 - 16.0);
            assert!(u * dx + v * dy > 0.0);
            // radial: flow parallel to the offset from the principal point
            assert!((u * dy - v * dx).abs() < 1e-9);
        }
    }
}

#[test]
fn reprojection_identity_holds() {
    let cfg = rigid_cfg(48, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..10 {
        let scene = synth_scene(seed, 48, 64, &cfg);
        scene.validate().unwrap();
        let f = rigid_flow(&scene);
        for _ in 0..1000 {
            let (y, x) = (rng.gen_range(0..48), rng.gen_range(0..64));
            if !f.is_valid(y, x) {
                continue;
            }
            let t = oracle_target(&scene, y, x);
            let [u, v] = f.get(y, x);
            assert!((x as f64 + u - t[0]).abs() <= 1e-6 && (y as f64 + v - t[1]).abs() <= 1e-6);
        }
        assert!(reprojection_error(&scene, &f) <= 1e-6);
    }
}

#[test]
fn scenes_are_deterministic() {
    let cfg = rigid_cfg(24, 24);
    assert_eq!(synth_scene(5, 24, 24, &cfg), synth_scene(5, 24, 24, &cfg));
    assert_ne!(synth_scene(5, 24, 24, &cfg).pose, synth_scene(6, 24, 24, &cfg).pose);
    let a = generate(&cfg, 8);
    let b = generate(&cfg, 8);
    assert_eq!((a.i1, a.i2, a.gt), (b.i1, b.i2, b.gt));
}

#[test]
fn zero_motion_scale_is_identity() {
    let cfg = DataConfig {
        motion_scale: 0.0,
        ..rigid_cfg(16, 16)
    };
    for seed in 0..5 {
        assert!(synth_scene(seed, 16, 16, &cfg).pose.is_identity());
    }
}

#[test]
fn flow_respects_configured_bound() {
    let cfg = DataConfig {
        max_translation: 2.0,
        max_rotation_deg: 20.0,
        ..rigid_cfg(32, 32)
    };
    let bound = cfg.max_flow_fraction * 32.0;
    for seed in 0..100 {
        let scene = synth_scene(seed, 32, 32, &cfg);
        assert!(rigid_flow(&scene).max_magnitude() <= bound, "seed {seed}");
    }
}

#[test]
fn integer_translation_shifts_the_image() {
    // fronto-parallel plane at 4 m, focal 32 px: 0.25 m sideways is 2 px
    let scene = plane_scene(32, 32, 4.0, Pose::from_axis_angle([0.0; 3], 0.0, [0.25, 0.0, 0.0]));
    let pair = render_pair(&scene, 21);
    for y in 0..32 {
        for x in 0..32 {
            assert_eq!(pair.gt.is_valid(y, x), x <= 29);
            if x <= 29 {
                assert_eq!(pair.gt.get(y, x), [2.0, 0.0]);
                assert_eq!(pair.i2.get(y, x + 2), pair.i1.get(y, x));
            }
        }
    }
}

#[test]
fn warped_frames_are_photometrically_consistent() {
    let cfg = rigid_cfg(64, 64);
    for seed in 0..10 {
        let pair = generate(&cfg, seed);
        let (mut sum, mut n) = (0.0, 0usize);
        for y in 0..64 {
            for x in 0..64 {
                if !pair.gt.is_valid(y, x) {
                    continue;
                }
                let [u, v] = pair.gt.get(y, x);
                let b = sample_image(&pair.i2, x as f64 + u, y as f64 + v).expect("valid target inside frame");
                let a = pair.i1.get(y, x);
                sum += (0..3).map(|c| (a[c] - b[c]).abs() as f64).sum::<f64>() / 3.0;
                n += 1;
            }
        }
        assert!(n > 64 * 64 / 2, "seed {seed}: only {n} valid");
        let mean = sum / n as f64;
        assert!(mean < 0.02, "seed {seed}: {mean}");
    }
}

#[test]
fn valid_pixels_land_in_front_and_inside() {
    let cfg = rigid_cfg(32, 32);
    for seed in 0..20 {
        let scene = synth_scene(seed, 32, 32, &cfg);
        let pair = render_pair(&scene, seed);
        for y in 0..32 {
            for x in 0..32 {
                if pair.gt.is_valid(y, x) {
                    let (q, z) = scene.project(y, x);
                    assert!(z > 0.0 && scene.inside(q));
                }
            }
        }
    }
}

#[test]
fn occluded_pixels_are_masked() {
    // a near square in front of a far plane slides sideways faster than the
    // background, covering part of it
    let (h, w) = (32, 32);
    let mut scene = plane_scene(h, w, 16.0, Pose::from_axis_angle([0.0; 3], 0.0, [0.5, 0.0, 0.0]));
    for y in 10..20 {
        for x in 10..20 {
            scene.depth[y * w + x] = 2.0;
        }
    }
    let pair = render_pair(&scene, 1);
    // background lands 1 px right, foreground 8 px right; background pixels
    // whose target falls under the moved square are hidden
    for y in 10..20 {
        assert!(!pair.gt.is_valid(y, 21));
        assert!(pair.gt.is_valid(y, 12));
    }
}

#[test]
fn invalid_scenes_rejected() {
    let mut s = plane_scene(4, 4, 3.0, Pose::identity());
    s.depth[2] = -1.0;
    assert!(s.validate().is_err());
    let mut s = plane_scene(4, 4, 3.0, Pose::identity());
    s.pose.rotation[0][0] = 2.0;
    assert!(s.validate().is_err());
    let mut s = plane_scene(4, 4, 3.0, Pose::identity());
    s.pose.rotation[0][0] = -1.0;
    s.pose.rotation[1][1] = 1.0;
    s.pose.rotation[2][2] = 1.0;
    assert!(s.validate().is_err());
}

#[test]
fn affine_examples() {
    let p = affine_pair_with(&AffineMotion::identity(), 3, 16, 16);
    assert!(p.gt.tensor().data().iter().all(|&v| v == 0.0));
    assert_eq!(p.i1, p.i2);
    let p = affine_pair_with(&AffineMotion::translation(3.0, -2.0), 3, 16, 16);
    for y in 0..16 {
        for x in 0..16 {
            assert_eq!(p.gt.get(y, x), [3.0, -2.0]);
            assert_eq!(p.gt.is_valid(y, x), x + 3 <= 15 && y >= 2);
        }
    }
}

#[test]
fn affine_flow_matches_pointwise_warp() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..20 {
        let pair = affine_pair(seed, 24, 32, 8.0);
        let Motion::Affine(m) = &pair.meta.motion else { panic!() };
        let (cx, cy) = (15.5, 11.5);
        for _ in 0..200 {
            let (y, x) = (rng.gen_range(0..24), rng.gen_range(0..32));
            let (px, py) = (x as f64 - cx, y as f64 - cy);
            let qx = m.matrix[0][0] * px + m.matrix[0][1] * py + m.translation[0] + cx;
            let qy = m.matrix[1][0] * px + m.matrix[1][1] * py + m.translation[1] + cy;
            let [u, v] = pair.gt.get(y, x);
            assert!((qx - x as f64 - u).abs() < 1e-6 && (qy - y as f64 - v).abs() < 1e-6);
            // frame 2 shows frame 1's texture at the displaced position
            let tex = Texture::new(pair.meta.texture_seed);
            let back = m.invert(qx, qy, cx, cy);
            let (a, b) = (tex.eval(back[0], back[1]), pair.i1.get(y, x));
            assert!((0..3).all(|c| (a[c] - b[c]).abs() < 1e-5));
        }
        assert!(pair.gt.max_magnitude() <= 8.0 + 1e-9);
    }
}

#[test]
fn texture_has_contrast() {
    let img = Texture::new(4).render(32, 32);
    let lum: Vec<f32> = (0..32 * 32).map(|i| img.get(i / 32, i % 32).iter().sum::<f32>() / 3.0).collect();
    let mean = lum.iter().sum::<f32>() / lum.len() as f32;
    let var = lum.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / lum.len() as f32;
    assert!(var.sqrt() > 0.05, "{}", var.sqrt());
    assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

