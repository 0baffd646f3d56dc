mod common;

use gnerf_core::camera::{generate_rays, look_at, orbit_pose, Intrinsics, PoseDistribution};
use gnerf_core::linalg::{Mat3, Vec3};
use gnerf_core::render::{render, FieldSample, RenderConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn blob_field_matches_fine_quadrature() {
    let (color, depth) = common::blobs::compare(100, 256, 16384, 1);
    assert!(color < 1e-3, "color error {color}");
    assert!(depth < 1e-2, "depth error {depth}");
}

#[test]
fn coarse_sampling_is_measurably_worse() {
    let (fine_color, _) = common::blobs::compare(40, 256, 16384, 2);
    let (coarse_color, _) = common::blobs::compare(40, 8, 16384, 2);
    assert!(coarse_color > 10.0 * fine_color);
}

#[test]
fn opaque_slab_depth_matches_intersection() {
    let z0 = -0.2;
    let slab = |p: &Vec3<f64>, _: &Vec3<f64>| FieldSample {
        color: [0.5, 0.5, 0.5],
        density: if p.z() > z0 { 1e4 } else { 0.0 },
    };
    let pose = look_at(Vec3::new(0.0, 0.0, -2.5), Vec3::zero()).unwrap();
    let intr = Intrinsics::centered(9, 9, 12.0).unwrap();
    let cfg = RenderConfig {
        t_near: 1.0,
        t_far: 4.0,
        samples: 512,
        jitter: false,
        background: [1.0; 3],
    };
    let view = render(&slab, &pose, &intr, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for (ray, &d) in generate_rays(&pose, &intr).iter().zip(&view.depth.data) {
        let t = (z0 - ray.origin.z()) / ray.direction.z();
        assert!((d - t).abs() < 1e-2, "depth {d} vs intersection {t}");
    }
    assert!(view.weights.data.iter().all(|&w| w > 0.999));
}

#[test]
fn depth_is_never_negative() {
    let field = |p: &Vec3<f64>, _: &Vec3<f64>| FieldSample {
        color: [0.2, 0.4, 0.6],
        density: 3.0 * (-p.dot(p)).exp(),
    };
    let pose = PoseDistribution::<f64>::default().frontal();
    let intr = Intrinsics::centered(6, 6, 8.0).unwrap();
    let mut cfg = RenderConfig::for_radius(2.7, 32);
    cfg.jitter = true;
    let view = render(&field, &pose, &intr, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert!(view.depth.data.iter().all(|&d| d >= 0.0));
    assert!(view.weights.data.iter().all(|&w| (0.0..=1.0).contains(&w)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rays_rotate_with_the_camera(
        yaw in -0.6f64..0.6, pitch in -0.3f64..0.3,
        ax in -1.0f64..1.0, ay in -1.0f64..1.0, az in -1.0f64..1.0,
    ) {
        let pose = orbit_pose(yaw, pitch, 2.7, Vec3::zero()).unwrap();
        let q = Mat3::from_axis_angle(Vec3::new(ax, ay, az));
        let intr = Intrinsics::centered(4, 3, 5.0).unwrap();
        let base = generate_rays(&pose, &intr);
        let moved = generate_rays(&pose.rotated(&q), &intr);
        for (a, b) in base.iter().zip(&moved) {
            let d = q.mul_vec(&a.direction) - b.direction;
            let o = q.mul_vec(&a.origin) - b.origin;
            prop_assert!(d.norm() < 1e-12);
            prop_assert!(o.norm() < 1e-12);
        }
    }

    #[test]
    fn orbit_poses_look_at_the_target(yaw in -0.6f64..0.6, pitch in -0.3f64..0.3, radius in 1.5f64..4.0) {
        let pose = orbit_pose(yaw, pitch, radius, Vec3::zero()).unwrap();
        prop_assert!((pose.translation.norm() - radius).abs() < 1e-12);
        let toward = (-pose.translation).normalized();
        prop_assert!((pose.forward().dot(&toward) - 1.0).abs() < 1e-12);
        prop_assert!(pose.rotation.orthonormality_residual() < 1e-12);
        prop_assert!((pose.yaw_about(&Vec3::zero()) - yaw).abs() < 1e-9);
    }
}
