mod common;

use gnerf_core::error::Error;
use gnerf_core::eval::*;
use gnerf_core::image::Image;
use gnerf_core::losses::{FeatureExtractor, LossConfig};
use gnerf_core::oracle::item_rng;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn random_depth(seed: u64, side: usize) -> Image<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(side, side, 1, (0..side * side).map(|_| rng.gen_range(2.0..3.0)).collect()).unwrap()
}

#[test]
fn depth_mse_examples() {
    let gt = random_depth(1, 64);
    let mask = vec![true; 64 * 64];
    assert_eq!(depth_mse(&gt, &gt, &mask, true).unwrap(), 0.0);
    let shifted = gt.map(|v| v + 0.37);
    assert!(depth_mse(&shifted, &gt, &mask, true).unwrap() < 1e-20);
    assert!((depth_mse(&shifted, &gt, &mask, false).unwrap() - 0.37f64.powi(2)).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let noise = Normal::new(0.0, 0.1).unwrap();
    let noisy = Image::new(64, 64, 1, gt.data.iter().map(|&v| v + noise.sample(&mut rng)).collect()).unwrap();
    let e = depth_mse(&noisy, &gt, &mask, true).unwrap();
    assert!((e - 0.01).abs() < 0.002, "{e}");
}

#[test]
fn depth_mse_is_symmetric_and_masked() {
    let a = random_depth(3, 8);
    let b = random_depth(4, 8);
    let mask: Vec<bool> = (0..64).map(|i| i % 3 != 0).collect();
    assert_eq!(depth_mse(&a, &b, &mask, true).unwrap(), depth_mse(&b, &a, &mask, true).unwrap());
    let mut c = b.clone();
    for (v, &m) in c.data.iter_mut().zip(&mask) {
        if !m {
            *v = 100.0;
        }
    }
    assert_eq!(depth_mse(&a, &b, &mask, true).unwrap(), depth_mse(&a, &c, &mask, true).unwrap());
    assert!(matches!(depth_mse(&a, &b, &[false; 64], true), Err(Error::EmptyMask)));
    assert!(depth_mse(&a, &random_depth(5, 4), &mask, true).is_err());
}

#[test]
fn psnr_and_ssim_examples() {
    let x = Image::new(16, 16, 3, (0..768).map(|i| (i % 17) as f64 / 20.0).collect()).unwrap();
    assert_eq!(psnr(&x, &x).unwrap(), PSNR_CAP);
    let y = x.map(|v| v + 0.1);
    assert!((psnr(&x, &y).unwrap() - 20.0).abs() < 1e-9);
    assert!((metric_ssim(&x, &x, 11).unwrap() - 1.0).abs() < 1e-6);
    assert!(psnr(&x, &Image::filled(8, 8, 3, 0.0)).is_err());
}

#[test]
fn splits_partition_the_yaws() {
    for i in 0..=120 {
        let yaw = -0.6 + 0.01 * i as f64;
        let s = split_of(yaw, 0.45);
        assert_eq!(s == Split::Side, yaw.abs() >= 0.45);
        assert_ne!(s, Split::All);
    }
}

#[test]
fn identity_proxy_examples() {
    let cfg = common::tiny_config(&[]);
    let setup = cfg.synthesis_setup().unwrap();
    let probe = ProbeEncoder::<f64>::new(cfg.probe_seed).unwrap();
    let front = setup.poses.frontal();
    let side = setup.poses.pose_from_angles(0.5, 0.0).unwrap();
    let mut same = 0.0;
    let mut different = 0.0;
    let n = 100;
    let scenes: Vec<_> = (0..=n)
        .map(|i| {
            let w = setup.generator.sample_latent(1.0, &mut item_rng(77, i)).unwrap();
            setup.generator.decode_scene(&w).unwrap().clean()
        })
        .collect();
    let render = |s, p| setup.generator.render_scene(s, p, &setup.intrinsics, &setup.render).unwrap().image;
    for i in 0..n {
        let a = render(&scenes[i], &front);
        let b = render(&scenes[i], &side);
        let c = render(&scenes[i + 1], &front);
        if i == 0 {
            assert!((identity_proxy(&a, &a, &probe).unwrap() - 1.0).abs() < 1e-6);
            assert_eq!(identity_proxy(&a, &b, &probe).unwrap(), identity_proxy(&b, &a, &probe).unwrap());
        }
        same += identity_proxy(&a, &b, &probe).unwrap();
        different += identity_proxy(&a, &c, &probe).unwrap();
    }
    assert!(same / n as f64 > different / n as f64, "same {same} vs different {different}");
}

#[test]
fn diversity_examples() {
    let features = FeatureExtractor::<f64>::new(&LossConfig::default(), 3).unwrap();
    let x = Image::filled(8, 8, 3, 0.3);
    assert_eq!(diversity(&[x.clone(), x.clone(), x.clone()], &features).unwrap(), 0.0);
    assert!(diversity(&[x.clone()], &features).is_err());
    let y = Image::filled(8, 8, 3, 0.7);
    assert!(diversity(&[x, y], &features).unwrap() > 0.0);
}

#[test]
fn sweep_rows_and_determinism() {
    let cfg = common::tiny_config(&[]);
    let setup = cfg.synthesis_setup().unwrap();
    let features = FeatureExtractor::new(&cfg.loss_config(), 3).unwrap();
    let psis = [0.0, 0.5, 1.0];
    let a = truncation_sweep(&setup, &psis, 12, 5, &features, true).unwrap();
    let b = truncation_sweep(&setup, &psis, 12, 5, &features, true).unwrap();
    assert_eq!(a, b);
    assert!(a[0].diversity.abs() < 1e-6);
    assert_eq!(a[0].geometry_error, 0.0);
    assert!(a[1].diversity > 0.0 && a[2].diversity > a[1].diversity);
    assert!(a[2].geometry_error >= a[1].geometry_error);
    assert!(truncation_sweep(&setup, &[1.5], 4, 5, &features, true).is_err());
    let csv = sweep_csv(&a);
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn ablation_rows_and_report_shape() {
    let names: Vec<&str> = ablation_arms().iter().map(|(n, _)| *n).collect();
    assert_eq!(names, ["no-synthetic", "psi=1.0", "psi=0.5", "psi=0.5+D"]);
    let cfg = common::tiny_config(&["total_steps=2", "n_test=2"]);
    assert!(ablation_suite(&cfg, &[0, 1], |_, _, _| {}).is_err());
    let a = ablation_suite(&cfg, &[0, 1, 2], |_, _, _| {}).unwrap();
    let b = ablation_suite(&cfg, &[0, 1, 2], |_, _, _| {}).unwrap();
    assert_eq!(a, b);
    let csv = a.csv();
    assert!(csv.starts_with("config,depth,depth_side,"));
    assert_eq!(csv.lines().count(), 5);
    for row in &a.rows {
        assert_eq!(row.runs.len(), 3);
        assert!(row.median("depth").is_finite() && row.median("depth_side").is_finite());
        assert_eq!(row.runs[0].report.side.side_yaw, cfg.side_yaw);
    }
}
