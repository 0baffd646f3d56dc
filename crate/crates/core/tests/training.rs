mod common;

use gnerf_core::error::Error;
use gnerf_core::train::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn data(cfg: &gnerf_core::config::Config) -> TrainData<f32> {
    let setup = cfg.synthesis_setup().unwrap();
    cfg.training_data(&setup).unwrap().cast()
}

#[test]
fn branch_fraction_tracks_the_threshold() {
    for threshold in [0.5, 0.2] {
        let cfg = common::tiny_config(&[&format!("gamma_threshold={threshold}")]).train_config();
        let n = 10_000;
        let synthetic = (0..n)
            .filter(|&s| branch_for_step(&cfg, s).unwrap().0 == Branch::Synthetic)
            .count();
        let frac = synthetic as f64 / n as f64;
        assert!((frac - threshold).abs() < 0.02, "fraction {frac} for threshold {threshold}");
    }
}

#[test]
fn disabling_synthetic_data_uses_only_the_real_branch() {
    let cfg = common::tiny_config(&["use_synthetic=false", "use_discriminator=false"]).train_config();
    assert!((0..500).all(|s| branch_for_step(&cfg, s).unwrap().0 == Branch::Real));
}

#[test]
fn loss_is_finite_at_initialization() {
    for seed in 0..10 {
        let cfg = common::tiny_config(&[&format!("init_seed={seed}"), &format!("seed={seed}")]);
        let d = data(&cfg);
        let mut tr = cfg.trainer::<f32>().unwrap();
        let r = tr.train_step(&d).unwrap();
        assert!(r.total.is_finite() && r.d_adv.is_finite() && r.r1.is_finite());
    }
}

#[test]
fn generator_step_leaves_the_discriminator_untouched() {
    let cfg = common::tiny_config(&[]);
    let d = data(&cfg);
    let mut tr = cfg.trainer::<f32>().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = build_batch(Branch::Synthetic, &d, 1, true, &mut rng).unwrap();
    let disc = tr.model.discriminator.tensors.clone();
    let gen = tr.model.generator.tensors.clone();
    tr.generator_step(&batch, &mut rng).unwrap();
    assert_eq!(tr.model.discriminator.tensors, disc);
    assert_ne!(tr.model.generator.tensors, gen);
}

#[test]
fn discriminator_step_leaves_the_generator_untouched() {
    let cfg = common::tiny_config(&[]);
    let d = data(&cfg);
    let mut tr = cfg.trainer::<f32>().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = build_batch(Branch::Real, &d, 1, true, &mut rng).unwrap();
    let fakes = tr.generator_step(&batch, &mut rng).unwrap().fakes;
    let disc = tr.model.discriminator.tensors.clone();
    let gen = tr.model.generator.tensors.clone();
    tr.discriminator_step(&batch, &fakes).unwrap();
    assert_eq!(tr.model.generator.tensors, gen);
    assert_ne!(tr.model.discriminator.tensors, disc);
}

#[test]
fn extra_poses_add_fakes_only_on_the_real_branch() {
    for extra in [0usize, 2] {
        let cfg = common::tiny_config(&[&format!("d_extra_pose_count={extra}")]);
        let d = data(&cfg);
        let mut tr = cfg.trainer::<f32>().unwrap();
        for _ in 0..12 {
            let r = tr.train_step(&d).unwrap();
            let expected = match r.branch {
                Branch::Real => 1 + extra,
                Branch::Synthetic => 1,
            };
            assert_eq!(r.fakes, expected);
        }
    }
}

#[test]
fn real_branch_uses_the_image_as_its_own_target() {
    let cfg = common::tiny_config(&[]);
    let d = data(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch = build_batch(Branch::Real, &d, 3, true, &mut rng).unwrap();
    for item in &batch.items {
        assert_eq!(item.reference, item.target);
        assert_eq!(item.reference_pose, item.target_pose);
    }
    assert_eq!(batch.real_depths.len(), 3);
    let batch = build_batch(Branch::Synthetic, &d, 2, false, &mut rng).unwrap();
    assert!(batch.real_depths.is_empty());
    assert!(batch.items.iter().all(|i| i.reference != i.target));
}

#[test]
fn one_step_reduces_reconstruction_loss() {
    for seed in 0..20u64 {
        let cfg = common::tiny_config(&[&format!("init_seed={seed}"), "use_discriminator=false", "lr_generator=2e-4"]);
        let d = data(&cfg);
        let mut tr = cfg.trainer::<f32>().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = build_batch(Branch::Synthetic, &d, 1, false, &mut rng).unwrap();
        let before = tr.generator_step(&batch, &mut rng).unwrap().recon;
        let after = tr.generator_step(&batch, &mut rng).unwrap().recon;
        assert!(after < before, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn discriminator_learns_against_a_frozen_generator() {
    let cfg = common::tiny_config(&["lr_discriminator=1e-3"]);
    let d = data(&cfg);
    let mut tr = cfg.trainer::<f32>().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut gaps = Vec::new();
    for step in 0..200 {
        let batch = build_batch(Branch::Synthetic, &d, 1, true, &mut rng).unwrap();
        let item = &batch.items[0];
        let emb = tr.model.encode(&item.reference).unwrap();
        let fakes = tr.extra_fakes(&emb, 1, &mut rng).unwrap();
        let r = tr.discriminator_step(&batch, &fakes).unwrap();
        if step >= 150 {
            gaps.push(tr.loss.realness(r.real_logit) - tr.loss.realness(r.fake_logit));
        }
    }
    let gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    assert!(gap > 0.0, "realness gap {gap}");
}

#[test]
fn non_finite_input_aborts() {
    let cfg = common::tiny_config(&["use_discriminator=false"]);
    let mut d = data(&cfg);
    for t in d.synthetic.iter_mut().chain(d.real.iter_mut()) {
        t.image_f.data[0] = f32::NAN;
        t.image_s.data[0] = f32::NAN;
    }
    let mut tr = cfg.trainer::<f32>().unwrap();
    assert!(matches!(tr.train_step(&d), Err(Error::NonFinite { .. })));
}

#[test]
fn training_is_deterministic() {
    let cfg = common::tiny_config(&["total_steps=6"]);
    let d = data(&cfg);
    let mut a = cfg.trainer::<f32>().unwrap();
    let mut b = cfg.trainer::<f32>().unwrap();
    let ra = a.fit(&d, None).unwrap();
    let rb = b.fit(&d, None).unwrap();
    assert_eq!(ra.records, rb.records);
    assert_eq!(a.model.generator.tensors, b.model.generator.tensors);
}

#[test]
fn zero_steps_checkpoint_is_the_initialization() {
    let cfg = common::tiny_config(&["total_steps=0"]);
    let d = data(&cfg);
    let mut tr = cfg.trainer::<f32>().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let summary = tr.fit(&d, Some((dir.path(), "h"))).unwrap();
    assert_eq!(summary.checkpoints.len(), 1);
    let ck = gnerf_core::io::load_checkpoint(&summary.checkpoints[0]).unwrap();
    let init = gnerf_core::Model::new(cfg.model_config()).unwrap();
    assert_eq!(ck.tensors, init.named_tensors());
    let log = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(log.trim(), LOG_HEADER);
}

#[test]
fn trainer_rejects_bad_settings() {
    let bad = gnerf_core::config::Config::default()
        .with_overrides(&["gamma_threshold=1.5"])
        .and_then(|c| c.trainer::<f32>());
    assert!(bad.is_err());
    assert!(select_branch(f64::NAN, 0.5).is_err());
}
