use gnerf_core::latent::{estimate_center, truncate, IntermediateLatent, LatentCenter, MappingNetwork, TruncationConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vectors(dim: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(-5.0f64..5.0, dim),
        prop::collection::vec(-5.0f64..5.0, dim),
    )
}

fn center(values: Vec<f64>) -> LatentCenter<f64> {
    LatentCenter { values, n_samples: 1 }
}

proptest! {
    #[test]
    fn endpoints_are_exact((w, c) in vectors(16)) {
        let w = IntermediateLatent(w);
        let c = center(c);
        let zero = truncate(&w, &c, &TruncationConfig::new(0.0).unwrap()).unwrap();
        let one = truncate(&w, &c, &TruncationConfig::new(1.0).unwrap()).unwrap();
        prop_assert_eq!(&zero.0, &c.values);
        prop_assert_eq!(&one.0, &w.0);
    }

    #[test]
    fn distance_to_center_scales_by_psi((w, c) in vectors(24), psi in 0.0f64..=1.0) {
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let before = dist(&w, &c);
        prop_assume!(before > 1e-3);
        let out = truncate(&IntermediateLatent(w), &center(c.clone()), &TruncationConfig::new(psi).unwrap()).unwrap();
        let ratio = dist(&out.0, &c) / before;
        prop_assert!((ratio - psi).abs() < 1e-12, "ratio {} vs ψ {}", ratio, psi);
    }

    #[test]
    fn truncation_is_affine_in_psi((w, c) in vectors(8), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let w = IntermediateLatent(w);
        let cc = center(c);
        let ta = truncate(&w, &cc, &TruncationConfig::new(a).unwrap()).unwrap();
        let tb = truncate(&w, &cc, &TruncationConfig::new(b).unwrap()).unwrap();
        let mid = truncate(&w, &cc, &TruncationConfig::new(0.5 * (a + b)).unwrap()).unwrap();
        for i in 0..8 {
            prop_assert!((0.5 * (ta.0[i] + tb.0[i]) - mid.0[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn psi_outside_unit_interval_is_rejected() {
    assert!(TruncationConfig::new(-0.01).is_err());
    assert!(TruncationConfig::new(1.01).is_err());
}

#[test]
fn dimension_mismatch_is_rejected() {
    let w = IntermediateLatent(vec![0.0; 3]);
    assert!(truncate(&w, &center(vec![0.0; 4]), &TruncationConfig::new(0.5).unwrap()).is_err());
}

#[test]
fn center_estimate_is_seeded() {
    let net = MappingNetwork::<f64>::new(8, 8, 3).unwrap();
    let a = estimate_center(&net, 500, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = estimate_center(&net, 500, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(a.values, b.values);
    assert_eq!(a.n_samples, 500);
}
