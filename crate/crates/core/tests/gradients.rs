mod common;

use common::gradcheck;

#[test]
fn r1_penalty_matches_finite_differences() {
    for seed in 0..2 {
        let c = gradcheck::r1(seed);
        assert!(c.penalty < 1e-3, "penalty rel err {}", c.penalty);
        assert!(c.parameter_gradient < 1e-3, "parameter rel err {}", c.parameter_gradient);
    }
}

#[test]
fn recon_gradient_matches_finite_differences() {
    for seed in 0..2 {
        let e = gradcheck::recon(seed);
        assert!(e < 1e-3, "rel err {e}");
    }
}

#[test]
fn render_gradient_matches_finite_differences() {
    for seed in 0..2 {
        let e = gradcheck::render(seed);
        assert!(e < 1e-3, "rel err {e}");
    }
}
