use deepfact::compress::{build_compression_basis, target_alignment};
use deepfact::dynamics::{check_invariance, rho_step, LayerInvariance};
use deepfact::linalg::{RngSeed, NULLSPACE_REL_TOL};
use deepfact::model::{generate_low_rank_target, l2_gradient, DeepFactorization};

struct Bundle {
    d: usize,
    r: usize,
    depth: usize,
    eps: f64,
    eta: f64,
    lambda: f64,
}

/// Trains for `steps` iterations and returns the worst per-layer invariance
/// diagnostics together with the final measured repeated value.
fn certify(b: &Bundle, steps: usize, seed: u64) -> (LayerInvariance, f64) {
    let phi = generate_low_rank_target(b.d, b.r, RngSeed(seed)).unwrap().phi;
    let mut theta = DeepFactorization::orthogonal(b.d, &vec![b.eps; b.depth], RngSeed(seed + 1)).unwrap();
    let basis = build_compression_basis(&theta, &target_alignment(&theta, &phi), b.r, NULLSPACE_REL_TOL).unwrap();
    let mut rho = vec![b.eps; b.depth];
    let mut worst = LayerInvariance {
        spread: 0.0,
        repeated_sigma: 0.0,
        rho_rel_error: 0.0,
        right_angle: 0.0,
        left_angle: 0.0,
        off_diagonal: 0.0,
    };
    let mut last = 0.0;
    for t in 0..=steps {
        for c in check_invariance(&theta, &basis, &rho).unwrap() {
            worst.spread = worst.spread.max(c.spread);
            worst.rho_rel_error = worst.rho_rel_error.max(c.rho_rel_error);
            worst.right_angle = worst.right_angle.max(c.right_angle);
            worst.left_angle = worst.left_angle.max(c.left_angle);
            worst.off_diagonal = worst.off_diagonal.max(c.off_diagonal);
            worst.repeated_sigma = worst.repeated_sigma.max(c.repeated_sigma);
            last = c.repeated_sigma;
        }
        if t < steps {
            let g = l2_gradient(&theta, &phi).unwrap();
            theta.apply_step(&g, b.eta, b.lambda);
            rho = rho_step(&rho, b.eta, b.lambda);
        }
    }
    (worst, last)
}

#[test]
fn shallow_decayed_bundle_keeps_invariant_block() {
    let b = Bundle {
        d: 20,
        r: 2,
        depth: 2,
        eps: 0.1,
        eta: 1e-2,
        lambda: 1e-3,
    };
    let (w, _) = certify(&b, 2000, 31);
    assert!(w.spread <= 1e-6, "{w:?}");
    assert!(w.rho_rel_error <= 1e-6, "{w:?}");
    assert!(w.right_angle <= 1e-6 && w.left_angle <= 1e-6, "{w:?}");
    assert!(w.off_diagonal <= 1e-8 * b.eps, "{w:?}");
}

#[test]
fn weight_decay_drives_repeated_value_below_bound() {
    let b = Bundle {
        d: 16,
        r: 2,
        depth: 3,
        eps: 0.2,
        eta: 0.5,
        lambda: 0.02,
    };
    let steps = 5000;
    let (w, last) = certify(&b, steps, 41);
    let bound = b.eps * (1.0 - b.eta * b.lambda).powi(steps as i32);
    assert!(last <= bound + 1e-10, "repeated value {last:e} above {bound:e}");
    assert!(w.right_angle <= 1e-6, "{w:?}");
}

#[test]
fn invariant_block_is_flat_at_init() {
    let b = Bundle {
        d: 12,
        r: 2,
        depth: 4,
        eps: 0.3,
        eta: 0.1,
        lambda: 0.0,
    };
    let (w, last) = certify(&b, 0, 5);
    assert!(w.spread <= 1e-12 && w.rho_rel_error <= 1e-12, "{w:?}");
    assert!(w.right_angle <= 1e-8 && w.left_angle <= 1e-8, "{w:?}");
    assert!((last - 0.3).abs() <= 1e-12);
}
