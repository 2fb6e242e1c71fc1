use deepfact::completion::{masked_gradient, masked_loss, sample_mask, ObservationMask};
use deepfact::dynamics::{check_rho_bounds, rho_recurrence, RhoBoundCheck};
use deepfact::linalg::{
    complete_to_basis, gaussian_matrix, orthonormality_defect, principal_angles, scaled_orthogonal_init, svd, Matrix,
    RngSeed,
};
use deepfact::model::{l2_gradient, l2_loss, DeepFactorization};
use proptest::prelude::*;

fn orthonormal(d: usize, k: usize, seed: u64) -> Matrix {
    let q = scaled_orthogonal_init(d, 1.0, RngSeed(seed)).unwrap();
    q.columns(0, k).into_owned()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn principal_angles_ignore_basis_rotation(d in 4usize..14, k1 in 1usize..4, k2 in 1usize..4, seed in 0u64..10_000) {
        let b1 = orthonormal(d, k1, seed);
        let b2 = orthonormal(d, k2, seed + 1);
        let r1 = scaled_orthogonal_init(k1, 1.0, RngSeed(seed + 2)).unwrap();
        let r2 = scaled_orthogonal_init(k2, 1.0, RngSeed(seed + 3)).unwrap();
        let a = principal_angles(&b1, &b2).unwrap();
        let b = principal_angles(&(&b1 * r1), &(&b2 * r2)).unwrap();
        prop_assert_eq!(a.len(), k1.min(k2));
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-7, "{} vs {}", x, y);
            prop_assert!((0.0..=std::f64::consts::FRAC_PI_2 + 1e-12).contains(x));
        }
    }

    #[test]
    fn svd_reconstructs_and_orders(rows in 1usize..10, cols in 1usize..10, seed in 0u64..10_000) {
        let a = gaussian_matrix(rows, cols, &mut RngSeed(seed).rng());
        let dec = svd(&a).unwrap();
        prop_assert!((dec.reconstruct() - &a).norm() <= 1e-12 * a.norm().max(1.0));
        prop_assert!(dec.singular_values.as_slice().windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(orthonormality_defect(&dec.u) < 1e-12);
        prop_assert!(orthonormality_defect(&dec.vt.transpose()) < 1e-12);
    }

    #[test]
    fn completed_basis_keeps_partial_columns(d in 3usize..12, k in 1usize..3, seed in 0u64..10_000) {
        let partial = orthonormal(d, k, seed);
        let full = complete_to_basis(&partial).unwrap();
        prop_assert_eq!(full.shape(), (d, d));
        prop_assert!(orthonormality_defect(&full) < 1e-12);
        // partial columns end up in the trailing block
        let tail = full.columns(d - k, k).into_owned();
        prop_assert!(principal_angles(&tail, &partial).unwrap().iter().all(|&t| t < 1e-7));
    }

    #[test]
    fn full_mask_is_plain_l2(d in 2usize..10, depth in 2usize..5, seed in 0u64..10_000) {
        let theta = DeepFactorization::orthogonal(d, &vec![0.6; depth], RngSeed(seed)).unwrap();
        let phi = gaussian_matrix(d, d, &mut RngSeed(seed + 7).rng());
        let mask = ObservationMask::full(d, d);
        prop_assert_eq!(masked_loss(&theta, &phi, &mask).unwrap().to_bits(), l2_loss(&theta, &phi).unwrap().to_bits());
        let gm = masked_gradient(&theta, &phi, &mask).unwrap();
        let g = l2_gradient(&theta, &phi).unwrap();
        prop_assert_eq!(gm, g);
    }

    #[test]
    fn unobserved_entries_do_not_matter(d in 3usize..10, frac in 0.1f64..0.9, seed in 0u64..10_000) {
        let theta = DeepFactorization::orthogonal(d, &[0.8; 3], RngSeed(seed)).unwrap();
        let mut rng = RngSeed(seed + 1).rng();
        let phi = gaussian_matrix(d, d, &mut rng);
        let mask = sample_mask(d, frac, RngSeed(seed + 2)).unwrap();
        let noise = gaussian_matrix(d, d, &mut rng) * 100.0;
        let hidden = noise.component_mul(&mask.matrix().map(|m| 1.0 - m));
        let altered = &phi + hidden;
        prop_assert_eq!(masked_loss(&theta, &phi, &mask).unwrap(), masked_loss(&theta, &altered, &mask).unwrap());
        prop_assert_eq!(
            masked_gradient(&theta, &phi, &mask).unwrap(),
            masked_gradient(&theta, &altered, &mask).unwrap()
        );
    }

    #[test]
    fn mask_has_exact_count(d in 1usize..30, frac in 0.01f64..=1.0, seed in 0u64..10_000) {
        prop_assume!((frac * (d * d) as f64).round() >= 1.0);
        let mask = sample_mask(d, frac, RngSeed(seed)).unwrap();
        prop_assert_eq!(mask.observed_count(), (frac * (d * d) as f64).round() as usize);
        prop_assert!(mask.matrix().iter().all(|&x| x == 0.0 || x == 1.0));
    }

    #[test]
    fn rho_stays_between_bounds(eps in 0.01f64..1.0, lambda in 0.0f64..0.5, frac in 0.05f64..1.0, depth in 2usize..5) {
        let eta = frac / (lambda + eps);
        let trace = rho_recurrence(&vec![eps; depth], eta, lambda, 300).unwrap();
        match check_rho_bounds(&trace) {
            RhoBoundCheck::Checked(rep) => prop_assert_eq!(rep.violations, 0, "{:?}", rep),
            RhoBoundCheck::HypothesesUnmet(why) => prop_assert!(false, "{}", why),
        }
    }
}
