use landval::geometry::{fit_ellipse, ShapeKind};
use landval::synthdata::{augment, augment_with, generate_sample, AugmentConfig, AugmentDraw, DatasetConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn generated_samples_pass_invariants_over_many_seeds() {
    for seed in 0..1000u64 {
        let cfg = DatasetConfig { seed, ..DatasetConfig::default() };
        let s = generate_sample(seed * 7 + 3, &cfg).unwrap();
        if let Err(e) = s.check_invariants(&cfg.landmarks) {
            panic!("seed {seed}: {e}");
        }
    }
}

#[test]
fn augmented_samples_keep_landmarks_in_frame() {
    let cfg = DatasetConfig::default();
    let strong = AugmentConfig { shift_max: 0.15, deform_amp: 0.03, ..AugmentConfig::default() };
    for id in 0..50 {
        let s = generate_sample(id, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(id);
        let a = augment(&s, &mut rng, &strong);
        assert!(a.landmarks.iter().flatten().all(|p| (0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y)));
        assert!(a.image.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generation_is_a_pure_function(seed in any::<u64>(), id in 0u64..100_000) {
        let cfg = DatasetConfig { seed, ..DatasetConfig::default() };
        prop_assert_eq!(generate_sample(id, &cfg).unwrap(), generate_sample(id, &cfg).unwrap());
    }

    #[test]
    fn shift_commutes_with_pupil_fit(seed in 0u64..1000, dx in -0.04..0.04f64, dy in -0.04..0.04f64) {
        let cfg = DatasetConfig { seed, ..DatasetConfig::default() };
        let s = generate_sample(0, &cfg).unwrap();
        let shifted = augment_with(&s, &AugmentDraw::shift_only(dx, dy));
        let before = fit_ellipse(s.landmarks_of(ShapeKind::Pupil)).unwrap().ellipse.translate(dx, dy);
        let after = fit_ellipse(shifted.landmarks_of(ShapeKind::Pupil)).unwrap().ellipse;
        prop_assert!(after.parameter_distance(&before) < 1e-6);
    }
}
