use landval::geometry::ShapeKind;
use landval::loss::{
    apply_margin_mask, batch_loss, inaccuracy_target, GroupLossInput, LossConfig, LossVariant, MarginMode, ShapeAreas,
};
use landval::model::GroupLayout;
use ndarray::Array2;
use proptest::prelude::*;

fn target(v: LossVariant, gt: &[f64], es: &[f64], area: f64, min_area: f64) -> f64 {
    inaccuracy_target(v, &GroupLossInput { gt, es, es_inaccuracy: 0.0, area, min_area }).unwrap()
}

fn mode() -> impl Strategy<Value = MarginMode> {
    prop_oneof![Just(MarginMode::MaskOnly), Just(MarginMode::LrScaled)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn normalized_target_ratio_is_inverse_area_ratio(
        err in prop::collection::vec(-0.2..0.2f64, 2),
        min_area in 1.0..500.0f64,
        ra in 1.0..20.0f64,
        rb in 1.0..20.0f64,
    ) {
        let gt = [0.4, 0.6];
        let es: Vec<f64> = gt.iter().zip(&err).map(|(g, e)| g + e).collect();
        prop_assume!(err.iter().any(|e| *e != 0.0));
        let (a, b) = (ra * min_area, rb * min_area);
        for v in [LossVariant::NormAbs, LossVariant::NormEuclid] {
            let ratio = target(v, &gt, &es, a, min_area) / target(v, &gt, &es, b, min_area);
            prop_assert!((ratio - b / a).abs() <= 1e-12 * (b / a));
        }
        prop_assert_eq!(
            target(LossVariant::Original, &gt, &es, a, min_area),
            target(LossVariant::Original, &gt, &es, b, min_area)
        );
    }

    #[test]
    fn euclid_numerator_grows_with_sqrt_of_replication(e in prop::collection::vec(-0.2..0.2f64, 2), k in 1usize..8) {
        prop_assume!(e.iter().any(|v| v.abs() > 1e-6));
        let gt1 = vec![0.5; 2];
        let es1: Vec<f64> = e.iter().map(|v| 0.5 + v).collect();
        let gtk = vec![0.5; 2 * k];
        let esk: Vec<f64> = es1.iter().cycle().take(2 * k).copied().collect();
        let eu = target(LossVariant::NormEuclid, &gtk, &esk, 1.0, 1.0) / target(LossVariant::NormEuclid, &gt1, &es1, 1.0, 1.0);
        prop_assert!((eu - (k as f64).sqrt()).abs() < 1e-9);
        let abs = target(LossVariant::NormAbs, &gtk, &esk, 1.0, 1.0) / target(LossVariant::NormAbs, &gt1, &es1, 1.0, 1.0);
        prop_assert!((abs - 1.0).abs() < 1e-9);
    }

    #[test]
    fn targets_non_negative_and_zero_only_at_match(
        gt in prop::collection::vec(0.0..1.0f64, 1..6),
        shift in prop::collection::vec(-0.1..0.1f64, 6),
        area in 1.0..5.0f64,
        zero in any::<bool>(),
    ) {
        let es: Vec<f64> = if zero { gt.clone() } else { gt.iter().zip(&shift).map(|(g, s)| g + s).collect() };
        let equal = gt.iter().zip(&es).all(|(g, e)| g == e);
        for v in LossVariant::ALL {
            let t = target(v, &gt, &es, area * 10.0, 10.0);
            prop_assert!(t >= 0.0);
            prop_assert_eq!(t == 0.0, equal);
        }
    }

    #[test]
    fn mask_is_idempotent_and_passes_large_gradients(g in -1.0..1.0f64, margin in 0.0..0.5f64, m in mode()) {
        // with lr = 1 the lr-scaled scaling is the identity, so idempotence is well posed
        let once = apply_margin_mask(g, margin, m, 1.0);
        prop_assert_eq!(apply_margin_mask(once, margin, m, 1.0), once);
        if g.abs() >= margin {
            prop_assert_eq!(apply_margin_mask(g, margin, MarginMode::MaskOnly, 0.1), g);
        } else {
            prop_assert_eq!(once, 0.0);
        }
    }

    #[test]
    fn detached_target_isolates_coordinate_gradients(
        seed_vals in prop::collection::vec(0.05..0.95f64, 2 * 15),
        delta in -0.3..0.3f64,
        which in 0usize..15,
        variant in prop_oneof![Just(LossVariant::Original), Just(LossVariant::NormAbs), Just(LossVariant::NormEuclid)],
    ) {
        let layout = GroupLayout::new(2, vec![(ShapeKind::Pupil, 5), (ShapeKind::Iris, 6), (ShapeKind::Eyelid, 4)]).unwrap();
        let n = layout.total_outputs();
        let row: Vec<f64> = (0..n).map(|i| seed_vals[i % seed_vals.len()] * 0.9 + 0.01 * (i % 7) as f64).collect();
        let out = Array2::from_shape_vec((1, n), row).unwrap();
        let gt = vec![(0..30).map(|i| seed_vals[(i * 7) % 30]).collect::<Vec<f64>>()];
        let areas = vec![ShapeAreas(vec![100.0, 400.0, 900.0])];
        let cfg = LossConfig { variant, margin: 0.0, detach_target: true, ..LossConfig::default() };
        let base = batch_loss(out.view(), &gt, &areas, &layout, &cfg, 1e-4).unwrap();
        let mut moved = out.clone();
        moved[[0, which * 3 + 2]] += delta;
        let after = batch_loss(moved.view(), &gt, &areas, &layout, &cfg, 1e-4).unwrap();
        for i in 0..n {
            if !layout.is_inaccuracy(i) {
                prop_assert_eq!(base.output_grad[[0, i]], after.output_grad[[0, i]]);
            }
        }
    }
}

#[test]
fn total_is_landmark_plus_weighted_inaccuracy() {
    let layout =
        GroupLayout::new(2, vec![(ShapeKind::Pupil, 5), (ShapeKind::Iris, 5), (ShapeKind::Eyelid, 4)]).unwrap();
    let n = layout.total_outputs();
    let out = Array2::from_shape_fn((2, n), |(b, i)| 0.3 + 0.01 * ((i * 13 + b * 5) % 17) as f64);
    let gt: Vec<Vec<f64>> =
        (0..2).map(|b| (0..28).map(|i| 0.35 + 0.01 * ((i * 3 + b) % 11) as f64).collect()).collect();
    let areas = vec![ShapeAreas(vec![50.0, 300.0, 700.0]); 2];
    for lambda in [0.0, 0.5, 1.0, 3.0] {
        let cfg = LossConfig { inaccuracy_weight: lambda, ..LossConfig::default() };
        let r = batch_loss(out.view(), &gt, &areas, &layout, &cfg, 1e-4).unwrap();
        assert_eq!(r.total, r.landmark_loss + lambda * r.inaccuracy_loss);
        assert!(r.total.is_finite());
    }
}
