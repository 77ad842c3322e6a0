use landval::evaluate::{
    correct_and_refit, evaluate_predictions, kept_mask, med, select_thresholds, shape_miou, EvalError, Prediction,
    SelectionAudit, ThresholdPolicy,
};
use landval::geometry::{fit_ellipse, Ellipse, Point, RasterGrid, ShapeKind};
use landval::synthdata::{generate_sample, DatasetConfig, Sample};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn brute_ellipse_mask(e: &Ellipse, grid: RasterGrid) -> Vec<bool> {
    let (s, c) = e.theta.sin_cos();
    let mut out = Vec::new();
    for j in 0..grid.height {
        for i in 0..grid.width {
            let x = (i as f64 + 0.5) / grid.width as f64 - e.cx;
            let y = (j as f64 + 0.5) / grid.height as f64 - e.cy;
            let (u, v) = (x * c + y * s, -x * s + y * c);
            out.push(u * u / (e.rx * e.rx) + v * v / (e.ry * e.ry) <= 1.0);
        }
    }
    out
}

fn corrupt(pts: &[Point], rng: &mut ChaCha8Rng, fraction: f64) -> (Vec<Point>, Vec<f64>) {
    let n = pts.len();
    let bad = ((n as f64) * fraction).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..bad {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    let mut out = pts.to_vec();
    for &i in &idx[..bad] {
        let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let r: f64 = rng.random_range(0.03..0.08);
        out[i] = Point::new(pts[i].x + r * a.cos(), pts[i].y + r * a.sin());
    }
    let err = out.iter().zip(pts).map(|(a, b)| a.distance(*b)).collect();
    (out, err)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn med_matches_brute_force(
        pts in prop::collection::vec((0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64), 1..40),
        width in 8usize..512,
    ) {
        let gt: Vec<Point> = pts.iter().map(|p| Point::new(p.0, p.1)).collect();
        let es: Vec<Point> = pts.iter().map(|p| Point::new(p.2, p.3)).collect();
        let mut total = 0.0;
        for p in &pts {
            let dx = (p.0 - p.2) * width as f64;
            let dy = (p.1 - p.3) * width as f64;
            total += (dx * dx + dy * dy).sqrt();
        }
        let oracle = total / pts.len() as f64;
        prop_assert!((med(&gt, &es, width).unwrap() - oracle).abs() <= 1e-9 * oracle.max(1.0));
    }

    #[test]
    fn miou_matches_brute_force(seed in 0u64..10_000, jitter in 0.0..0.02f64) {
        let grid = RasterGrid::new(128, 128).unwrap();
        let s = generate_sample(seed, &DatasetConfig { seed, ..DatasetConfig::default() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred: Vec<Point> = s
            .landmarks_of(ShapeKind::Iris)
            .iter()
            .map(|p| Point::new(p.x + rng.random_range(-jitter..=jitter), p.y + rng.random_range(-jitter..=jitter)))
            .collect();
        let got = shape_miou(&pred, s.shape(ShapeKind::Iris), grid);
        let fitted = fit_ellipse(&pred).unwrap().ellipse;
        let a = brute_ellipse_mask(&fitted, grid);
        let b = brute_ellipse_mask(s.shape(ShapeKind::Iris).ellipse().unwrap(), grid);
        let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
        let union = a.iter().zip(&b).filter(|(x, y)| **x || **y).count();
        prop_assert!(!got.fit_failed);
        prop_assert_eq!(got.iou, inter as f64 / union as f64);
    }

    #[test]
    fn kept_mask_respects_floor(vals in prop::collection::vec(0.0..1.0f64, 1..30), t in 0.0..1.0f64, min_keep in 0usize..8) {
        let kept = kept_mask(&vals, t, min_keep);
        let count = kept.iter().filter(|k| **k).count();
        prop_assert!(count >= min_keep.min(vals.len()));
        for (v, k) in vals.iter().zip(&kept) {
            if *v <= t {
                prop_assert!(*k);
            }
        }
        // anything kept below the threshold's reach is among the lowest values
        if vals.iter().filter(|v| **v <= t).count() < min_keep.min(vals.len()) {
            let mut sorted = vals.clone();
            sorted.sort_by(|a, b| a.total_cmp(b));
            let floor = sorted[min_keep.min(vals.len()) - 1];
            for (v, k) in vals.iter().zip(&kept) {
                prop_assert_eq!(*k, *v <= floor);
            }
        }
    }

    #[test]
    fn correction_keeps_the_fit_minimum(seed in 0u64..10_000, t in 0.0..0.05f64) {
        let s = generate_sample(seed, &DatasetConfig { seed, ..DatasetConfig::default() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
        for kind in ShapeKind::ALL {
            let (pts, err) = corrupt(s.landmarks_of(kind), &mut rng, 0.5);
            let c = correct_and_refit(&pts, &err, t, kind, 1).unwrap();
            prop_assert!(c.kept.iter().filter(|k| **k).count() >= kind.min_landmarks());
        }
    }
}

fn oracle_prediction(s: &Sample, rng: &mut ChaCha8Rng) -> Prediction {
    let (mut landmarks, mut inaccuracies) = (Vec::new(), Vec::new());
    for kind in ShapeKind::ALL {
        let (p, e) = corrupt(s.landmarks_of(kind), rng, 0.3);
        landmarks.push(p);
        inaccuracies.push(e);
    }
    Prediction { id: s.id, landmarks, inaccuracies }
}

#[test]
fn oracle_signal_never_hurts_beyond_noise_floor() {
    let cfg = DatasetConfig { seed: 11, ..DatasetConfig::default() };
    let samples: Vec<Sample> = (0..200).map(|id| generate_sample(id, &cfg).unwrap()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let preds: Vec<Prediction> = samples.iter().map(|s| oracle_prediction(s, &mut rng)).collect();
    let grid = RasterGrid::metric();
    let thresholds = landval::evaluate::Thresholds { per_shape: vec![1e-12; 3], scores: Vec::new() };
    let report = evaluate_predictions(&preds, &samples, &thresholds, grid).unwrap();
    for s in &report.shapes {
        assert!(s.corrected_miou >= s.raw_miou - 0.01, "{:?}", s);
        assert!(
            s.excluded_fraction >= 0.0
                && s.excluded_fraction <= 1.0 - s.kind.min_landmarks() as f64 / cfg.landmarks.get(s.kind) as f64
        );
    }
}

#[test]
fn selection_audit_flags_test_ids() {
    let cfg = DatasetConfig { seed: 5, ..DatasetConfig::default() };
    let val: Vec<Sample> = (0..20).map(|id| generate_sample(id, &cfg).unwrap()).collect();
    let test: Vec<Sample> = (100..110).map(|id| generate_sample(id, &cfg).unwrap()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let preds: Vec<Prediction> = val.iter().map(|s| oracle_prediction(s, &mut rng)).collect();
    let mut audit = SelectionAudit::default();
    let t = select_thresholds(&preds, &val, &ThresholdPolicy::default(), RasterGrid::new(64, 64).unwrap(), &mut audit)
        .unwrap();
    assert_eq!(t.per_shape.len(), 3);
    assert!(audit.check_disjoint(test.iter().map(|s| s.id)).is_ok());
    assert!(matches!(audit.check_disjoint([3u64, 105]), Err(EvalError::Leakage(ids)) if ids == vec![3]));
}
