use landval::geometry::{
    fit_bezier_chain, fit_ellipse, iou, rasterize, rasterize_area, sample_bezier_landmarks, sample_ellipse_landmarks,
    BezierChain, Ellipse, Point, RasterGrid, ShapeSpec,
};
use proptest::prelude::*;

fn ellipse_strategy() -> impl Strategy<Value = Ellipse> {
    (0.3..0.7f64, 0.3..0.7f64, 0.06..0.25f64, 1.15..2.5f64, 0.0..std::f64::consts::PI)
        .prop_map(|(cx, cy, r, aspect, th)| Ellipse::new(cx, cy, r, r / aspect, th).unwrap())
}

fn chain_strategy() -> impl Strategy<Value = BezierChain> {
    (0.1..0.3f64, 0.4..0.6f64, 0.15..0.35f64, 0.05..0.2f64, -0.05..0.05f64).prop_map(|(x0, y0, w, h, tilt)| {
        let (x3, y3) = (x0 + 2.0 * w, y0 + tilt);
        BezierChain::new(vec![
            Point::new(x0, y0),
            Point::new(x0 + 0.6 * w, y0 - h),
            Point::new(x3 - 0.6 * w, y3 - h),
            Point::new(x3, y3),
        ])
        .unwrap()
    })
}

/// Roots of `a t^2 + b t + c` as (re, im) pairs.
fn quadratic_roots(a: f64, b: f64, c: f64) -> Vec<(f64, f64)> {
    if a.abs() < 1e-12 {
        return if b.abs() < 1e-12 { vec![] } else { vec![(-c / b, 0.0)] };
    }
    let disc = b * b - 4.0 * a * c;
    if disc >= 0.0 {
        let r = disc.sqrt();
        vec![((-b + r) / (2.0 * a), 0.0), ((-b - r) / (2.0 * a), 0.0)]
    } else {
        let r = (-disc).sqrt() / (2.0 * a);
        vec![(-b / (2.0 * a), r), (-b / (2.0 * a), -r)]
    }
}

/// Distance between the closest root of x'(t) and of y'(t). Near zero the
/// arc is close to a cuspidal cubic, whose trace admits a family of cubic
/// parametrizations with the same endpoints, so control points are not
/// identifiable from points on the curve.
fn derivative_root_gap(c: &BezierChain) -> f64 {
    let p = c.points();
    let coeffs = |f: fn(&Point) -> f64| {
        let (p0, p1, p2, p3) = (f(&p[0]), f(&p[1]), f(&p[2]), f(&p[3]));
        let a = 3.0 * (p3 - 3.0 * p2 + 3.0 * p1 - p0);
        let b = 6.0 * (p2 - 2.0 * p1 + p0);
        (a, b, 3.0 * (p1 - p0))
    };
    let (ax, bx, cx) = coeffs(|q| q.x);
    let (ay, by, cy) = coeffs(|q| q.y);
    let mut gap = f64::INFINITY;
    for rx in quadratic_roots(ax, bx, cx) {
        for ry in quadratic_roots(ay, by, cy) {
            gap = gap.min((rx.0 - ry.0).hypot(rx.1 - ry.1));
        }
    }
    gap
}

/// Pixel-center test written from the implicit equation, independent of the
/// library's own containment code.
fn brute_mask(e: &Ellipse, grid: RasterGrid) -> Vec<bool> {
    let (s, c) = e.theta.sin_cos();
    let mut out = Vec::with_capacity(grid.pixel_count());
    for j in 0..grid.height {
        for i in 0..grid.width {
            let x = (i as f64 + 0.5) / grid.width as f64 - e.cx;
            let y = (j as f64 + 0.5) / grid.height as f64 - e.cy;
            let u = x * c + y * s;
            let v = -x * s + y * c;
            out.push(u * u / (e.rx * e.rx) + v * v / (e.ry * e.ry) <= 1.0);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn ellipse_fit_round_trip(e in ellipse_strategy(), n in 8usize..40) {
        let pts = sample_ellipse_landmarks(&e, n).unwrap();
        let fit = fit_ellipse(&pts).unwrap().ellipse;
        prop_assert!(fit.parameter_distance(&e) < 1e-6, "{:?} vs {:?}", fit, e);
    }

    #[test]
    fn chain_fit_round_trip(c in chain_strategy(), n in 8usize..30) {
        prop_assume!(derivative_root_gap(&c) > 0.1);
        let pts = sample_bezier_landmarks(&c, n).unwrap();
        let fit = fit_bezier_chain(&pts, 1).unwrap();
        prop_assert!(fit.rms < 1e-6);
        for (a, b) in fit.chain.points().iter().zip(c.points()) {
            prop_assert!(a.distance(*b) < 1e-5);
        }
    }

    #[test]
    fn iou_symmetric_and_reflexive(a in ellipse_strategy(), b in ellipse_strategy(), lid in chain_strategy()) {
        let g = RasterGrid::metric();
        let (sa, sb, sl) = (ShapeSpec::Iris(a), ShapeSpec::Pupil(b), ShapeSpec::Eyelid(lid));
        prop_assert_eq!(iou(&sa, &sb, g).unwrap(), iou(&sb, &sa, g).unwrap());
        prop_assert_eq!(iou(&sa, &sl, g).unwrap(), iou(&sl, &sa, g).unwrap());
        prop_assert_eq!(iou(&sa, &sa, g).unwrap(), 1.0);
        prop_assert_eq!(iou(&sl, &sl, g).unwrap(), 1.0);
    }

    #[test]
    fn raster_matches_brute_force(e in ellipse_strategy()) {
        let g = RasterGrid::new(96, 80).unwrap();
        prop_assert_eq!(rasterize(&ShapeSpec::Pupil(e), g).to_mask(), brute_mask(&e, g));
    }

    // non-degenerate here: the minor semi-axis spans at least 12 coarse pixels
    #[test]
    fn area_stable_under_refinement(
        e in (0.3..0.7f64, 0.3..0.7f64, 0.1..0.25f64, 1.0..2.0f64, 0.0..std::f64::consts::PI)
            .prop_map(|(cx, cy, r, aspect, th)| Ellipse::new(cx, cy, r, r / aspect, th).unwrap())
    ) {
        let s = ShapeSpec::Pupil(e);
        let coarse = rasterize_area(&s, RasterGrid::new(256, 256).unwrap()) as f64 / 65536.0;
        let fine = rasterize_area(&s, RasterGrid::new(512, 512).unwrap()) as f64 / 262144.0;
        prop_assert!((coarse - fine).abs() / fine < 0.01);
    }

    #[test]
    fn sampling_is_deterministic(e in ellipse_strategy(), c in chain_strategy(), n in 5usize..30) {
        let a = sample_ellipse_landmarks(&e, n).unwrap();
        let b = sample_ellipse_landmarks(&e, n).unwrap();
        prop_assert!(a.iter().zip(&b).all(|(p, q)| p.x.to_bits() == q.x.to_bits() && p.y.to_bits() == q.y.to_bits()));
        let a = sample_bezier_landmarks(&c, n).unwrap();
        let b = sample_bezier_landmarks(&c, n).unwrap();
        prop_assert!(a.iter().zip(&b).all(|(p, q)| p.x.to_bits() == q.x.to_bits() && p.y.to_bits() == q.y.to_bits()));
    }
}
