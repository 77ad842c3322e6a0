use nalgebra::{DMatrix, Matrix2, Matrix3, Vector3};

use super::{BezierChain, Ellipse, GeometryError, Point, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EllipseFit {
    pub ellipse: Ellipse,
    /// Root mean square of point-to-boundary distances.
    pub rms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BezierFit {
    pub chain: BezierChain,
    /// Chain parameter assigned to each input point.
    pub parameters: Vec<f64>,
    /// Root mean square of point-to-assigned-curve-point distances.
    pub rms: f64,
}

/// Direct least-squares ellipse fit (constrained conic fit in the reduced
/// 3×3 eigen-form, on centered and scaled coordinates).
pub fn fit_ellipse(points: &[Point]) -> Result<EllipseFit> {
    if points.len() < 5 {
        return Err(GeometryError::FitFailure(format!("an ellipse needs at least 5 points, got {}", points.len())));
    }
    if !points.iter().all(|p| p.is_finite()) {
        return Err(GeometryError::FitFailure("non-finite point".into()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.x).sum::<f64>() / n;
    let my = points.iter().map(|p| p.y).sum::<f64>() / n;
    let mean_dist = points.iter().map(|p| (p.x - mx).hypot(p.y - my)).sum::<f64>() / n;
    if mean_dist <= 0.0 {
        return Err(GeometryError::FitFailure("all points coincide".into()));
    }
    let scale = std::f64::consts::SQRT_2 / mean_dist;
    let local: Vec<(f64, f64)> = points.iter().map(|p| ((p.x - mx) * scale, (p.y - my) * scale)).collect();

    // second moments of the centered cloud reveal collinear input
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in &local {
        sxx += x * x;
        sxy += x * y;
        syy += y * y;
    }
    let cov = Matrix2::new(sxx, sxy, sxy, syy) / n;
    let eig = cov.symmetric_eigenvalues();
    let (lo, hi) = (eig[0].min(eig[1]), eig[0].max(eig[1]));
    if lo <= 1e-12 * hi {
        return Err(GeometryError::FitFailure("points are collinear".into()));
    }

    let mut s1 = Matrix3::zeros();
    let mut s2 = Matrix3::zeros();
    let mut s3 = Matrix3::zeros();
    for &(x, y) in &local {
        let quad = Vector3::new(x * x, x * y, y * y);
        let lin = Vector3::new(x, y, 1.0);
        s1 += quad * quad.transpose();
        s2 += quad * lin.transpose();
        s3 += lin * lin.transpose();
    }
    let s3_inv = s3.try_inverse().ok_or_else(|| GeometryError::FitFailure("singular linear scatter block".into()))?;
    let t = -s3_inv * s2.transpose();
    let m = s1 + s2 * t;
    // premultiply by the inverse of the constraint matrix [[0,0,2],[0,-1,0],[2,0,0]]
    let reduced =
        Matrix3::from_rows(&[(m.row(2) * 0.5).into_owned(), -m.row(1).into_owned(), (m.row(0) * 0.5).into_owned()]);

    let mut best: Option<(f64, Vector3<f64>)> = None;
    for lambda in reduced.complex_eigenvalues().iter() {
        if lambda.im.abs() > 1e-9 * (1.0 + lambda.re.abs()) {
            continue;
        }
        let shifted = reduced - Matrix3::identity() * lambda.re;
        let svd = shifted.svd(false, true);
        let Some(v_t) = svd.v_t else { continue };
        let k = svd.singular_values.imin();
        let a1: Vector3<f64> = v_t.row(k).transpose();
        let constraint = 4.0 * a1[0] * a1[2] - a1[1] * a1[1];
        if constraint <= 0.0 {
            continue;
        }
        let cost = (a1.transpose() * m * a1)[0] / constraint;
        if best.as_ref().is_none_or(|(c, _)| cost < *c) {
            best = Some((cost, a1));
        }
    }
    let (_, a1) = best.ok_or_else(|| GeometryError::FitFailure("no elliptic solution".into()))?;
    let a2 = t * a1;
    let conic = [a1[0], a1[1], a1[2], a2[0], a2[1], a2[2]];
    let (cx, cy, rx, ry, theta) = conic_to_parameters(conic)?;
    let ellipse = Ellipse::new(cx / scale + mx, cy / scale + my, rx / scale, ry / scale, theta)
        .map_err(|e| GeometryError::FitFailure(e.to_string()))?;
    let rms = (points.iter().map(|&p| ellipse.distance_to(p).powi(2)).sum::<f64>() / n).sqrt();
    Ok(EllipseFit { ellipse, rms })
}

fn conic_to_parameters(c: [f64; 6]) -> Result<(f64, f64, f64, f64, f64)> {
    let [a, b, cc, d, e, f] = c;
    let den = b * b - 4.0 * a * cc;
    if den >= 0.0 {
        return Err(GeometryError::FitFailure("conic is not an ellipse".into()));
    }
    let x0 = (2.0 * cc * d - b * e) / den;
    let y0 = (2.0 * a * e - b * d) / den;
    let f0 = a * x0 * x0 + b * x0 * y0 + cc * y0 * y0 + d * x0 + e * y0 + f;
    let phi = 0.5 * b.atan2(a - cc);
    let (s, co) = phi.sin_cos();
    let l1 = a * co * co + b * co * s + cc * s * s;
    let l2 = a + cc - l1;
    let (r1, r2) = (-f0 / l1, -f0 / l2);
    if !(r1 > 0.0 && r2 > 0.0 && r1.is_finite() && r2.is_finite()) {
        return Err(GeometryError::FitFailure("imaginary ellipse".into()));
    }
    Ok((x0, y0, r1.sqrt(), r2.sqrt(), phi))
}

const MAX_REFINEMENTS: usize = 100;

/// Least-squares cubic chain fit with endpoints interpolated exactly.
///
/// Points are assigned chord-length parameters. When the data over-determine
/// the joint problem (more than six points per segment) the assignment is then
/// refined jointly with the control points by damped Gauss-Newton.
pub fn fit_bezier_chain(points: &[Point], segments: usize) -> Result<BezierFit> {
    let refinements = if points.len() > 6 * segments { MAX_REFINEMENTS } else { 0 };
    fit_bezier_chain_with(points, segments, refinements)
}

/// Chain fit with the chord-length parameters kept fixed.
pub fn fit_bezier_chain_fixed(points: &[Point], segments: usize) -> Result<BezierFit> {
    fit_bezier_chain_with(points, segments, 0)
}

fn fit_bezier_chain_with(points: &[Point], segments: usize, refinements: usize) -> Result<BezierFit> {
    if segments == 0 {
        return Err(GeometryError::FitFailure("chain needs at least one segment".into()));
    }
    if points.len() < 3 * segments + 1 {
        return Err(GeometryError::FitFailure(format!(
            "{} segments need at least {} points, got {}",
            segments,
            3 * segments + 1,
            points.len()
        )));
    }
    if !points.iter().all(|p| p.is_finite()) {
        return Err(GeometryError::FitFailure("non-finite point".into()));
    }
    let mut cum = Vec::with_capacity(points.len());
    cum.push(0.0);
    for w in points.windows(2) {
        let last = *cum.last().unwrap();
        cum.push(last + w[0].distance(w[1]));
    }
    let total = *cum.last().unwrap();
    if total <= 0.0 {
        return Err(GeometryError::FitFailure("points coincide".into()));
    }
    let umax = segments as f64;
    let mut params: Vec<f64> = cum.iter().map(|c| c / total * umax).collect();
    let last = params.len() - 1;
    params[last] = umax;

    let chain = solve_control_points(points, &params, segments)?;
    if refinements == 0 {
        let rms = chain_rms(&chain, points, &params);
        return Ok(BezierFit { chain, parameters: params, rms });
    }
    Ok(refine_jointly(chain, points, params, refinements))
}

/// Levenberg-Marquardt on the interior control points and the interior point
/// parameters together, starting from the fixed-parameter solution.
fn refine_jointly(chain: BezierChain, points: &[Point], mut params: Vec<f64>, iterations: usize) -> BezierFit {
    let segments = chain.segments();
    let umax = segments as f64;
    let last = points.len() - 1;
    let n_ctrl = 3 * segments - 1;
    let n_vars = 2 * n_ctrl + (last - 1);
    let n_res = 2 * (last - 1);
    let mut ctrl = chain.points().to_vec();

    let residuals = |ctrl: &[Point], params: &[f64]| -> (BezierChain, f64) {
        let c = BezierChain::new(ctrl.to_vec()).expect("control count is preserved");
        let cost = points
            .iter()
            .zip(params)
            .map(|(&p, &u)| {
                let d = c.eval(u) - p;
                d.x * d.x + d.y * d.y
            })
            .sum();
        (c, cost)
    };
    let (mut current, mut cost) = residuals(&ctrl, &params);
    let mut mu = 1e-3;
    for _ in 0..iterations {
        if cost < 1e-30 {
            break;
        }
        let mut jac = DMatrix::<f64>::zeros(n_res, n_vars);
        let mut res = nalgebra::DVector::<f64>::zeros(n_res);
        for (row, j) in (1..last).enumerate() {
            let u = params[j];
            let k = (u.floor() as usize).min(segments - 1);
            let t = u - k as f64;
            let s = 1.0 - t;
            let basis = [s * s * s, 3.0 * s * s * t, 3.0 * s * t * t, t * t * t];
            for (off, &b) in basis.iter().enumerate() {
                let idx = 3 * k + off;
                if idx != 0 && idx != 3 * segments {
                    jac[(2 * row, 2 * (idx - 1))] = b;
                    jac[(2 * row + 1, 2 * (idx - 1) + 1)] = b;
                }
            }
            let d = current.derivative(u);
            jac[(2 * row, 2 * n_ctrl + row)] = d.x;
            jac[(2 * row + 1, 2 * n_ctrl + row)] = d.y;
            let r = current.eval(u) - points[j];
            res[2 * row] = r.x;
            res[2 * row + 1] = r.y;
        }
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &res;
        let mut accepted = false;
        for _ in 0..12 {
            let mut lhs = jtj.clone();
            for i in 0..n_vars {
                lhs[(i, i)] += mu * (jtj[(i, i)] + 1e-12);
            }
            let Some(step) = lhs.lu().solve(&(-&jtr)) else {
                mu *= 10.0;
                continue;
            };
            let mut trial_ctrl = ctrl.clone();
            for i in 0..n_ctrl {
                trial_ctrl[i + 1].x += step[2 * i];
                trial_ctrl[i + 1].y += step[2 * i + 1];
            }
            let mut trial_params = params.clone();
            for j in 1..last {
                trial_params[j] = (params[j] + step[2 * n_ctrl + j - 1]).clamp(0.0, umax);
            }
            let (trial, trial_cost) = residuals(&trial_ctrl, &trial_params);
            if trial_cost.is_finite() && trial_cost <= cost {
                let gain = cost - trial_cost;
                ctrl = trial_ctrl;
                params = trial_params;
                current = trial;
                cost = trial_cost;
                mu = (mu / 3.0).max(1e-12);
                accepted = gain > 1e-15 * cost || cost < 1e-30;
                break;
            }
            mu *= 4.0;
        }
        if !accepted {
            break;
        }
    }
    let rms = (cost / points.len() as f64).sqrt();
    BezierFit { chain: current, parameters: params, rms }
}

fn chain_rms(chain: &BezierChain, points: &[Point], params: &[f64]) -> f64 {
    let sq: f64 = points.iter().zip(params).map(|(&p, &u)| chain.eval(u).distance(p).powi(2)).sum();
    (sq / points.len() as f64).sqrt()
}

fn solve_control_points(points: &[Point], params: &[f64], segments: usize) -> Result<BezierChain> {
    let last = points.len() - 1;
    let (first_pt, last_pt) = (points[0], points[last]);
    let unknowns = 3 * segments - 1;
    let rows = last - 1;
    let mut a = DMatrix::<f64>::zeros(rows, unknowns);
    let mut rhs = DMatrix::<f64>::zeros(rows, 2);
    for (row, j) in (1..last).enumerate() {
        let u = params[j].clamp(0.0, segments as f64);
        let k = (u.floor() as usize).min(segments - 1);
        let t = u - k as f64;
        let s = 1.0 - t;
        let basis = [s * s * s, 3.0 * s * s * t, 3.0 * s * t * t, t * t * t];
        let mut r = points[j];
        for (off, &b) in basis.iter().enumerate() {
            let idx = 3 * k + off;
            if idx == 0 {
                r = r - first_pt * b;
            } else if idx == 3 * segments {
                r = r - last_pt * b;
            } else {
                a[(row, idx - 1)] += b;
            }
        }
        rhs[(row, 0)] = r.x;
        rhs[(row, 1)] = r.y;
    }
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin <= 1e-10 * smax {
        return Err(GeometryError::FitFailure("control points are under-determined by the point distribution".into()));
    }
    let sol = svd.solve(&rhs, 0.0).map_err(|e| GeometryError::FitFailure(e.to_string()))?;
    let mut ctrl = Vec::with_capacity(unknowns + 2);
    ctrl.push(first_pt);
    for i in 0..unknowns {
        ctrl.push(Point::new(sol[(i, 0)], sol[(i, 1)]));
    }
    ctrl.push(last_pt);
    BezierChain::new(ctrl).map_err(|e| GeometryError::FitFailure(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{sample_bezier_landmarks, sample_ellipse_landmarks};

    fn assert_ellipse_close(a: &Ellipse, b: &Ellipse, tol: f64) {
        for (x, y) in a.parameters().iter().zip(b.parameters()) {
            assert!((x - y).abs() < tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn exact_samples_round_trip() {
        let e = Ellipse::new(0.47, 0.53, 0.18, 0.11, 0.6).unwrap();
        let pts = sample_ellipse_landmarks(&e, 12).unwrap();
        let fit = fit_ellipse(&pts).unwrap();
        assert_ellipse_close(&fit.ellipse, &e, 1e-9);
        assert!(fit.rms < 1e-12);
    }

    #[test]
    fn round_trip_after_outlier_removal() {
        let e = Ellipse::new(0.4, 0.45, 0.09, 0.14, 1.1).unwrap();
        let mut pts = sample_ellipse_landmarks(&e, 12).unwrap();
        pts[5] = Point::new(0.9, 0.1);
        let corrupted = fit_ellipse(&pts).unwrap();
        assert!(corrupted.rms > 1e-3);
        pts.remove(5);
        let fit = fit_ellipse(&pts).unwrap();
        assert_ellipse_close(&fit.ellipse, &e, 1e-6);
    }

    #[test]
    fn degenerate_inputs_fail() {
        let line: Vec<Point> = (0..5).map(|i| Point::new(0.1 * i as f64, 0.2 + 0.1 * i as f64)).collect();
        assert!(matches!(fit_ellipse(&line), Err(GeometryError::FitFailure(_))));
        let four = sample_ellipse_landmarks(&Ellipse::circle(0.5, 0.5, 0.2).unwrap(), 5).unwrap();
        assert!(fit_ellipse(&four[..4]).is_err());
    }

    #[test]
    fn four_points_interpolate_one_segment() {
        let pts = [Point::new(0.1, 0.6), Point::new(0.3, 0.3), Point::new(0.6, 0.25), Point::new(0.9, 0.5)];
        let fit = fit_bezier_chain(&pts, 1).unwrap();
        assert_eq!(fit.chain.start(), pts[0]);
        assert_eq!(fit.chain.end(), pts[3]);
        assert!(fit.rms < 1e-12);
        assert!(fit_bezier_chain(&pts[..3], 1).is_err());
        assert!(fit_bezier_chain(&pts, 2).is_err());
    }

    #[test]
    fn chain_round_trip() {
        let chain = BezierChain::new(vec![
            Point::new(0.1, 0.55),
            Point::new(0.3, 0.15),
            Point::new(0.65, 0.2),
            Point::new(0.9, 0.5),
        ])
        .unwrap();
        let pts = sample_bezier_landmarks(&chain, 12).unwrap();
        let fit = fit_bezier_chain(&pts, 1).unwrap();
        for (a, b) in fit.chain.points().iter().zip(chain.points()) {
            assert!(a.distance(*b) < 1e-5, "{a:?} vs {b:?}");
        }
    }
}
