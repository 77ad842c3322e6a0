use serde::{Deserialize, Serialize};

use super::{GeometryError, Point, Result};

/// Polyline subdivisions per cubic segment used for arc-length bookkeeping.
pub const ARC_SUBDIVISIONS: usize = 64;

/// Piecewise cubic Bézier curve. Segment `k` uses control points
/// `3k ..= 3k + 3`, so consecutive segments share an endpoint.
///
/// Positions along the chain are addressed by a global parameter
/// `u ∈ [0, segments]`; the integer part selects the segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BezierChain {
    points: Vec<Point>,
}

impl BezierChain {
    pub fn new(points: Vec<Point>) -> Result<BezierChain> {
        if points.len() < 4 || !(points.len() - 1).is_multiple_of(3) {
            return Err(GeometryError::InvalidArgument(format!(
                "a cubic chain needs 3k + 1 (k >= 1) control points, got {}",
                points.len()
            )));
        }
        if !points.iter().all(|p| p.is_finite()) {
            return Err(GeometryError::InvalidArgument("non-finite control point".into()));
        }
        Ok(BezierChain { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn segments(&self) -> usize {
        (self.points.len() - 1) / 3
    }

    pub fn start(&self) -> Point {
        self.points[0]
    }

    pub fn end(&self) -> Point {
        self.points[self.points.len() - 1]
    }

    fn locate(&self, u: f64) -> (usize, f64) {
        let segs = self.segments();
        let u = u.clamp(0.0, segs as f64);
        let k = (u.floor() as usize).min(segs - 1);
        (k, u - k as f64)
    }

    fn control(&self, k: usize) -> [Point; 4] {
        let p = &self.points[3 * k..3 * k + 4];
        [p[0], p[1], p[2], p[3]]
    }

    pub fn eval(&self, u: f64) -> Point {
        let (k, t) = self.locate(u);
        let [p0, p1, p2, p3] = self.control(k);
        let s = 1.0 - t;
        p0 * (s * s * s) + p1 * (3.0 * s * s * t) + p2 * (3.0 * s * t * t) + p3 * (t * t * t)
    }

    pub fn derivative(&self, u: f64) -> Point {
        let (k, t) = self.locate(u);
        let [p0, p1, p2, p3] = self.control(k);
        let s = 1.0 - t;
        (p1 - p0) * (3.0 * s * s) + (p2 - p1) * (6.0 * s * t) + (p3 - p2) * (3.0 * t * t)
    }

    pub fn second_derivative(&self, u: f64) -> Point {
        let (k, t) = self.locate(u);
        let [p0, p1, p2, p3] = self.control(k);
        (p2 - p1 * 2.0 + p0) * (6.0 * (1.0 - t)) + (p3 - p2 * 2.0 + p1) * (6.0 * t)
    }

    /// Polyline through the chain with `per_segment` pieces per segment.
    pub fn polyline(&self, per_segment: usize) -> Vec<Point> {
        let total = self.segments() * per_segment;
        (0..=total).map(|i| self.eval(i as f64 / per_segment as f64)).collect()
    }

    /// Global parameters of `n` points equally spaced along the arc length
    /// (measured on the [`ARC_SUBDIVISIONS`] polyline), endpoints included.
    pub fn arc_length_parameters(&self, n: usize) -> Vec<f64> {
        let per = ARC_SUBDIVISIONS;
        let poly = self.polyline(per);
        let mut cum = Vec::with_capacity(poly.len());
        cum.push(0.0);
        for w in poly.windows(2) {
            let last = *cum.last().unwrap();
            cum.push(last + w[0].distance(w[1]));
        }
        let total = *cum.last().unwrap();
        let umax = self.segments() as f64;
        if n == 1 {
            return vec![0.0];
        }
        (0..n)
            .map(|i| {
                if i == 0 {
                    return 0.0;
                }
                if i == n - 1 {
                    return umax;
                }
                let s = total * i as f64 / (n - 1) as f64;
                let j = cum.partition_point(|&c| c <= s).clamp(1, cum.len() - 1);
                let span = cum[j] - cum[j - 1];
                let frac = if span > 0.0 { (s - cum[j - 1]) / span } else { 0.0 };
                ((j - 1) as f64 + frac) / per as f64
            })
            .collect()
    }

    pub fn arc_length(&self, per_segment: usize) -> f64 {
        self.polyline(per_segment).windows(2).map(|w| w[0].distance(w[1])).sum()
    }

    /// Parameter of the chain point closest to `p`: coarse polyline search
    /// followed by Newton refinement.
    pub fn project(&self, p: Point) -> f64 {
        let per = ARC_SUBDIVISIONS;
        let total = self.segments() * per;
        let mut best = 0.0;
        let mut best_d = f64::INFINITY;
        for i in 0..=total {
            let u = i as f64 / per as f64;
            let d = self.eval(u).distance(p);
            if d < best_d {
                best_d = d;
                best = u;
            }
        }
        self.refine_projection(p, best)
    }

    /// Newton iterations on `|C(u) - p|²` starting at `u`.
    pub fn refine_projection(&self, p: Point, mut u: f64) -> f64 {
        let umax = self.segments() as f64;
        for _ in 0..8 {
            let r = self.eval(u) - p;
            let d1 = self.derivative(u);
            let d2 = self.second_derivative(u);
            let g = r.x * d1.x + r.y * d1.y;
            let h = d1.x * d1.x + d1.y * d1.y + r.x * d2.x + r.y * d2.y;
            if h <= 0.0 {
                break;
            }
            let next = (u - g / h).clamp(0.0, umax);
            if (next - u).abs() < 1e-15 {
                u = next;
                break;
            }
            u = next;
        }
        u
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BezierChain {
        BezierChain { points: self.points.iter().map(|p| Point::new(p.x + dx, p.y + dy)).collect() }
    }
}
