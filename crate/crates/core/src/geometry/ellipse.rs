use std::f64::consts::{FRAC_PI_2, PI, TAU};

use serde::{Deserialize, Serialize};

use super::{GeometryError, Point, Result};

/// A rotated ellipse in normalized image coordinates.
///
/// Stored in a canonical form so that every non-circular ellipse has exactly
/// one parameter vector: `theta ∈ [0, π/2)` and `rx` is the semi-axis along
/// direction `theta` (it may be the shorter one). Rotating by `π/2` while
/// swapping the axes describes the same point set, which is why the range
/// stops at `π/2` rather than `π`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub theta: f64,
}

impl Ellipse {
    pub fn new(cx: f64, cy: f64, rx: f64, ry: f64, theta: f64) -> Result<Ellipse> {
        if ![cx, cy, rx, ry, theta].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidArgument("non-finite ellipse parameter".into()));
        }
        if rx <= 0.0 || ry <= 0.0 {
            return Err(GeometryError::InvalidArgument(format!(
                "ellipse semi-axes must be positive, got rx={rx}, ry={ry}"
            )));
        }
        let (rx, ry, theta) = canonical_axes(rx, ry, theta);
        Ok(Ellipse { cx, cy, rx, ry, theta })
    }

    pub fn circle(cx: f64, cy: f64, r: f64) -> Result<Ellipse> {
        Ellipse::new(cx, cy, r, r, 0.0)
    }

    pub fn parameters(&self) -> [f64; 5] {
        [self.cx, self.cy, self.rx, self.ry, self.theta]
    }

    /// Largest absolute parameter difference to `other`, minimized over the
    /// equivalent descriptions (axes swapped with a quarter turn, or theta
    /// shifted by a half turn).
    pub fn parameter_distance(&self, other: &Ellipse) -> f64 {
        let angle_gap = |a: f64, b: f64| {
            let d = (a - b).rem_euclid(PI);
            d.min(PI - d)
        };
        let center = (self.cx - other.cx).abs().max((self.cy - other.cy).abs());
        let same = (self.rx - other.rx).abs().max((self.ry - other.ry).abs()).max(angle_gap(self.theta, other.theta));
        let swapped = (self.rx - other.ry)
            .abs()
            .max((self.ry - other.rx).abs())
            .max(angle_gap(self.theta + FRAC_PI_2, other.theta));
        center.max(same.min(swapped))
    }

    pub fn center(&self) -> Point {
        Point::new(self.cx, self.cy)
    }

    pub fn area(&self) -> f64 {
        PI * self.rx * self.ry
    }

    pub fn center_in_unit_square(&self) -> bool {
        (0.0..=1.0).contains(&self.cx) && (0.0..=1.0).contains(&self.cy)
    }

    /// Boundary point at parametric (eccentric) angle `t`.
    pub fn point_at(&self, t: f64) -> Point {
        let (s, c) = self.theta.sin_cos();
        let (u, v) = (self.rx * t.cos(), self.ry * t.sin());
        Point::new(self.cx + u * c - v * s, self.cy + u * s + v * c)
    }

    /// Parametric angle in `[0, 2π)` whose boundary point lies on the ray from
    /// the center through `p`.
    pub fn angle_of(&self, p: Point) -> f64 {
        let (u, v) = self.to_local(p);
        (v / self.ry).atan2(u / self.rx).rem_euclid(TAU)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Ellipse {
        Ellipse { cx: self.cx + dx, cy: self.cy + dy, ..*self }
    }

    fn to_local(self, p: Point) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (p.x - self.cx, p.y - self.cy);
        (dx * c + dy * s, -dx * s + dy * c)
    }

    /// Implicit value `u²/rx² + v²/ry²`; `≤ 1` inside.
    pub fn level(&self, p: Point) -> f64 {
        let (u, v) = self.to_local(p);
        (u / self.rx).powi(2) + (v / self.ry).powi(2)
    }

    pub fn contains(&self, p: Point) -> bool {
        self.level(p) <= 1.0
    }

    /// True when every point of `inner` lies inside `self`, checked on a dense
    /// boundary sampling of `inner` with a relative safety factor.
    pub fn contains_ellipse(&self, inner: &Ellipse, safety: f64) -> bool {
        (0..256).all(|k| self.level(inner.point_at(k as f64 * TAU / 256.0)) <= safety)
    }

    /// Axis-aligned bounding box `(xmin, xmax, ymin, ymax)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let hx = ((self.rx * c).powi(2) + (self.ry * s).powi(2)).sqrt();
        let hy = ((self.rx * s).powi(2) + (self.ry * c).powi(2)).sqrt();
        (self.cx - hx, self.cx + hx, self.cy - hy, self.cy + hy)
    }

    /// Range of `x` on the horizontal line at height `y` that lies inside,
    /// or `None` when the line misses the ellipse.
    pub fn row_interval(&self, y: f64) -> Option<(f64, f64)> {
        let (s, c) = self.theta.sin_cos();
        let (ia, ib) = (1.0 / (self.rx * self.rx), 1.0 / (self.ry * self.ry));
        let dy = y - self.cy;
        let qa = c * c * ia + s * s * ib;
        let qb = 2.0 * dy * c * s * (ia - ib);
        let qc = dy * dy * (s * s * ia + c * c * ib) - 1.0;
        let disc = qb * qb - 4.0 * qa * qc;
        if disc < 0.0 {
            return None;
        }
        let root = disc.sqrt();
        Some((self.cx + (-qb - root) / (2.0 * qa), self.cx + (-qb + root) / (2.0 * qa)))
    }

    /// Euclidean distance from `p` to the ellipse boundary.
    pub fn distance_to(&self, p: Point) -> f64 {
        let (u, v) = self.to_local(p);
        let (e0, e1, y0, y1) = if self.rx >= self.ry {
            (self.rx, self.ry, u.abs(), v.abs())
        } else {
            (self.ry, self.rx, v.abs(), u.abs())
        };
        distance_point_ellipse(e0, e1, y0, y1)
    }
}

fn canonical_axes(rx: f64, ry: f64, theta: f64) -> (f64, f64, f64) {
    let mut t = theta.rem_euclid(PI);
    if t >= PI {
        t = 0.0;
    }
    if t >= FRAC_PI_2 {
        let t2 = t - FRAC_PI_2;
        // rounding can land exactly on π/2 again
        if t2 >= FRAC_PI_2 {
            return (rx, ry, 0.0);
        }
        (ry, rx, t2)
    } else {
        (rx, ry, t)
    }
}

// Distance from (y0, y1) in the first quadrant to the axis-aligned ellipse with
// semi-axes e0 >= e1 (Eberly's robust bisection formulation).
fn distance_point_ellipse(e0: f64, e1: f64, y0: f64, y1: f64) -> f64 {
    if y1 > 0.0 {
        if y0 > 0.0 {
            let z0 = y0 / e0;
            let z1 = y1 / e1;
            let g = z0 * z0 + z1 * z1 - 1.0;
            if g != 0.0 {
                let r0 = (e0 / e1).powi(2);
                let sbar = bisect_root(r0, z0, z1, g);
                let x0 = r0 * y0 / (sbar + r0);
                let x1 = y1 / (sbar + 1.0);
                (x0 - y0).hypot(x1 - y1)
            } else {
                0.0
            }
        } else {
            (y1 - e1).abs()
        }
    } else {
        let numer0 = e0 * y0;
        let denom0 = e0 * e0 - e1 * e1;
        if numer0 < denom0 {
            let xde0 = numer0 / denom0;
            let x0 = e0 * xde0;
            let x1 = e1 * (1.0 - xde0 * xde0).max(0.0).sqrt();
            (x0 - y0).hypot(x1)
        } else {
            (y0 - e0).abs()
        }
    }
}

fn bisect_root(r0: f64, z0: f64, z1: f64, g: f64) -> f64 {
    let n0 = r0 * z0;
    let mut s0 = z1 - 1.0;
    let mut s1 = if g < 0.0 { 0.0 } else { n0.hypot(z1) - 1.0 };
    let mut s = 0.0;
    for _ in 0..1100 {
        s = 0.5 * (s0 + s1);
        if s == s0 || s == s1 {
            break;
        }
        let ratio0 = n0 / (s + r0);
        let ratio1 = z1 / (s + 1.0);
        let g = ratio0 * ratio0 + ratio1 * ratio1 - 1.0;
        if g > 0.0 {
            s0 = s;
        } else if g < 0.0 {
            s1 = s;
        } else {
            break;
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_axes() {
        assert!(Ellipse::new(0.5, 0.5, 0.0, 0.1, 0.0).is_err());
        assert!(Ellipse::new(0.5, 0.5, 0.1, -0.1, 0.0).is_err());
        assert!(Ellipse::new(0.5, f64::NAN, 0.1, 0.1, 0.0).is_err());
    }

    #[test]
    fn canonical_form_is_unique() {
        let a = Ellipse::new(0.5, 0.5, 0.2, 0.1, 0.3).unwrap();
        let b = Ellipse::new(0.5, 0.5, 0.1, 0.2, 0.3 + FRAC_PI_2).unwrap();
        let c = Ellipse::new(0.5, 0.5, 0.2, 0.1, 0.3 - PI).unwrap();
        assert!((a.theta - b.theta).abs() < 1e-15 && a.rx == b.rx && a.ry == b.ry);
        assert!((a.theta - c.theta).abs() < 1e-15);
        assert!((0.0..FRAC_PI_2).contains(&b.theta));
    }

    #[test]
    fn boundary_distance() {
        let e = Ellipse::new(0.5, 0.5, 0.2, 0.1, 0.7).unwrap();
        for k in 0..32 {
            let p = e.point_at(k as f64 * 0.2);
            assert!(e.distance_to(p) < 1e-12);
            assert!((e.level(p) - 1.0).abs() < 1e-12);
        }
        let c = Ellipse::circle(0.0, 0.0, 1.0).unwrap();
        assert!((c.distance_to(Point::new(3.0, 4.0)) - 4.0).abs() < 1e-12);
        assert!((c.distance_to(Point::new(0.0, 0.0)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn angle_of_inverts_point_at() {
        let e = Ellipse::new(0.4, 0.6, 0.15, 0.08, 0.2).unwrap();
        for k in 0..12 {
            let t = k as f64 * TAU / 12.0;
            let back = e.angle_of(e.point_at(t));
            let d = (back - t).rem_euclid(TAU);
            assert!(d.min(TAU - d) < 1e-12);
        }
    }

    #[test]
    fn row_interval_matches_predicate() {
        let e = Ellipse::new(0.5, 0.5, 0.3, 0.1, 0.4).unwrap();
        let (x0, x1) = e.row_interval(0.55).unwrap();
        assert!((e.level(Point::new(x0, 0.55)) - 1.0).abs() < 1e-9);
        assert!((e.level(Point::new(x1, 0.55)) - 1.0).abs() < 1e-9);
        assert!(e.row_interval(0.9).is_none());
    }
}
