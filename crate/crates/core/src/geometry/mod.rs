//! Parametric contour shapes, landmark sampling, pixel-area rasterization and
//! least-squares refitting.
//!
//! All coordinates are normalized image coordinates: `x` grows to the right,
//! `y` grows downwards and the visible frame is `[0, 1]²`. Pixel `(i, j)` of a
//! [`RasterGrid`] has its center at `((i + 0.5) / width, (j + 0.5) / height)`.

mod bezier;
mod ellipse;
mod fit;
mod raster;

pub use bezier::{BezierChain, ARC_SUBDIVISIONS};
pub use ellipse::Ellipse;
pub use fit::{fit_bezier_chain, fit_bezier_chain_fixed, fit_ellipse, BezierFit, EllipseFit};
pub use raster::{iou, rasterize, rasterize_area, region_iou, PixelRegion, RasterGrid};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape fit failed: {0}")]
    FitFailure(String),
    #[error("intersection over union is undefined for two empty shapes")]
    UndefinedIou,
}

pub type Result<T> = std::result::Result<T, GeometryError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn lerp(self, other: Point, t: f64) -> Point {
        Point::new(self.x + (other.x - self.x) * t, self.y + (other.y - self.y) * t)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl std::ops::Add for Point {
    type Output = Point;
    fn add(self, rhs: Point) -> Point {
        Point::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl std::ops::Sub for Point {
    type Output = Point;
    fn sub(self, rhs: Point) -> Point {
        Point::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl std::ops::Mul<f64> for Point {
    type Output = Point;
    fn mul(self, rhs: f64) -> Point {
        Point::new(self.x * rhs, self.y * rhs)
    }
}

/// The three contours annotated on every eye image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ShapeKind {
    Pupil,
    Iris,
    Eyelid,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Pupil, ShapeKind::Iris, ShapeKind::Eyelid];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Pupil => "pupil",
            ShapeKind::Iris => "iris",
            ShapeKind::Eyelid => "eyelid",
        }
    }

    /// Smallest landmark count from which this kind's shape can be refit.
    pub fn min_landmarks(self) -> usize {
        match self {
            ShapeKind::Pupil | ShapeKind::Iris => 5,
            ShapeKind::Eyelid => 4,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            ShapeKind::Pupil => 0,
            ShapeKind::Iris => 1,
            ShapeKind::Eyelid => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<ShapeKind> {
        match tag {
            0 => Some(ShapeKind::Pupil),
            1 => Some(ShapeKind::Iris),
            2 => Some(ShapeKind::Eyelid),
            _ => None,
        }
    }
}

impl std::fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A ground-truth or fitted contour. The kind fixes the geometry variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ShapeSpec {
    Pupil(Ellipse),
    Iris(Ellipse),
    Eyelid(BezierChain),
}

impl ShapeSpec {
    pub fn kind(&self) -> ShapeKind {
        match self {
            ShapeSpec::Pupil(_) => ShapeKind::Pupil,
            ShapeSpec::Iris(_) => ShapeKind::Iris,
            ShapeSpec::Eyelid(_) => ShapeKind::Eyelid,
        }
    }

    pub fn ellipse(&self) -> Option<&Ellipse> {
        match self {
            ShapeSpec::Pupil(e) | ShapeSpec::Iris(e) => Some(e),
            ShapeSpec::Eyelid(_) => None,
        }
    }

    pub fn chain(&self) -> Option<&BezierChain> {
        match self {
            ShapeSpec::Eyelid(c) => Some(c),
            _ => None,
        }
    }

    /// Flat parameter vector: `[cx, cy, rx, ry, theta]` for ellipses, the
    /// interleaved control point coordinates for chains.
    pub fn parameters(&self) -> Vec<f64> {
        match self {
            ShapeSpec::Pupil(e) | ShapeSpec::Iris(e) => e.parameters().to_vec(),
            ShapeSpec::Eyelid(c) => c.points().iter().flat_map(|p| [p.x, p.y]).collect(),
        }
    }

    pub fn from_parameters(kind: ShapeKind, params: &[f64]) -> Result<ShapeSpec> {
        match kind {
            ShapeKind::Pupil | ShapeKind::Iris => {
                let [cx, cy, rx, ry, theta] = <[f64; 5]>::try_from(params).map_err(|_| {
                    GeometryError::InvalidArgument(format!("ellipse needs 5 parameters, got {}", params.len()))
                })?;
                let e = Ellipse::new(cx, cy, rx, ry, theta)?;
                Ok(if kind == ShapeKind::Pupil { ShapeSpec::Pupil(e) } else { ShapeSpec::Iris(e) })
            }
            ShapeKind::Eyelid => {
                if !params.len().is_multiple_of(2) {
                    return Err(GeometryError::InvalidArgument("odd number of chain coordinates".into()));
                }
                let pts = params.chunks_exact(2).map(|c| Point::new(c[0], c[1])).collect();
                Ok(ShapeSpec::Eyelid(BezierChain::new(pts)?))
            }
        }
    }

    /// Landmarks sampled along the contour with the kind's sampling rule.
    pub fn sample_landmarks(&self, n: usize) -> Result<Vec<Point>> {
        match self {
            ShapeSpec::Pupil(e) | ShapeSpec::Iris(e) => sample_ellipse_landmarks(e, n),
            ShapeSpec::Eyelid(c) => sample_bezier_landmarks(c, n),
        }
    }

    /// Pushes a smooth point map through the shape: a dense contour sampling
    /// is mapped and the same kind of shape is refit to it.
    pub fn map_points<F: Fn(Point) -> Point>(&self, f: F) -> Result<ShapeSpec> {
        match self {
            ShapeSpec::Pupil(e) | ShapeSpec::Iris(e) => {
                let dense: Vec<Point> = sample_ellipse_landmarks(e, 64)?.into_iter().map(&f).collect();
                let fitted = fit_ellipse(&dense)?.ellipse;
                Ok(match self {
                    ShapeSpec::Pupil(_) => ShapeSpec::Pupil(fitted),
                    _ => ShapeSpec::Iris(fitted),
                })
            }
            ShapeSpec::Eyelid(c) => {
                let dense: Vec<Point> =
                    sample_bezier_landmarks(c, 16 * c.segments() + 1)?.into_iter().map(&f).collect();
                Ok(ShapeSpec::Eyelid(fit_bezier_chain(&dense, c.segments())?.chain))
            }
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> ShapeSpec {
        match self {
            ShapeSpec::Pupil(e) => ShapeSpec::Pupil(e.translate(dx, dy)),
            ShapeSpec::Iris(e) => ShapeSpec::Iris(e.translate(dx, dy)),
            ShapeSpec::Eyelid(c) => ShapeSpec::Eyelid(c.translate(dx, dy)),
        }
    }
}

/// `n` points on the ellipse boundary at uniformly spaced parametric angles,
/// the first one at angle 0 of the ellipse's own frame.
pub fn sample_ellipse_landmarks(e: &Ellipse, n: usize) -> Result<Vec<Point>> {
    if n < 5 {
        return Err(GeometryError::InvalidArgument(format!("ellipse sampling needs at least 5 landmarks, got {n}")));
    }
    let step = std::f64::consts::TAU / n as f64;
    Ok((0..n).map(|k| e.point_at(k as f64 * step)).collect())
}

/// `n` points equally spaced in arc length along the chain, endpoints included.
pub fn sample_bezier_landmarks(b: &BezierChain, n: usize) -> Result<Vec<Point>> {
    if n < 4 {
        return Err(GeometryError::InvalidArgument(format!("chain sampling needs at least 4 landmarks, got {n}")));
    }
    Ok(b.arc_length_parameters(n).into_iter().map(|u| b.eval(u)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circle_samples_are_equidistant_from_center() {
        let e = Ellipse::new(0.5, 0.5, 0.25, 0.25, 0.0).unwrap();
        assert!(sample_ellipse_landmarks(&e, 4).is_err());
        let pts = sample_ellipse_landmarks(&e, 8).unwrap();
        assert_eq!(pts.len(), 8);
        for p in pts {
            assert!((p.distance(Point::new(0.5, 0.5)) - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn first_ellipse_sample_is_on_major_axis() {
        let e = Ellipse::new(0.4, 0.6, 0.2, 0.1, 0.0).unwrap();
        let pts = sample_ellipse_landmarks(&e, 8).unwrap();
        assert!((pts[0].x - 0.6).abs() < 1e-15 && pts[0].y == 0.6);
    }

    #[test]
    fn collinear_chain_samples_evenly() {
        let ctrl = (0..4).map(|i| Point::new(0.1 + 0.2 * i as f64, 0.3 + 0.1 * i as f64)).collect();
        let chain = BezierChain::new(ctrl).unwrap();
        let pts = sample_bezier_landmarks(&chain, 5).unwrap();
        let d0 = pts[0].distance(pts[1]);
        for w in pts.windows(2) {
            assert!((w[0].distance(w[1]) - d0).abs() < 1e-12);
        }
        for p in &pts {
            // on the line y = 0.3 + 0.5 (x - 0.1)
            assert!((p.y - (0.3 + 0.5 * (p.x - 0.1))).abs() < 1e-12);
        }
    }

    #[test]
    fn chain_sampling_hits_endpoints() {
        let chain = BezierChain::new(vec![
            Point::new(0.1, 0.5),
            Point::new(0.3, 0.1),
            Point::new(0.7, 0.15),
            Point::new(0.9, 0.55),
        ])
        .unwrap();
        assert!(sample_bezier_landmarks(&chain, 3).is_err());
        let pts = sample_bezier_landmarks(&chain, 4).unwrap();
        assert_eq!(pts[0], Point::new(0.1, 0.5));
        assert_eq!(pts[3], Point::new(0.9, 0.55));
    }

    #[test]
    fn sampling_is_deterministic() {
        let e = Ellipse::new(0.45, 0.52, 0.13, 0.09, 0.3).unwrap();
        let a = sample_ellipse_landmarks(&e, 17).unwrap();
        let b = sample_ellipse_landmarks(&e, 17).unwrap();
        assert!(a.iter().zip(&b).all(|(p, q)| p.x.to_bits() == q.x.to_bits() && p.y.to_bits() == q.y.to_bits()));
    }

    #[test]
    fn shape_parameter_round_trip() {
        let s = ShapeSpec::Iris(Ellipse::new(0.5, 0.5, 0.2, 0.15, 0.2).unwrap());
        let back = ShapeSpec::from_parameters(ShapeKind::Iris, &s.parameters()).unwrap();
        assert_eq!(s, back);
        assert!(ShapeSpec::from_parameters(ShapeKind::Pupil, &[0.5; 4]).is_err());
    }
}
