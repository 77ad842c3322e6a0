use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{quantize_point, quantize_shape, DataError, Dataset, DatasetConfig, Result, Sample, Split};
use crate::geometry::{BezierChain, Ellipse, Point, RasterGrid, ShapeKind, ShapeSpec};

const MAX_ATTEMPTS: usize = 100;
// pupil boundary must stay this far inside the iris (implicit-level units)
const CONTAINMENT_LEVEL: f64 = 0.85;

const SKIN: f32 = 0.62;
const SCLERA: f32 = 0.86;
const IRIS: f32 = 0.45;
const PUPIL: f32 = 0.08;
const LID_EDGE: f32 = 0.22;
const LID_EDGE_HALF_WIDTH: f64 = 0.012;

/// Generator for one `(seed, id)` pair. Independent streams keep every sample
/// reproducible regardless of generation order.
pub fn sample_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn generate_sample(id: u64, cfg: &DatasetConfig) -> Result<Sample> {
    let mut rng = sample_rng(cfg.seed, id);
    let fail = |reason: String| DataError::GenerationFailure { id, reason };

    let mut attempt = 0;
    let (pupil, iris) = loop {
        if attempt == MAX_ATTEMPTS {
            return Err(fail(format!("no contained pupil after {MAX_ATTEMPTS} attempts")));
        }
        attempt += 1;
        let cx = 0.5 + rng.random_range(-0.12..0.12);
        let cy = 0.55 + rng.random_range(-0.1..0.1);
        let irx: f64 = rng.random_range(0.12..0.25);
        let iry = (irx * rng.random_range(0.8..1.05f64)).clamp(0.12, 0.25);
        let iris = Ellipse::new(cx, cy, irx, iry, rng.random_range(0.0..0.4))?;
        let prx: f64 = rng.random_range(0.03..0.10);
        let pry = (prx * rng.random_range(0.75..1.0f64)).clamp(0.03, 0.10);
        let pcx = cx + rng.random_range(-0.03..0.03);
        let pcy = cy + rng.random_range(-0.03..0.03);
        let pupil = Ellipse::new(pcx, pcy, prx, pry, rng.random_range(0.0..0.4))?;
        if iris.contains_ellipse(&pupil, CONTAINMENT_LEVEL) {
            break (pupil, iris);
        }
    };
    let eyelid = eyelid_chain(&mut rng, &iris)?;

    let shapes = [ShapeSpec::Pupil(pupil), ShapeSpec::Iris(iris), ShapeSpec::Eyelid(eyelid)]
        .iter()
        .map(quantize_shape)
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let landmarks = shapes
        .iter()
        .map(|s| {
            let n = cfg.landmarks.get(s.kind());
            s.sample_landmarks(n).map(|pts| pts.into_iter().map(quantize_point).collect::<Vec<_>>())
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let image = render(&shapes, cfg.grid);
    let sample = Sample { id, grid: cfg.grid, image, shapes, landmarks };
    sample.check_invariants(&cfg.landmarks).map_err(fail)?;
    Ok(sample)
}

/// Upper lid: one cubic from the left to the right eye corner bulging upwards,
/// its apex somewhere between the upper iris third and just above the iris.
fn eyelid_chain(rng: &mut ChaCha8Rng, iris: &Ellipse) -> Result<BezierChain> {
    let (cx, cy) = (iris.cx, iris.cy);
    let (_, _, iris_top, _) = iris.bounds();
    let iris_half_height = cy - iris_top;
    let left = Point::new((cx - rng.random_range(0.3..0.42)).max(0.02), cy + rng.random_range(-0.05..0.05));
    let right = Point::new((cx + rng.random_range(0.3..0.42)).min(0.98), cy + rng.random_range(-0.05..0.05));
    let apex = (cy - iris_half_height * rng.random_range(0.55..1.15)).max(0.03);
    let base = 0.5 * (left.y + right.y);
    // the curve midpoint sits 3/4 of the way to the inner control height
    let lift = (base - apex) / 0.75;
    let span = right.x - left.x;
    let skew = rng.random_range(-0.08..0.08) * span;
    let c1 = Point::new(left.x + (0.22 * span) + skew, left.y - lift);
    let c2 = Point::new(right.x - (0.22 * span) + skew, right.y - lift);
    Ok(BezierChain::new(vec![left, c1, c2, right])?)
}

/// Flat-shaded rendering with 2×2 supersampling: sclera, iris, pupil, then the
/// skin above the lid and a dark lid margin.
pub(crate) fn render(shapes: &[ShapeSpec], grid: RasterGrid) -> Vec<f32> {
    let pupil = shapes[ShapeKind::Pupil as usize].ellipse().expect("pupil is an ellipse");
    let iris = shapes[ShapeKind::Iris as usize].ellipse().expect("iris is an ellipse");
    let lid = shapes[ShapeKind::Eyelid as usize].chain().expect("eyelid is a chain");
    let lid_curve = LidProfile::new(lid);
    let (w, h) = (grid.width, grid.height);
    let mut image = vec![0.0f32; w * h];
    const OFFSETS: [f64; 2] = [0.25, 0.75];
    for j in 0..h {
        for i in 0..w {
            let mut acc = 0.0f32;
            for oy in OFFSETS {
                for ox in OFFSETS {
                    let p = Point::new((i as f64 + ox) / w as f64, (j as f64 + oy) / h as f64);
                    let lid_y = lid_curve.height_at(p.x);
                    acc += if (p.y - lid_y).abs() < LID_EDGE_HALF_WIDTH {
                        LID_EDGE
                    } else if p.y < lid_y {
                        SKIN
                    } else if pupil.contains(p) {
                        PUPIL
                    } else if iris.contains(p) {
                        IRIS
                    } else {
                        SCLERA
                    };
                }
            }
            image[j * w + i] = acc / 4.0;
        }
    }
    image
}

/// Lid height as a function of `x`, from a dense polyline of the chain.
/// Outside the eye corners the corner height is extended flat.
struct LidProfile {
    pts: Vec<Point>,
}

impl LidProfile {
    fn new(chain: &BezierChain) -> Self {
        let mut pts = chain.polyline(128);
        pts.sort_by(|a, b| a.x.total_cmp(&b.x));
        LidProfile { pts }
    }

    fn height_at(&self, x: f64) -> f64 {
        let pts = &self.pts;
        if x <= pts[0].x {
            return pts[0].y;
        }
        if x >= pts[pts.len() - 1].x {
            return pts[pts.len() - 1].y;
        }
        let k = pts.partition_point(|p| p.x <= x).clamp(1, pts.len() - 1);
        let (a, b) = (pts[k - 1], pts[k]);
        let dx = b.x - a.x;
        if dx <= 0.0 {
            return a.y;
        }
        a.y + (b.y - a.y) * (x - a.x) / dx
    }
}

/// All three splits of `cfg`, ids consecutive from 0.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let make = |split: Split| -> Result<Vec<Sample>> {
        let first = cfg.first_id(split);
        (0..cfg.count(split) as u64).map(|k| generate_sample(first + k, cfg)).collect()
    };
    Ok(Dataset { config: cfg.clone(), train: make(Split::Train)?, val: make(Split::Val)?, test: make(Split::Test)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rasterize_area;

    #[test]
    fn fixed_seed_is_reproducible() {
        let cfg = DatasetConfig { seed: 42, ..DatasetConfig::default() };
        let a = generate_sample(0, &cfg).unwrap();
        let b = generate_sample(0, &cfg).unwrap();
        assert_eq!(a, b);
        for (la, lb) in a.landmarks.iter().flatten().zip(b.landmarks.iter().flatten()) {
            assert_eq!(la.x.to_bits(), lb.x.to_bits());
            assert_eq!(la.y.to_bits(), lb.y.to_bits());
        }
        let c = generate_sample(1, &cfg).unwrap();
        assert_ne!(a.shapes, c.shapes);
    }

    #[test]
    fn pupil_smaller_than_iris() {
        let cfg = DatasetConfig::default();
        let grid = RasterGrid::metric();
        for id in 0..50 {
            let s = generate_sample(id, &cfg).unwrap();
            let p = rasterize_area(s.shape(ShapeKind::Pupil), grid);
            let i = rasterize_area(s.shape(ShapeKind::Iris), grid);
            let e = rasterize_area(s.shape(ShapeKind::Eyelid), grid);
            assert!(p < i && p > 0 && e > 0, "id {id}: {p} {i} {e}");
        }
    }

    #[test]
    fn rendering_shows_pupil_dark() {
        let cfg = DatasetConfig::default();
        let s = generate_sample(3, &cfg).unwrap();
        let pupil = s.shape(ShapeKind::Pupil).ellipse().unwrap();
        let lid = LidProfile::new(s.shape(ShapeKind::Eyelid).chain().unwrap());
        let (i, j) = ((pupil.cx * 64.0) as usize, (pupil.cy * 64.0) as usize);
        if pupil.cy > lid.height_at(pupil.cx) + 0.02 {
            assert!(s.image[j * 64 + i] < 0.3);
        }
    }
}
