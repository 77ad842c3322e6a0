use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{AugmentConfig, Sample};
use crate::geometry::{Ellipse, Point, ShapeSpec};

/// Low-frequency displacement field, two harmonics per axis:
/// `dx` varies with `y` and `dy` varies with `x`. `|d| <= amp` per axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarpField {
    pub amp: f64,
    pub weights: [f64; 4],
    pub phases: [f64; 4],
}

impl WarpField {
    pub fn displacement(&self, p: Point) -> Point {
        let [w0, w1, w2, w3] = self.weights;
        let [f0, f1, f2, f3] = self.phases;
        let dx = w0 * (TAU * p.y + f0).sin() + w1 * (2.0 * TAU * p.y + f1).sin();
        let dy = w2 * (TAU * p.x + f2).sin() + w3 * (2.0 * TAU * p.x + f3).sin();
        Point::new(self.amp * dx, self.amp * dy)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reflection {
    pub blob: Ellipse,
    pub intensity: f32,
}

/// Concrete augmentation parameters drawn for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentDraw {
    pub shift: Point,
    pub warp: Option<WarpField>,
    pub reflection: Option<Reflection>,
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

impl AugmentDraw {
    pub fn identity() -> Self {
        AugmentDraw { shift: Point::default(), warp: None, reflection: None, noise_sigma: 0.0, noise_seed: 0 }
    }

    pub fn shift_only(dx: f64, dy: f64) -> Self {
        AugmentDraw { shift: Point::new(dx, dy), ..AugmentDraw::identity() }
    }

    pub fn sample<R: Rng>(rng: &mut R, cfg: &AugmentConfig, near: Point) -> Self {
        let mut draw = AugmentDraw::identity();
        if cfg.shift_max > 0.0 {
            let m = cfg.shift_max;
            draw.shift = Point::new(rng.random_range(-m..=m), rng.random_range(-m..=m));
        }
        if cfg.deform_amp > 0.0 {
            let a: f64 = rng.random_range(0.3..1.0);
            let b: f64 = rng.random_range(0.3..1.0);
            draw.warp = Some(WarpField {
                amp: cfg.deform_amp,
                weights: [a / (1.0 + a), 1.0 / (1.0 + a), b / (1.0 + b), 1.0 / (1.0 + b)],
                phases: std::array::from_fn(|_| rng.random_range(0.0..TAU)),
            });
        }
        if cfg.reflection_prob > 0.0 && rng.random_bool(cfg.reflection_prob.min(1.0)) {
            let c = Point::new(
                (near.x + rng.random_range(-0.15..0.15)).clamp(0.0, 1.0),
                (near.y + rng.random_range(-0.15..0.15)).clamp(0.0, 1.0),
            );
            let r = rng.random_range(0.012..0.04);
            let blob = Ellipse::new(c.x, c.y, r, r * rng.random_range(0.6..1.0), rng.random_range(0.0..1.5))
                .expect("positive radii");
            draw.reflection = Some(Reflection { blob, intensity: rng.random_range(0.9..1.0) });
        }
        if cfg.noise_sigma > 0.0 {
            draw.noise_sigma = cfg.noise_sigma;
            draw.noise_seed = rng.random();
        }
        draw
    }

    fn is_geometric(&self) -> bool {
        self.shift != Point::default() || self.warp.is_some()
    }

    /// Forward map applied to annotations.
    pub fn map_point(&self, p: Point) -> Point {
        let d = self.warp.map_or(Point::default(), |w| w.displacement(p));
        p + d + self.shift
    }

    /// Approximate inverse of [`map_point`](Self::map_point) by fixed-point
    /// iteration; used to pull image intensities.
    fn unmap_point(&self, q: Point, table: Option<&WarpTable>) -> Point {
        let base = q - self.shift;
        match table {
            None => base,
            Some(t) => {
                let mut p = base;
                // the warp is a contraction with factor well below 0.1
                for _ in 0..2 {
                    p = base - t.displacement(p);
                }
                p
            }
        }
    }
}

/// Tabulated [`WarpField`] for per-pixel use; the field is separable, so two
/// 1-D tables with linear interpolation cover it.
struct WarpTable {
    dx_of_y: Vec<f64>,
    dy_of_x: Vec<f64>,
}

impl WarpTable {
    const LO: f64 = -0.5;
    const HI: f64 = 1.5;
    const N: usize = 512;

    fn new(w: &WarpField) -> Self {
        let at = |k: usize| Self::LO + (Self::HI - Self::LO) * k as f64 / (Self::N - 1) as f64;
        WarpTable {
            dx_of_y: (0..Self::N).map(|k| w.displacement(Point::new(0.0, at(k))).x).collect(),
            dy_of_x: (0..Self::N).map(|k| w.displacement(Point::new(at(k), 0.0)).y).collect(),
        }
    }

    fn lookup(table: &[f64], v: f64) -> f64 {
        let f = ((v - Self::LO) / (Self::HI - Self::LO) * (Self::N - 1) as f64).clamp(0.0, (Self::N - 1) as f64);
        let i = (f as usize).min(Self::N - 2);
        let t = f - i as f64;
        table[i] * (1.0 - t) + table[i + 1] * t
    }

    fn displacement(&self, p: Point) -> Point {
        Point::new(Self::lookup(&self.dx_of_y, p.y), Self::lookup(&self.dy_of_x, p.x))
    }
}

/// Draws augmentation parameters from `rng` and applies them.
pub fn augment<R: Rng>(s: &Sample, rng: &mut R, cfg: &AugmentConfig) -> Sample {
    let near = s.shapes[1].ellipse().map_or(Point::new(0.5, 0.5), |e| e.center());
    let draw = AugmentDraw::sample(rng, cfg, near);
    augment_with(s, &draw)
}

/// Noise and reflections touch the image only; shift and warp move the image,
/// the landmarks and the shape parameters together. Landmarks are clamped back
/// into the frame afterwards.
pub fn augment_with(s: &Sample, draw: &AugmentDraw) -> Sample {
    let mut out = s.clone();
    if draw.is_geometric() {
        out.image = resample(s, draw);
        for pts in out.landmarks.iter_mut() {
            for p in pts.iter_mut() {
                let q = draw.map_point(*p);
                *p = Point::new(q.x.clamp(0.0, 1.0), q.y.clamp(0.0, 1.0));
            }
        }
        out.shapes = s
            .shapes
            .iter()
            .map(|shape| match draw.warp {
                None => shape.translate(draw.shift.x, draw.shift.y),
                Some(_) => map_shape(shape, draw),
            })
            .collect();
    }
    let (w, h) = (s.grid.width, s.grid.height);
    if let Some(refl) = draw.reflection {
        for j in 0..h {
            for i in 0..w {
                let p = Point::new((i as f64 + 0.5) / w as f64, (j as f64 + 0.5) / h as f64);
                if refl.blob.contains(p) {
                    let v = &mut out.image[j * w + i];
                    *v = v.max(refl.intensity);
                }
            }
        }
    }
    if draw.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(draw.noise_seed);
        let normal = Normal::new(0.0, draw.noise_sigma).expect("finite sigma");
        for v in out.image.iter_mut() {
            *v = (*v as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
    }
    out
}

fn map_shape(shape: &ShapeSpec, draw: &AugmentDraw) -> ShapeSpec {
    match shape {
        // a refit failure can only come from a degenerate warp; keep the translated shape then
        ShapeSpec::Pupil(_) | ShapeSpec::Iris(_) => {
            shape.map_points(|p| draw.map_point(p)).unwrap_or_else(|_| shape.translate(draw.shift.x, draw.shift.y))
        }
        // control points follow the map directly; exact for the translation part
        ShapeSpec::Eyelid(c) => {
            let pts = c.points().iter().map(|&p| draw.map_point(p)).collect();
            crate::geometry::BezierChain::new(pts)
                .map(ShapeSpec::Eyelid)
                .unwrap_or_else(|_| shape.translate(draw.shift.x, draw.shift.y))
        }
    }
}

fn resample(s: &Sample, draw: &AugmentDraw) -> Vec<f32> {
    let (w, h) = (s.grid.width, s.grid.height);
    let mut out = vec![0.0f32; w * h];
    let table = draw.warp.as_ref().map(WarpTable::new);
    for j in 0..h {
        for i in 0..w {
            let q = Point::new((i as f64 + 0.5) / w as f64, (j as f64 + 0.5) / h as f64);
            let p = draw.unmap_point(q, table.as_ref());
            out[j * w + i] = bilinear(&s.image, w, h, p.x * w as f64 - 0.5, p.y * h as f64 - 0.5);
        }
    }
    out
}

fn bilinear(img: &[f32], w: usize, h: usize, x: f64, y: f64) -> f32 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
    let top = img[y0 * w + x0] * (1.0 - fx) + img[y0 * w + x1] * fx;
    let bottom = img[y1 * w + x0] * (1.0 - fx) + img[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_sample, sample_rng, DatasetConfig};

    #[test]
    fn zero_strength_is_identity() {
        let cfg = DatasetConfig::default();
        let s = generate_sample(7, &cfg).unwrap();
        let mut rng = sample_rng(1, 2);
        assert_eq!(augment(&s, &mut rng, &AugmentConfig::none()), s);
    }

    #[test]
    fn shift_moves_every_landmark() {
        let cfg = DatasetConfig::default();
        let s = generate_sample(11, &cfg).unwrap();
        let (dx, dy) = (0.031, -0.017);
        let out = augment_with(&s, &AugmentDraw::shift_only(dx, dy));
        for (a, b) in s.landmarks.iter().flatten().zip(out.landmarks.iter().flatten()) {
            assert_eq!(b.x, (a.x + dx).clamp(0.0, 1.0));
            assert_eq!(b.y, (a.y + dy).clamp(0.0, 1.0));
        }
        let e0 = s.shapes[0].ellipse().unwrap();
        let e1 = out.shapes[0].ellipse().unwrap();
        assert_eq!(e1.cx, e0.cx + dx);
        assert_eq!(e1.rx, e0.rx);
        assert_eq!(out.image.len(), s.image.len());
    }

    #[test]
    fn warp_table_matches_field() {
        let w = WarpField { amp: 0.01, weights: [0.4, 0.6, 0.5, 0.5], phases: [0.1, 0.2, 0.3, 0.4] };
        let t = WarpTable::new(&w);
        for k in 0..97 {
            let p = Point::new(k as f64 / 96.0, 0.3 + k as f64 / 200.0);
            assert!(t.displacement(p).distance(w.displacement(p)) < 5e-6);
        }
    }

    #[test]
    fn warp_is_bounded() {
        let w = WarpField { amp: 0.01, weights: [0.4, 0.6, 0.5, 0.5], phases: [0.1, 0.2, 0.3, 0.4] };
        for k in 0..100 {
            let p = Point::new(k as f64 / 100.0, 1.0 - k as f64 / 100.0);
            let d = w.displacement(p);
            assert!(d.x.abs() <= 0.01 + 1e-15 && d.y.abs() <= 0.01 + 1e-15);
        }
    }
}
