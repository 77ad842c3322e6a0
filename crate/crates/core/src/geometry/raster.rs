use serde::{Deserialize, Serialize};

use super::{BezierChain, Ellipse, GeometryError, Point, Result, ShapeSpec, ARC_SUBDIVISIONS};

/// Pixel domain over which shape areas are counted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RasterGrid {
    pub width: usize,
    pub height: usize,
}

impl RasterGrid {
    pub fn new(width: usize, height: usize) -> Result<RasterGrid> {
        if width < 8 || height < 8 {
            return Err(GeometryError::InvalidArgument(format!(
                "raster grid must be at least 8x8, got {width}x{height}"
            )));
        }
        Ok(RasterGrid { width, height })
    }

    /// 256×256, the grid used for every metric.
    pub fn metric() -> RasterGrid {
        RasterGrid { width: 256, height: 256 }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn center_x(&self, i: usize) -> f64 {
        (i as f64 + 0.5) / self.width as f64
    }

    #[inline]
    pub fn center_y(&self, j: usize) -> f64 {
        (j as f64 + 0.5) / self.height as f64
    }

    fn row_range(&self, ymin: f64, ymax: f64) -> std::ops::Range<usize> {
        let h = self.height as f64;
        let lo = ((ymin * h - 1.5).floor().max(0.0) as usize).min(self.height);
        let hi = ((ymax * h + 1.5).ceil().max(0.0) as usize).min(self.height);
        lo..hi
    }
}

/// Set of pixels stored as horizontal runs `[start, end)` per row, sorted by
/// row and then by start.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelRegion {
    grid: RasterGrid,
    runs: Vec<(u32, u32, u32)>,
}

impl PixelRegion {
    pub fn grid(&self) -> RasterGrid {
        self.grid
    }

    pub fn area(&self) -> usize {
        self.runs.iter().map(|&(_, s, e)| (e - s) as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        let (i, j) = (i as u32, j as u32);
        self.runs.iter().any(|&(r, s, e)| r == j && s <= i && i < e)
    }

    /// Row-major boolean mask.
    pub fn to_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.grid.pixel_count()];
        for &(r, s, e) in &self.runs {
            let base = r as usize * self.grid.width;
            mask[base + s as usize..base + e as usize].fill(true);
        }
        mask
    }

    pub fn intersection_area(&self, other: &PixelRegion) -> usize {
        let (a, b) = (&self.runs, &other.runs);
        let (mut i, mut k) = (0, 0);
        let mut total = 0usize;
        while i < a.len() && k < b.len() {
            let (ra, sa, ea) = a[i];
            let (rb, sb, eb) = b[k];
            if ra != rb {
                if ra < rb {
                    i += 1;
                } else {
                    k += 1;
                }
                continue;
            }
            let lo = sa.max(sb);
            let hi = ea.min(eb);
            if hi > lo {
                total += (hi - lo) as usize;
            }
            if ea <= eb {
                i += 1;
            } else {
                k += 1;
            }
        }
        total
    }
}

/// Pixels whose centers fall inside the shape's closed region. Eyelid chains
/// are closed by the straight chord between their endpoints.
pub fn rasterize(shape: &ShapeSpec, grid: RasterGrid) -> PixelRegion {
    match shape {
        ShapeSpec::Pupil(e) | ShapeSpec::Iris(e) => rasterize_ellipse(e, grid),
        ShapeSpec::Eyelid(c) => rasterize_chain(c, grid),
    }
}

pub fn rasterize_area(shape: &ShapeSpec, grid: RasterGrid) -> usize {
    rasterize(shape, grid).area()
}

/// Pixel-set intersection over union. Two empty shapes have no defined IoU.
pub fn iou(a: &ShapeSpec, b: &ShapeSpec, grid: RasterGrid) -> Result<f64> {
    let ra = rasterize(a, grid);
    let rb = rasterize(b, grid);
    region_iou(&ra, &rb)
}

/// [`iou`] on already rasterized regions.
pub fn region_iou(ra: &PixelRegion, rb: &PixelRegion) -> Result<f64> {
    let inter = ra.intersection_area(rb);
    let union = ra.area() + rb.area() - inter;
    if union == 0 {
        return Err(GeometryError::UndefinedIou);
    }
    Ok(inter as f64 / union as f64)
}

fn push_run<F: Fn(usize) -> bool>(
    runs: &mut Vec<(u32, u32, u32)>,
    grid: RasterGrid,
    row: usize,
    mut lo: i64,
    mut hi: i64,
    inside: F,
) {
    let w = grid.width as i64;
    lo = lo.clamp(0, w - 1);
    hi = hi.clamp(0, w - 1);
    // settle the rounding of the analytic bounds against the exact predicate
    while lo > 0 && inside(lo as usize - 1) {
        lo -= 1;
    }
    while lo <= hi && !inside(lo as usize) {
        lo += 1;
    }
    while hi < w - 1 && inside(hi as usize + 1) {
        hi += 1;
    }
    while hi >= lo && !inside(hi as usize) {
        hi -= 1;
    }
    if hi >= lo {
        runs.push((row as u32, lo as u32, hi as u32 + 1));
    }
}

fn rasterize_ellipse(e: &Ellipse, grid: RasterGrid) -> PixelRegion {
    let (_, _, ymin, ymax) = e.bounds();
    let mut runs = Vec::new();
    let w = grid.width as f64;
    for j in grid.row_range(ymin, ymax) {
        let y = grid.center_y(j);
        let Some((x0, x1)) = e.row_interval(y) else { continue };
        let lo = (x0 * w - 0.5).ceil();
        let hi = (x1 * w - 0.5).floor();
        if hi < -1.0 || lo > w {
            continue;
        }
        let inside = |i: usize| e.contains(Point::new(grid.center_x(i), y));
        push_run(&mut runs, grid, j, lo as i64, hi as i64, inside);
    }
    PixelRegion { grid, runs }
}

/// Crossing abscissa of edge `a → b` with the horizontal line at `y`, if the
/// edge straddles it (half-open rule, horizontal edges never cross).
#[inline]
pub(crate) fn edge_crossing(a: Point, b: Point, y: f64) -> Option<f64> {
    if (a.y > y) != (b.y > y) {
        Some(a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y))
    } else {
        None
    }
}

/// Closed polygon used to rasterize a chain: the subdivided curve, closed by
/// the chord from its end back to its start.
pub(crate) fn chain_polygon(c: &BezierChain) -> Vec<Point> {
    c.polyline(ARC_SUBDIVISIONS)
}

fn rasterize_chain(c: &BezierChain, grid: RasterGrid) -> PixelRegion {
    let poly = chain_polygon(c);
    let n = poly.len();
    let ymin = poly.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let ymax = poly.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
    let w = grid.width as f64;
    let mut runs = Vec::new();
    let mut xs = Vec::new();
    for j in grid.row_range(ymin, ymax) {
        let y = grid.center_y(j);
        xs.clear();
        for k in 0..n {
            if let Some(x) = edge_crossing(poly[k], poly[(k + 1) % n], y) {
                xs.push(x);
            }
        }
        if xs.len() < 2 {
            continue;
        }
        xs.sort_by(|a, b| a.total_cmp(b));
        // even-odd rule: inside on [x_{2k}, x_{2k+1})
        for pair in xs.chunks_exact(2) {
            let (c0, c1) = (pair[0], pair[1]);
            if c1 <= c0 {
                continue;
            }
            let lo = (c0 * w - 0.5).ceil();
            let hi = (c1 * w - 0.5).floor();
            if hi < -1.0 || lo > w {
                continue;
            }
            let inside = |i: usize| {
                let xc = grid.center_x(i);
                xc >= c0 && xc < c1
            };
            push_run(&mut runs, grid, j, lo as i64, hi as i64, inside);
        }
    }
    runs.sort_unstable();
    PixelRegion { grid, runs }
}
