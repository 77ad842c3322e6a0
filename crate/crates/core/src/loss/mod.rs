//! Joint landmark and inaccuracy objective.
//!
//! Every landmark group (its coordinates plus one inaccuracy estimate) gets an
//! inaccuracy target computed from its coordinate error. Three target
//! variants are available: the plain absolute error, the absolute error
//! normalized by relative shape area and group size, and the Euclidean error
//! normalized by relative shape area. The inaccuracy estimate regresses the
//! target under a squared loss whose per-group gradient is masked to zero
//! below a margin.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{fit_bezier_chain, fit_ellipse, rasterize_area, Point, RasterGrid, ShapeKind, ShapeSpec};
use crate::model::GroupLayout;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("area normalization needs a positive smallest area, got {0}")]
    DivisionDomain(f64),
    #[error("non-finite loss value in {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossVariant {
    /// `Σ|GT − ES|`
    Original,
    /// `Σ|GT − ES| / ((AREA / min AREA) · GroupSize)`
    NormAbs,
    /// `‖GT − ES‖₂ / (AREA / min AREA)`
    NormEuclid,
}

impl LossVariant {
    pub const ALL: [LossVariant; 3] = [LossVariant::Original, LossVariant::NormAbs, LossVariant::NormEuclid];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Original => "original",
            LossVariant::NormAbs => "norm-abs",
            LossVariant::NormEuclid => "norm-euclid",
        }
    }
}

impl std::fmt::Display for LossVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossVariant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "original" => Ok(LossVariant::Original),
            "norm-abs" | "normabs" => Ok(LossVariant::NormAbs),
            "norm-euclid" | "normeuclid" => Ok(LossVariant::NormEuclid),
            other => Err(format!("unknown loss variant '{other}' (original, norm-abs, norm-euclid)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AreaSource {
    GroundTruth,
    /// Shapes refit from the predicted landmarks.
    Refit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MarginMode {
    /// Pass or zero the raw gradient; the optimizer applies the learning rate.
    MaskOnly,
    /// Multiply passing gradients by the learning rate as well.
    LrScaled,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub variant: LossVariant,
    pub margin: f64,
    /// Weight λ of the inaccuracy term.
    pub inaccuracy_weight: f64,
    /// Treat the inaccuracy target as a constant with respect to the
    /// coordinate estimates.
    pub detach_target: bool,
    pub area_source: AreaSource,
    pub margin_mode: MarginMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            variant: LossVariant::NormEuclid,
            margin: 0.005,
            inaccuracy_weight: 1.0,
            detach_target: true,
            area_source: AreaSource::GroundTruth,
            margin_mode: MarginMode::MaskOnly,
        }
    }
}

impl LossConfig {
    /// λ = 0 is accepted and switches the inaccuracy term off.
    pub fn validate(&self) -> Result<()> {
        if self.margin.is_nan() || self.margin < 0.0 {
            return Err(LossError::InvalidArgument("margin must be non-negative".into()));
        }
        if !self.inaccuracy_weight.is_finite() || self.inaccuracy_weight < 0.0 {
            return Err(LossError::InvalidArgument("inaccuracy weight must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// One landmark group's inputs to the inaccuracy target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupLossInput<'a> {
    pub gt: &'a [f64],
    pub es: &'a [f64],
    pub es_inaccuracy: f64,
    /// Pixel count of the landmark's shape.
    pub area: f64,
    /// Pixel count of the smallest shape in the same sample.
    pub min_area: f64,
}

impl GroupLossInput<'_> {
    fn check(&self) -> Result<()> {
        if self.gt.is_empty() || self.gt.len() != self.es.len() {
            return Err(LossError::InvalidArgument("group coordinates must be non-empty and paired".into()));
        }
        if !(self.min_area > 0.0) {
            return Err(LossError::DivisionDomain(self.min_area));
        }
        if !(self.area >= self.min_area) {
            return Err(LossError::InvalidArgument(format!(
                "area {} is below the smallest area {}",
                self.area, self.min_area
            )));
        }
        Ok(())
    }

    fn area_ratio(&self) -> f64 {
        self.area / self.min_area
    }
}

pub fn inaccuracy_target(variant: LossVariant, input: &GroupLossInput<'_>) -> Result<f64> {
    input.check()?;
    let abs: f64 = input.gt.iter().zip(input.es).map(|(g, e)| (g - e).abs()).sum();
    Ok(match variant {
        LossVariant::Original => abs,
        LossVariant::NormAbs => abs / (input.area_ratio() * input.gt.len() as f64),
        LossVariant::NormEuclid => {
            let sq: f64 = input.gt.iter().zip(input.es).map(|(g, e)| (g - e) * (g - e)).sum();
            sq.sqrt() / input.area_ratio()
        }
    })
}

/// Derivative of the target with respect to each coordinate estimate. Kinks
/// (zero error) get the zero subgradient.
pub fn inaccuracy_target_gradient(variant: LossVariant, input: &GroupLossInput<'_>) -> Result<Vec<f64>> {
    input.check()?;
    let sign = |d: f64| {
        if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    let diffs = input.es.iter().zip(input.gt).map(|(e, g)| e - g);
    Ok(match variant {
        LossVariant::Original => diffs.map(sign).collect(),
        LossVariant::NormAbs => {
            let scale = input.area_ratio() * input.gt.len() as f64;
            diffs.map(|d| sign(d) / scale).collect()
        }
        LossVariant::NormEuclid => {
            let d: Vec<f64> = diffs.collect();
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                vec![0.0; d.len()]
            } else {
                let scale = norm * input.area_ratio();
                d.iter().map(|v| v / scale).collect()
            }
        }
    })
}

/// `(target − estimate)²` and its derivative with respect to the estimate.
pub fn inaccuracy_loss(target: f64, es_inaccuracy: f64) -> (f64, f64) {
    let r = target - es_inaccuracy;
    (r * r, 2.0 * (es_inaccuracy - target))
}

/// Mean squared coordinate error and its gradient with respect to `es`.
pub fn landmark_loss(gt: &[f64], es: &[f64]) -> Result<(f64, Vec<f64>)> {
    if gt.len() != es.len() || gt.is_empty() {
        return Err(LossError::InvalidArgument(format!(
            "landmark lengths differ or are empty ({} vs {})",
            gt.len(),
            es.len()
        )));
    }
    let n = gt.len() as f64;
    let loss = gt.iter().zip(es).map(|(g, e)| (g - e) * (g - e)).sum::<f64>() / n;
    let grad = gt.iter().zip(es).map(|(g, e)| 2.0 * (e - g) / n).collect();
    Ok((loss, grad))
}

/// Keeps a gradient whose magnitude reaches the margin and zeroes it
/// otherwise. In [`MarginMode::LrScaled`] a kept gradient is also scaled
/// by the learning rate.
pub fn apply_margin_mask(grad: f64, margin: f64, mode: MarginMode, learning_rate: f64) -> f64 {
    if grad.abs() >= margin {
        match mode {
            MarginMode::MaskOnly => grad,
            MarginMode::LrScaled => grad * learning_rate,
        }
    } else {
        0.0
    }
}

/// Result of [`batch_loss`]. `output_grad` is laid out like the network
/// output and already contains the masked inaccuracy gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub landmark_loss: f64,
    pub inaccuracy_loss: f64,
    pub total: f64,
    /// Inaccuracy target of every group, per sample in layout order.
    pub targets: Vec<Vec<f64>>,
    pub output_grad: Array2<f64>,
    /// Fraction of groups whose inaccuracy gradient was masked to zero.
    pub masked_fraction: f64,
}

/// Per-sample shape areas in layout shape order.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeAreas(pub Vec<f64>);

impl ShapeAreas {
    pub fn min(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Pixel counts of the given shapes on `grid`.
pub fn shape_areas(shapes: &[ShapeSpec], grid: RasterGrid) -> ShapeAreas {
    ShapeAreas(shapes.iter().map(|s| rasterize_area(s, grid) as f64).collect())
}

/// Areas of shapes refit from predicted landmarks. Shapes that cannot be fit
/// or rasterize empty fall back to the corresponding `fallback` area.
pub fn refit_areas(layout: &GroupLayout, outputs: &[f64], fallback: &ShapeAreas, grid: RasterGrid) -> ShapeAreas {
    let groups = match layout.extract_groups(outputs) {
        Ok(g) => g,
        Err(_) => return fallback.clone(),
    };
    let areas = layout
        .shapes
        .iter()
        .zip(&groups)
        .zip(&fallback.0)
        .map(|((&(kind, _), gs), &fb)| {
            let pts: Vec<Point> = gs.iter().map(|g| Point::new(g.coords[0], g.coords[1])).collect();
            let shape = match kind {
                ShapeKind::Pupil => fit_ellipse(&pts).map(|f| ShapeSpec::Pupil(f.ellipse)),
                ShapeKind::Iris => fit_ellipse(&pts).map(|f| ShapeSpec::Iris(f.ellipse)),
                ShapeKind::Eyelid => fit_bezier_chain(&pts, 1).map(|f| ShapeSpec::Eyelid(f.chain)),
            };
            match shape.map(|s| rasterize_area(&s, grid)) {
                Ok(a) if a > 0 => a as f64,
                _ => fb,
            }
        })
        .collect();
    ShapeAreas(areas)
}

/// Landmark loss averaged over every coordinate in the batch plus λ times the
/// inaccuracy loss averaged over every group in the batch.
///
/// `gt` holds each sample's ground-truth coordinates in layout order and
/// `areas` each sample's shape areas in layout shape order. `learning_rate` is
/// only used by [`MarginMode::LrScaled`].
pub fn batch_loss(
    outputs: ArrayView2<'_, f64>,
    gt: &[Vec<f64>],
    areas: &[ShapeAreas],
    layout: &GroupLayout,
    cfg: &LossConfig,
    learning_rate: f64,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let batch = outputs.nrows();
    if batch == 0 || gt.len() != batch || areas.len() != batch {
        return Err(LossError::InvalidArgument("batch sizes of outputs, targets and areas differ".into()));
    }
    if outputs.ncols() != layout.total_outputs() {
        return Err(LossError::InvalidArgument("outputs do not match the group layout".into()));
    }
    let gs = layout.group_size;
    let stride = layout.stride();
    let n_groups = layout.group_count();
    let n_coords = (batch * n_groups * gs) as f64;
    let n_total_groups = (batch * n_groups) as f64;
    let lambda = cfg.inaccuracy_weight;

    let mut grad = Array2::zeros(outputs.dim());
    let mut landmark_sum = 0.0;
    let mut inacc_sum = 0.0;
    let mut masked = 0usize;
    let mut targets = Vec::with_capacity(batch);

    for b in 0..batch {
        let row = outputs.row(b);
        let row = row.as_slice().map(|s| s.to_vec()).unwrap_or_else(|| row.to_vec());
        let coords = &gt[b];
        if coords.len() != n_groups * gs {
            return Err(LossError::InvalidArgument(format!("sample {b}: ground truth length mismatch")));
        }
        if areas[b].0.len() != layout.shapes.len() {
            return Err(LossError::InvalidArgument(format!("sample {b}: one area per shape expected")));
        }
        let min_area = areas[b].min();
        let mut sample_targets = Vec::with_capacity(n_groups);
        let mut group = 0;
        for (shape, &(_, count)) in layout.shapes.iter().enumerate() {
            let area = areas[b].0[shape];
            for _ in 0..count {
                let base = group * stride;
                let es = &row[base..base + gs];
                let gt_g = &coords[group * gs..(group + 1) * gs];
                let es_inacc = row[base + gs];
                for d in 0..gs {
                    let diff = es[d] - gt_g[d];
                    landmark_sum += diff * diff;
                    grad[[b, base + d]] = 2.0 * diff / n_coords;
                }
                let input = GroupLossInput { gt: gt_g, es, es_inaccuracy: es_inacc, area, min_area };
                let target = inaccuracy_target(cfg.variant, &input)?;
                let (loss, dl) = inaccuracy_loss(target, es_inacc);
                inacc_sum += loss;
                let kept = apply_margin_mask(dl, cfg.margin, cfg.margin_mode, learning_rate);
                if kept == 0.0 && dl != 0.0 {
                    masked += 1;
                }
                let scale = lambda / n_total_groups;
                grad[[b, base + gs]] = scale * kept;
                if !cfg.detach_target && kept != 0.0 {
                    // d/dES_i (t - ES_inacc)^2 = -(dL/dES_inacc) * dt/dES_i
                    let dt = inaccuracy_target_gradient(cfg.variant, &input)?;
                    for d in 0..gs {
                        grad[[b, base + d]] -= scale * kept * dt[d];
                    }
                }
                sample_targets.push(target);
                group += 1;
            }
        }
        targets.push(sample_targets);
    }

    let landmark_loss = landmark_sum / n_coords;
    let inaccuracy_loss = inacc_sum / n_total_groups;
    let total = landmark_loss + lambda * inaccuracy_loss;
    if !total.is_finite() {
        return Err(LossError::NonFinite("batch loss"));
    }
    if grad.iter().any(|v: &f64| !v.is_finite()) {
        return Err(LossError::NonFinite("output gradient"));
    }
    Ok(LossBreakdown {
        landmark_loss,
        inaccuracy_loss,
        total,
        targets,
        output_grad: grad,
        masked_fraction: masked as f64 / n_total_groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn input<'a>(gt: &'a [f64], es: &'a [f64], area: f64, min_area: f64) -> GroupLossInput<'a> {
        GroupLossInput { gt, es, es_inaccuracy: 0.0, area, min_area }
    }

    #[test]
    fn worked_target_example() {
        let inp = input(&[0.5, 0.5], &[0.6, 0.4], 2.0, 1.0);
        assert_relative_eq!(inaccuracy_target(LossVariant::Original, &inp).unwrap(), 0.2, max_relative = 1e-12);
        assert_relative_eq!(inaccuracy_target(LossVariant::NormAbs, &inp).unwrap(), 0.05, max_relative = 1e-12);
        assert_relative_eq!(
            inaccuracy_target(LossVariant::NormEuclid, &inp).unwrap(),
            0.02f64.sqrt() / 2.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn zero_error_gives_zero_target() {
        for v in LossVariant::ALL {
            assert_eq!(inaccuracy_target(v, &input(&[0.3, 0.7], &[0.3, 0.7], 5.0, 2.0)).unwrap(), 0.0);
        }
    }

    #[test]
    fn zero_min_area_is_a_domain_error() {
        let r = inaccuracy_target(LossVariant::NormAbs, &input(&[0.0], &[1.0], 3.0, 0.0));
        assert!(matches!(r, Err(LossError::DivisionDomain(_))));
    }

    #[test]
    fn doubling_area_halves_normalized_targets() {
        let (gt, es) = ([0.1, 0.2], [0.15, 0.1]);
        for v in LossVariant::ALL {
            let a = inaccuracy_target(v, &input(&gt, &es, 3.0, 1.5)).unwrap();
            let b = inaccuracy_target(v, &input(&gt, &es, 6.0, 1.5)).unwrap();
            match v {
                LossVariant::Original => assert_eq!(a, b),
                _ => assert_relative_eq!(a, 2.0 * b, max_relative = 1e-15),
            }
        }
    }

    #[test]
    fn inaccuracy_loss_examples() {
        assert_eq!(inaccuracy_loss(0.05, 0.05), (0.0, 0.0));
        let (l, g) = inaccuracy_loss(0.05, 0.0);
        assert_relative_eq!(l, 0.0025, max_relative = 1e-12);
        assert_relative_eq!(g, -0.1, max_relative = 1e-12);
        assert!(inaccuracy_loss(0.05, 0.2).1 > 0.0);
    }

    #[test]
    fn landmark_loss_example() {
        let (l, g) = landmark_loss(&[0.0, 0.0], &[0.1, 0.0]).unwrap();
        assert_relative_eq!(l, 0.005, max_relative = 1e-12);
        assert_relative_eq!(g[0], 0.1, max_relative = 1e-12);
        assert!(landmark_loss(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn margin_examples() {
        let m = MarginMode::MaskOnly;
        assert_eq!(apply_margin_mask(0.004, 0.005, m, 1e-4), 0.0);
        assert_eq!(apply_margin_mask(0.006, 0.005, m, 1e-4), 0.006);
        assert_eq!(apply_margin_mask(-0.005, 0.005, m, 1e-4), -0.005);
        assert_eq!(apply_margin_mask(0.006, 0.005, MarginMode::LrScaled, 1e-4), 0.006 * 1e-4);
        assert_eq!(apply_margin_mask(1e300, f64::INFINITY, m, 1.0), 0.0);
    }

    #[test]
    fn perfect_prediction_has_zero_loss_and_gradient() {
        let layout = GroupLayout::new(2, vec![(ShapeKind::Pupil, 2)]).unwrap();
        let out = ndarray::array![[0.1, 0.2, 0.0, 0.3, 0.4, 0.0]];
        let gt = vec![vec![0.1, 0.2, 0.3, 0.4]];
        let areas = vec![ShapeAreas(vec![10.0])];
        for v in LossVariant::ALL {
            let cfg = LossConfig { variant: v, ..LossConfig::default() };
            let r = batch_loss(out.view(), &gt, &areas, &layout, &cfg, 1e-4).unwrap();
            assert_eq!(r.total, 0.0);
            assert!(r.output_grad.iter().all(|&g| g == 0.0));
        }
    }
}
