//! Shape metrics (MED, MIoU), inaccuracy-driven landmark exclusion with refit,
//! and validation-set threshold selection.

use std::collections::{BTreeSet, HashMap};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    fit_bezier_chain, fit_ellipse, rasterize, region_iou, GeometryError, PixelRegion, Point, RasterGrid, ShapeKind,
    ShapeSpec,
};
use crate::model::{input_batch, ModelError, Regressor};
use crate::synthdata::Sample;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("threshold selection touched test samples: {0:?}")]
    Leakage(Vec<u64>),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Mean Euclidean distance between paired landmarks, in pixels of a grid
/// `grid_width` pixels wide.
pub fn med(gt: &[Point], es: &[Point], grid_width: usize) -> Result<f64> {
    if gt.len() != es.len() || gt.is_empty() {
        return Err(EvalError::InvalidArgument(format!(
            "landmark counts differ or are empty ({} vs {})",
            gt.len(),
            es.len()
        )));
    }
    let sum: f64 = gt.iter().zip(es).map(|(a, b)| a.distance(*b)).sum();
    Ok(sum / gt.len() as f64 * grid_width as f64)
}

/// Fits the parametric shape of `kind` to landmarks. Eyelids use a chain of
/// `segments` cubic segments.
pub fn fit_shape(kind: ShapeKind, points: &[Point], segments: usize) -> std::result::Result<ShapeSpec, GeometryError> {
    match kind {
        ShapeKind::Pupil => Ok(ShapeSpec::Pupil(fit_ellipse(points)?.ellipse)),
        ShapeKind::Iris => Ok(ShapeSpec::Iris(fit_ellipse(points)?.ellipse)),
        ShapeKind::Eyelid => Ok(ShapeSpec::Eyelid(fit_bezier_chain(points, segments)?.chain)),
    }
}

fn segments_of(shape: &ShapeSpec) -> usize {
    shape.chain().map_or(1, |c| c.segments())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MiouOutcome {
    pub iou: f64,
    pub fit_failed: bool,
}

/// IoU between the shape fitted to `predicted` and `gt`. A failed fit scores 0.
pub fn shape_miou(predicted: &[Point], gt: &ShapeSpec, grid: RasterGrid) -> MiouOutcome {
    let gt_region = rasterize(gt, grid);
    match fit_shape(gt.kind(), predicted, segments_of(gt)) {
        Ok(shape) => MiouOutcome { iou: iou_or_zero(&rasterize(&shape, grid), &gt_region), fit_failed: false },
        Err(_) => MiouOutcome { iou: 0.0, fit_failed: true },
    }
}

fn iou_or_zero(a: &PixelRegion, b: &PixelRegion) -> f64 {
    region_iou(a, b).unwrap_or(0.0)
}

/// Landmarks kept at `threshold`: every landmark whose inaccuracy does not
/// exceed it. If fewer than `min_keep` survive, every landmark whose
/// inaccuracy is at most the `min_keep`-th smallest is kept instead.
pub fn kept_mask(inaccuracies: &[f64], threshold: f64, min_keep: usize) -> Vec<bool> {
    let keep: Vec<bool> = inaccuracies.iter().map(|&v| v <= threshold).collect();
    let min_keep = min_keep.min(inaccuracies.len());
    if keep.iter().filter(|&&k| k).count() >= min_keep {
        return keep;
    }
    if min_keep == 0 {
        return keep;
    }
    let mut sorted = inaccuracies.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let floor = sorted[min_keep - 1];
    inaccuracies.iter().map(|&v| v.total_cmp(&floor).is_le()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Correction {
    pub shape: ShapeSpec,
    pub kept: Vec<bool>,
}

/// Drops landmarks whose inaccuracy exceeds `threshold` (keeping at least the
/// fit minimum of the lowest-inaccuracy ones) and refits the shape.
pub fn correct_and_refit(
    landmarks: &[Point],
    inaccuracies: &[f64],
    threshold: f64,
    kind: ShapeKind,
    segments: usize,
) -> Result<Correction> {
    if landmarks.len() != inaccuracies.len() {
        return Err(EvalError::InvalidArgument("one inaccuracy per landmark expected".into()));
    }
    let kept = kept_mask(inaccuracies, threshold, kind.min_landmarks());
    let pts: Vec<Point> = landmarks.iter().zip(&kept).filter(|(_, &k)| k).map(|(p, _)| *p).collect();
    let shape = fit_shape(kind, &pts, segments)?;
    Ok(Correction { shape, kept })
}

/// Positions for excluded landmarks read off the refit shape. Excluded
/// landmarks take the curve parameter interpolated, by landmark index, between
/// their nearest kept neighbours; kept landmarks are returned unchanged.
pub fn reconstruct_landmarks(shape: &ShapeSpec, landmarks: &[Point], kept: &[bool]) -> Vec<Point> {
    let idx: Vec<usize> = (0..landmarks.len()).filter(|&i| kept[i]).collect();
    if idx.len() == landmarks.len() || idx.is_empty() {
        return landmarks.to_vec();
    }
    let n = landmarks.len();
    match shape {
        ShapeSpec::Pupil(e) | ShapeSpec::Iris(e) => {
            let angle: Vec<f64> = idx.iter().map(|&i| e.angle_of(landmarks[i])).collect();
            (0..n)
                .map(|i| {
                    if kept[i] {
                        return landmarks[i];
                    }
                    // cyclic neighbours
                    let next = idx.partition_point(|&k| k < i);
                    let (a, b) = if next == 0 || next == idx.len() { (idx.len() - 1, 0) } else { (next - 1, next) };
                    let steps = (idx[b] + n - idx[a]) % n;
                    let steps = if steps == 0 { n } else { steps };
                    let offset = (i + n - idx[a]) % n;
                    let span = (angle[b] - angle[a]).rem_euclid(std::f64::consts::TAU);
                    e.point_at(angle[a] + span * offset as f64 / steps as f64)
                })
                .collect()
        }
        ShapeSpec::Eyelid(c) => {
            let u: Vec<f64> = idx.iter().map(|&i| c.project(landmarks[i])).collect();
            let first = idx[0];
            let last = *idx.last().unwrap();
            let mut out: Vec<Point> = (0..n)
                .map(|i| {
                    if kept[i] || i < first || i > last {
                        return landmarks[i];
                    }
                    let next = idx.partition_point(|&k| k < i);
                    let (a, b) = (next - 1, next);
                    let f = (i - idx[a]) as f64 / (idx[b] - idx[a]) as f64;
                    c.eval(u[a] + (u[b] - u[a]) * f)
                })
                .collect();
            // outside the kept range the chain does not extend; continue the
            // spacing of the two outermost kept landmarks along a straight line
            if idx.len() >= 2 {
                let (p0, p1) = (out[idx[0]], out[idx[1]]);
                let step = (p0 - p1) * (1.0 / (idx[1] - idx[0]) as f64);
                for (i, o) in out.iter_mut().enumerate().take(first) {
                    *o = p0 + step * (first - i) as f64;
                }
                let (q0, q1) = (out[last], out[idx[idx.len() - 2]]);
                let step = (q0 - q1) * (1.0 / (last - idx[idx.len() - 2]) as f64);
                for (i, o) in out.iter_mut().enumerate().skip(last + 1) {
                    *o = q0 + step * (i - last) as f64;
                }
            }
            out
        }
    }
}

/// Network estimates for one sample, split per shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub id: u64,
    pub landmarks: Vec<Vec<Point>>,
    pub inaccuracies: Vec<Vec<f64>>,
}

/// Runs the model over `samples` in fixed-size chunks.
pub fn predict(model: &Regressor<f32>, samples: &[Sample]) -> Result<Vec<Prediction>> {
    const CHUNK: usize = 50;
    let layout = &model.config.layout;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(CHUNK) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let x = input_batch::<f32>(&refs);
        let y: Array2<f64> = model.predict(x.view())?.mapv(f64::from);
        for (s, row) in chunk.iter().zip(y.rows()) {
            let groups = layout.extract_groups(&row.to_vec())?;
            out.push(Prediction {
                id: s.id,
                landmarks: groups
                    .iter()
                    .map(|g| g.iter().map(|g| Point::new(g.coords[0], g.coords[1])).collect())
                    .collect(),
                inaccuracies: groups.iter().map(|g| g.iter().map(|g| g.inaccuracy).collect()).collect(),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
struct CaseScore {
    iou: f64,
    med: f64,
    fit_failed: bool,
    excluded: usize,
}

/// One (sample, shape) pair with its ground-truth raster cached.
struct Case<'a> {
    kind: ShapeKind,
    segments: usize,
    gt_region: PixelRegion,
    gt_points: &'a [Point],
    predicted: &'a [Point],
    inaccuracies: &'a [f64],
    grid: RasterGrid,
    cache: HashMap<Vec<bool>, CaseScore>,
}

impl<'a> Case<'a> {
    fn new(p: &'a Prediction, s: &'a Sample, shape: usize, grid: RasterGrid) -> Result<Self> {
        if p.id != s.id {
            return Err(EvalError::InvalidArgument(format!("prediction {} paired with sample {}", p.id, s.id)));
        }
        let gt = &s.shapes[shape];
        if p.landmarks[shape].len() != s.landmarks[shape].len() {
            return Err(EvalError::InvalidArgument(format!("sample {}: landmark count mismatch", s.id)));
        }
        Ok(Case {
            kind: gt.kind(),
            segments: segments_of(gt),
            gt_region: rasterize(gt, grid),
            gt_points: &s.landmarks[shape],
            predicted: &p.landmarks[shape],
            inaccuracies: &p.inaccuracies[shape],
            grid,
            cache: HashMap::new(),
        })
    }

    fn score(&mut self, threshold: f64) -> CaseScore {
        let kept = kept_mask(self.inaccuracies, threshold, self.kind.min_landmarks());
        if let Some(s) = self.cache.get(&kept) {
            return *s;
        }
        let pts: Vec<Point> = self.predicted.iter().zip(&kept).filter(|(_, &k)| k).map(|(p, _)| *p).collect();
        let excluded = kept.iter().filter(|&&k| !k).count();
        let width = self.grid.width;
        let score = match fit_shape(self.kind, &pts, self.segments) {
            Ok(shape) => {
                let fixed = reconstruct_landmarks(&shape, self.predicted, &kept);
                CaseScore {
                    iou: iou_or_zero(&rasterize(&shape, self.grid), &self.gt_region),
                    med: med(self.gt_points, &fixed, width).expect("counts checked"),
                    fit_failed: false,
                    excluded,
                }
            }
            Err(_) => CaseScore {
                iou: 0.0,
                med: med(self.gt_points, self.predicted, width).expect("counts checked"),
                fit_failed: true,
                excluded,
            },
        };
        self.cache.insert(kept, score);
        score
    }
}

/// Averages of one shape kind over a set of samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeScore {
    pub miou: f64,
    pub med: f64,
    pub fit_failures: usize,
    pub excluded_fraction: f64,
}

fn average(cases: &mut [Case<'_>], threshold: f64) -> ShapeScore {
    let (mut iou, mut med, mut failures, mut excluded, mut total) = (0.0, 0.0, 0, 0, 0);
    for c in cases.iter_mut() {
        let s = c.score(threshold);
        iou += s.iou;
        med += s.med;
        failures += s.fit_failed as usize;
        excluded += s.excluded;
        total += c.predicted.len();
    }
    let n = cases.len().max(1) as f64;
    ShapeScore {
        miou: iou / n,
        med: med / n,
        fit_failures: failures,
        excluded_fraction: if total == 0 { 0.0 } else { excluded as f64 / total as f64 },
    }
}

fn build_cases<'a>(
    preds: &'a [Prediction],
    samples: &'a [Sample],
    shape: usize,
    grid: RasterGrid,
) -> Result<Vec<Case<'a>>> {
    if preds.len() != samples.len() {
        return Err(EvalError::InvalidArgument("one prediction per sample expected".into()));
    }
    preds.iter().zip(samples).map(|(p, s)| Case::new(p, s, shape, grid)).collect()
}

/// Uncorrected MIoU and MED per shape, in [`ShapeKind::ALL`] order.
pub fn raw_scores(preds: &[Prediction], samples: &[Sample], grid: RasterGrid) -> Result<Vec<ShapeScore>> {
    (0..ShapeKind::ALL.len())
        .map(|shape| Ok(average(&mut build_cases(preds, samples, shape, grid)?, f64::INFINITY)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    /// Quantiles of the validation inaccuracies used as candidates.
    pub quantiles: Vec<f64>,
    /// Fixed candidates added to the quantiles.
    pub absolute: Vec<f64>,
    /// Also consider excluding nothing.
    pub include_infinity: bool,
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy {
            quantiles: vec![0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99],
            absolute: vec![0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2],
            include_infinity: true,
        }
    }
}

/// Sorted, de-duplicated candidate thresholds for shape index `shape`.
pub fn candidate_thresholds(preds: &[Prediction], shape: usize, policy: &ThresholdPolicy) -> Vec<f64> {
    let mut values: Vec<f64> = preds.iter().flat_map(|p| p.inaccuracies[shape].iter().copied()).collect();
    values.retain(|v| !v.is_nan());
    values.sort_by(|a, b| a.total_cmp(b));
    let mut out: Vec<f64> = Vec::new();
    if !values.is_empty() {
        for &q in &policy.quantiles {
            let rank = ((q * values.len() as f64).ceil() as usize).clamp(1, values.len());
            out.push(values[rank - 1]);
        }
    }
    out.extend(policy.absolute.iter().copied());
    if policy.include_infinity {
        out.push(f64::INFINITY);
    }
    out.sort_by(|a, b| a.total_cmp(b));
    out.dedup();
    out
}

/// Ids of every sample consulted while selecting thresholds.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SelectionAudit {
    pub ids: BTreeSet<u64>,
}

impl SelectionAudit {
    /// Fails when any of `ids` was used during selection.
    pub fn check_disjoint<I: IntoIterator<Item = u64>>(&self, ids: I) -> Result<()> {
        let overlap: Vec<u64> = ids.into_iter().filter(|id| self.ids.contains(id)).collect();
        if overlap.is_empty() {
            Ok(())
        } else {
            Err(EvalError::Leakage(overlap))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Selected threshold per shape in [`ShapeKind::ALL`] order.
    pub per_shape: Vec<f64>,
    /// Validation score at the selected threshold.
    pub scores: Vec<ShapeScore>,
}

impl Thresholds {
    /// Excluding nothing for every shape.
    pub fn none() -> Self {
        Thresholds { per_shape: vec![f64::INFINITY; ShapeKind::ALL.len()], scores: Vec::new() }
    }
}

/// Per shape kind, the candidate with the highest mean MIoU on the given
/// validation predictions; ties go to lower MED, then to the lower threshold.
pub fn select_thresholds(
    preds: &[Prediction],
    validation: &[Sample],
    policy: &ThresholdPolicy,
    grid: RasterGrid,
    audit: &mut SelectionAudit,
) -> Result<Thresholds> {
    if validation.is_empty() {
        return Err(EvalError::InvalidArgument("threshold selection needs validation samples".into()));
    }
    audit.ids.extend(validation.iter().map(|s| s.id));
    audit.ids.extend(preds.iter().map(|p| p.id));
    let mut per_shape = Vec::new();
    let mut scores = Vec::new();
    for shape in 0..ShapeKind::ALL.len() {
        let mut cases = build_cases(preds, validation, shape, grid)?;
        let mut best: Option<(f64, ShapeScore)> = None;
        for t in candidate_thresholds(preds, shape, policy) {
            let s = average(&mut cases, t);
            let better = match &best {
                None => true,
                Some((_, b)) => s.miou > b.miou || (s.miou == b.miou && s.med < b.med),
            };
            if better {
                best = Some((t, s));
            }
        }
        let (t, s) = best.ok_or_else(|| EvalError::InvalidArgument("no threshold candidates".into()))?;
        per_shape.push(t);
        scores.push(s);
    }
    Ok(Thresholds { per_shape, scores })
}

/// Runs the model on `validation` and selects thresholds there.
pub fn select_thresholds_for_model(
    model: &Regressor<f32>,
    validation: &[Sample],
    policy: &ThresholdPolicy,
    grid: RasterGrid,
    audit: &mut SelectionAudit,
) -> Result<Thresholds> {
    let preds = predict(model, validation)?;
    select_thresholds(&preds, validation, policy, grid, audit)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeReport {
    pub kind: ShapeKind,
    pub raw_miou: f64,
    pub raw_med: f64,
    pub corrected_miou: f64,
    pub corrected_med: f64,
    pub threshold: f64,
    pub excluded_fraction: f64,
    pub raw_fit_failures: usize,
    pub corrected_fit_failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub shapes: Vec<ShapeReport>,
}

impl EvalReport {
    pub fn shape(&self, kind: ShapeKind) -> &ShapeReport {
        &self.shapes[kind as usize]
    }
}

/// Raw and corrected scores on `test` with thresholds chosen elsewhere.
pub fn evaluate_predictions(
    preds: &[Prediction],
    test: &[Sample],
    thresholds: &Thresholds,
    grid: RasterGrid,
) -> Result<EvalReport> {
    if thresholds.per_shape.len() != ShapeKind::ALL.len() {
        return Err(EvalError::InvalidArgument("one threshold per shape kind expected".into()));
    }
    let mut shapes = Vec::new();
    for (shape, kind) in ShapeKind::ALL.iter().enumerate() {
        let mut cases = build_cases(preds, test, shape, grid)?;
        let raw = average(&mut cases, f64::INFINITY);
        let threshold = thresholds.per_shape[shape];
        let corrected = average(&mut cases, threshold);
        shapes.push(ShapeReport {
            kind: *kind,
            raw_miou: raw.miou,
            raw_med: raw.med,
            corrected_miou: corrected.miou,
            corrected_med: corrected.med,
            threshold,
            excluded_fraction: corrected.excluded_fraction,
            raw_fit_failures: raw.fit_failures,
            corrected_fit_failures: corrected.fit_failures,
        });
    }
    Ok(EvalReport { samples: test.len(), shapes })
}

pub fn evaluate_model(
    model: &Regressor<f32>,
    test: &[Sample],
    thresholds: &Thresholds,
    grid: RasterGrid,
) -> Result<EvalReport> {
    let preds = predict(model, test)?;
    evaluate_predictions(&preds, test, thresholds, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Ellipse, ShapeSpec};

    #[test]
    fn med_examples() {
        let a = [Point::new(0.1, 0.2), Point::new(0.5, 0.5)];
        assert_eq!(med(&a, &a, 256).unwrap(), 0.0);
        let b: Vec<Point> = a.iter().map(|p| Point::new(p.x + 3.0 / 256.0, p.y + 4.0 / 256.0)).collect();
        assert!((med(&a, &b, 256).unwrap() - 5.0).abs() < 1e-12);
        assert!(med(&a, &b[..1], 256).is_err());
    }

    #[test]
    fn exact_landmarks_score_high() {
        let e = ShapeSpec::Iris(Ellipse::new(0.5, 0.5, 0.2, 0.15, 0.3).unwrap());
        let pts = e.sample_landmarks(16).unwrap();
        let out = shape_miou(&pts, &e, RasterGrid::metric());
        assert!(out.iou >= 0.98 && !out.fit_failed);
        let far = ShapeSpec::Iris(Ellipse::new(0.1, 0.1, 0.05, 0.05, 0.0).unwrap());
        assert_eq!(shape_miou(&far.sample_landmarks(16).unwrap(), &e, RasterGrid::metric()).iou, 0.0);
        let few = shape_miou(&pts[..4], &e, RasterGrid::metric());
        assert!(few.fit_failed && few.iou == 0.0);
    }

    #[test]
    fn kept_mask_floor() {
        let inacc = [0.5, 0.1, 0.4, 0.2, 0.3, 0.6];
        assert_eq!(kept_mask(&inacc, 0.0, 4), vec![false, true, true, true, true, false]);
        assert_eq!(kept_mask(&inacc, 0.45, 4), vec![false, true, true, true, true, false]);
        assert_eq!(kept_mask(&inacc, 0.55, 4), vec![true, true, true, true, true, false]);
        assert_eq!(kept_mask(&[0.3; 6], 0.0, 5), vec![true; 6]);
    }

    #[test]
    fn correction_drops_corrupted_points() {
        let e = Ellipse::new(0.45, 0.55, 0.12, 0.09, 0.2).unwrap();
        let mut pts = ShapeSpec::Pupil(e).sample_landmarks(12).unwrap();
        pts[3] = pts[3] + Point::new(0.08, -0.05);
        pts[8] = pts[8] + Point::new(-0.06, 0.07);
        let err: Vec<f64> = (0..12).map(|i| if i == 3 || i == 8 { 0.09 } else { 0.0 }).collect();
        let c = correct_and_refit(&pts, &err, 0.01, ShapeKind::Pupil, 1).unwrap();
        assert_eq!(c.kept.iter().filter(|k| !**k).count(), 2);
        assert!(c.shape.ellipse().unwrap().parameter_distance(&e) < 1e-9);
        let fixed = reconstruct_landmarks(&c.shape, &pts, &c.kept);
        let truth = ShapeSpec::Pupil(e).sample_landmarks(12).unwrap();
        assert!(fixed[3].distance(truth[3]) < 1e-9 && fixed[8].distance(truth[8]) < 1e-9);
    }

    #[test]
    fn candidates_are_sorted_and_end_with_infinity() {
        let p = Prediction {
            id: 0,
            landmarks: vec![vec![Point::default(); 3]; 3],
            inaccuracies: vec![vec![0.3, 0.1, 0.2]; 3],
        };
        let c = candidate_thresholds(&[p], 0, &ThresholdPolicy::default());
        assert!(c.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(*c.last().unwrap(), f64::INFINITY);
        assert!(c.contains(&0.3) && c.contains(&0.2));
    }
}
