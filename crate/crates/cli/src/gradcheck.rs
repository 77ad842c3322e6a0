//! Central finite-difference check of the hand-written gradients.

use anyhow::Result;
use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use landval::geometry::RasterGrid;
use landval::loss::{batch_loss, inaccuracy_loss, landmark_loss, LossConfig, LossVariant, MarginMode, ShapeAreas};
use landval::model::{GroupLayout, InaccuracyActivation, ModelConfig, Regressor};
use landval::synthdata::LandmarkCounts;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub seed: u64,
    /// Parameters probed per model configuration.
    pub params_per_model: usize,
    pub eps_model: f64,
    pub eps_loss: f64,
    pub tolerance: f64,
    /// Multiplies every analytic gradient before comparison. Anything but 1
    /// should make the check fail.
    pub corrupt_scale: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            seed: 7,
            params_per_model: 100,
            eps_model: 1e-4,
            eps_loss: 1e-5,
            tolerance: 1e-5,
            corrupt_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentResult {
    pub name: String,
    pub checked: usize,
    pub max_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub components: Vec<ComponentResult>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(|c| c.passed)
    }

    pub fn max_error(&self) -> f64 {
        self.components.iter().map(|c| c.max_error).fold(0.0, f64::max)
    }
}

/// `|a − n| / max(|a|, |n|, 1e-2)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}

fn small_layout() -> GroupLayout {
    GroupLayout::for_counts(&LandmarkCounts { pupil: 5, iris: 6, eyelid: 4 })
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(lo..hi))
}

struct Tally {
    name: String,
    checked: usize,
    max_error: f64,
}

impl Tally {
    fn new(name: String) -> Self {
        Tally { name, checked: 0, max_error: 0.0 }
    }

    fn add(&mut self, analytic: f64, numeric: f64) {
        self.checked += 1;
        let e = relative_error(analytic, numeric);
        // NaN must fail the check
        if !(e <= self.max_error) {
            self.max_error = if e.is_nan() { f64::INFINITY } else { e };
        }
    }

    fn finish(self, tolerance: f64) -> ComponentResult {
        ComponentResult {
            passed: self.max_error <= tolerance,
            name: self.name,
            checked: self.checked,
            max_error: self.max_error,
        }
    }
}

/// Probes `objective` along parameter `indices` of a model.
fn probe_params(
    model: &Regressor<f64>,
    indices: &[usize],
    eps: f64,
    analytic: &[f64],
    scale: f64,
    tally: &mut Tally,
    objective: &dyn Fn(&Regressor<f64>) -> Result<f64>,
) -> Result<()> {
    let base = model.params_flat();
    let mut probe = model.clone();
    for &i in indices {
        let mut p = base.clone();
        p[i] = base[i] + eps;
        probe.set_params_flat(&p)?;
        let plus = objective(&probe)?;
        p[i] = base[i] - eps;
        probe.set_params_flat(&p)?;
        let minus = objective(&probe)?;
        tally.add(scale * analytic[i], (plus - minus) / (2.0 * eps));
    }
    Ok(())
}

fn check_model(opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Result<Vec<ComponentResult>> {
    let grid = RasterGrid::new(8, 8)?;
    let mut out = Vec::new();
    for hidden in [vec![], vec![12], vec![10, 7]] {
        for act in [InaccuracyActivation::Softplus, InaccuracyActivation::Identity] {
            let config =
                ModelConfig { input: grid, hidden: hidden.clone(), layout: small_layout(), inaccuracy_activation: act };
            let mut model = Regressor::<f64>::init(config, rng.random())?;
            // Move away from the structured initialization.
            let jitter: Vec<f64> = model.params_flat().iter().map(|v| v + rng.random_range(-0.2..0.2)).collect();
            model.set_params_flat(&jitter)?;
            let x = random_matrix(rng, 3, grid.pixel_count(), -0.5, 0.5);
            let weights = random_matrix(rng, 3, model.config.output_dim(), -1.0, 1.0);
            let (_, mut trace) = model.forward(x.view())?;
            let grads = model.backward(&mut trace, weights.view())?.flat();
            let n = model.param_count();
            let indices = sample(rng, n, opts.params_per_model.min(n)).into_vec();
            let mut tally = Tally::new(format!("model hidden={hidden:?} activation={act:?}"));
            let objective = |m: &Regressor<f64>| -> Result<f64> { Ok((m.predict(x.view())? * &weights).sum()) };
            probe_params(&model, &indices, opts.eps_model, &grads, opts.corrupt_scale, &mut tally, &objective)?;
            out.push(tally.finish(opts.tolerance));
        }
    }
    Ok(out)
}

struct LossCase {
    outputs: Array2<f64>,
    gt: Vec<Vec<f64>>,
    areas: Vec<ShapeAreas>,
    layout: GroupLayout,
}

fn loss_case(rng: &mut ChaCha8Rng, batch: usize) -> LossCase {
    let layout = small_layout();
    let outputs = random_matrix(rng, batch, layout.total_outputs(), 0.05, 0.95);
    let coords = layout.group_count() * layout.group_size;
    let gt = (0..batch).map(|_| (0..coords).map(|_| rng.random_range(0.05..0.95)).collect()).collect();
    let areas = (0..batch)
        .map(|_| ShapeAreas(layout.shapes.iter().map(|_| rng.random_range(50.0..5000.0)).collect()))
        .collect();
    LossCase { outputs, gt, areas, layout }
}

/// Objective with the inaccuracy targets frozen at `targets`.
fn frozen_objective(case: &LossCase, outputs: &Array2<f64>, targets: &[Vec<f64>], lambda: f64) -> Result<f64> {
    let gs = case.layout.group_size;
    let stride = case.layout.stride();
    let groups = case.layout.group_count();
    let mut es = Vec::new();
    let mut gt = Vec::new();
    let mut inacc = 0.0;
    for (b, row) in outputs.rows().into_iter().enumerate() {
        for g in 0..groups {
            es.extend(row.iter().skip(g * stride).take(gs));
            inacc += inaccuracy_loss(targets[b][g], row[g * stride + gs]).0;
        }
        gt.extend(&case.gt[b]);
    }
    let (lm, _) = landmark_loss(&gt, &es)?;
    Ok(lm + lambda * inacc / (outputs.nrows() * groups) as f64)
}

fn check_loss(opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Result<Vec<ComponentResult>> {
    let mut out = Vec::new();
    for variant in LossVariant::ALL {
        for detach in [true, false] {
            for lambda in [1.0, 0.3] {
                let case = loss_case(rng, 2);
                let cfg = LossConfig {
                    variant,
                    margin: 0.0,
                    inaccuracy_weight: lambda,
                    detach_target: detach,
                    margin_mode: MarginMode::MaskOnly,
                    ..LossConfig::default()
                };
                let base = batch_loss(case.outputs.view(), &case.gt, &case.areas, &case.layout, &cfg, 1.0)?;
                let objective = |o: &Array2<f64>| -> Result<f64> {
                    if detach {
                        frozen_objective(&case, o, &base.targets, lambda)
                    } else {
                        Ok(batch_loss(o.view(), &case.gt, &case.areas, &case.layout, &cfg, 1.0)?.total)
                    }
                };
                let mut tally = Tally::new(format!("loss {variant} detach={detach} lambda={lambda}"));
                let eps = opts.eps_loss;
                for ((b, j), &a) in base.output_grad.indexed_iter() {
                    let mut o = case.outputs.clone();
                    o[[b, j]] += eps;
                    let plus = objective(&o)?;
                    o[[b, j]] -= 2.0 * eps;
                    let minus = objective(&o)?;
                    tally.add(opts.corrupt_scale * a, (plus - minus) / (2.0 * eps));
                }
                out.push(tally.finish(opts.tolerance));
            }
        }
    }
    Ok(out)
}

/// Loss through the network, target not detached.
fn check_composite(opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Result<Vec<ComponentResult>> {
    let grid = RasterGrid::new(8, 8)?;
    let mut out = Vec::new();
    for variant in LossVariant::ALL {
        let config = ModelConfig {
            input: grid,
            hidden: vec![9],
            layout: small_layout(),
            inaccuracy_activation: InaccuracyActivation::Softplus,
        };
        let mut model = Regressor::<f64>::init(config, rng.random())?;
        let jitter: Vec<f64> = model.params_flat().iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
        model.set_params_flat(&jitter)?;
        let case = loss_case(rng, 2);
        let x = random_matrix(rng, 2, grid.pixel_count(), -0.5, 0.5);
        let cfg = LossConfig { variant, margin: 0.0, detach_target: false, ..LossConfig::default() };
        let (outputs, mut trace) = model.forward(x.view())?;
        let loss = batch_loss(outputs.view(), &case.gt, &case.areas, &case.layout, &cfg, 1.0)?;
        let grads = model.backward(&mut trace, loss.output_grad.view())?.flat();
        let n = model.param_count();
        let indices = sample(rng, n, opts.params_per_model.min(n)).into_vec();
        let objective = |m: &Regressor<f64>| -> Result<f64> {
            let o = m.predict(x.view())?;
            Ok(batch_loss(o.view(), &case.gt, &case.areas, &case.layout, &cfg, 1.0)?.total)
        };
        let mut tally = Tally::new(format!("composite {variant}"));
        probe_params(&model, &indices, opts.eps_loss, &grads, opts.corrupt_scale, &mut tally, &objective)?;
        out.push(tally.finish(opts.tolerance));
    }
    Ok(out)
}

pub fn run_grad_check(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    if !(opts.eps_model > 0.0 && opts.eps_loss > 0.0 && opts.tolerance > 0.0) {
        anyhow::bail!("step sizes and tolerance must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut components = check_model(opts, &mut rng)?;
    components.extend(check_loss(opts, &mut rng)?);
    components.extend(check_composite(opts, &mut rng)?);
    Ok(GradCheckReport { tolerance: opts.tolerance, components })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-4, 0.0) - 1e-2).abs() < 1e-15);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
