//! Mini-batch training with Adam, a two-phase learning-rate schedule, online
//! augmentation and best-epoch selection on validation MIoU.

mod adam;

pub use adam::{adam_step, AdamConfig, AdamState};

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluate::{predict, raw_scores, EvalError, ShapeScore};
use crate::geometry::RasterGrid;
use crate::loss::{batch_loss, refit_areas, shape_areas, AreaSource, LossConfig, LossError};
use crate::model::{input_batch, save_checkpoint, target_coords, ModelConfig, ModelError, Regressor};
use crate::synthdata::{augment, AugmentConfig, Sample};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("training aborted: non-finite {what} at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize, what: &'static str },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub loss: LossConfig,
    pub augmentation: AugmentConfig,
    /// Grid for validation metrics and loss areas.
    pub metric_grid: RasterGrid,
}

impl Default for TrainConfig {
    /// Desk scale: 10 + 10 epochs.
    fn default() -> Self {
        TrainConfig {
            batch_size: 10,
            lr_phase1: 1e-4,
            lr_phase2: 1e-5,
            epochs_phase1: 10,
            epochs_phase2: 10,
            adam: AdamConfig::default(),
            seed: 1,
            loss: LossConfig::default(),
            augmentation: AugmentConfig::default(),
            metric_grid: RasterGrid::metric(),
        }
    }
}

impl TrainConfig {
    /// 50 + 50 epochs.
    pub fn long_schedule() -> Self {
        TrainConfig { epochs_phase1: 50, epochs_phase2: 50, ..TrainConfig::default() }
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_phase1 + self.epochs_phase2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidArgument(m.into()));
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.lr_phase1 > 0.0 && self.lr_phase2 > 0.0) {
            return bad("learning rates must be positive");
        }
        let a = &self.adam;
        if !(a.beta1 > 0.0 && a.beta1 < 1.0 && a.beta2 > 0.0 && a.beta2 < 1.0) {
            return bad("Adam betas must lie in (0, 1)");
        }
        if !(a.eps > 0.0) || !(a.weight_decay >= 0.0) {
            return bad("Adam eps must be positive and weight decay non-negative");
        }
        self.loss.validate()?;
        self.augmentation.validate().map_err(|e| TrainError::InvalidArgument(e.to_string()))?;
        Ok(())
    }

    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        if epoch < self.epochs_phase1 {
            self.lr_phase1
        } else {
            self.lr_phase2
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: usize,
    pub lr: f64,
    /// Optimizer steps taken so far; stands in for a wall-clock timestamp so
    /// histories stay reproducible.
    pub step: u64,
    pub landmark_loss: f64,
    pub inaccuracy_loss: f64,
    pub total_loss: f64,
    pub masked_fraction: f64,
    /// Validation scores in [`ShapeKind::ALL`] order.
    pub validation: Vec<ShapeScore>,
}

impl EpochRecord {
    pub fn mean_miou(&self) -> f64 {
        self.validation.iter().map(|s| s.miou).sum::<f64>() / self.validation.len() as f64
    }

    pub fn mean_med(&self) -> f64 {
        self.validation.iter().map(|s| s.med).sum::<f64>() / self.validation.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Index of the best record: highest mean MIoU, then lowest mean MED, then
/// earliest.
pub fn best_epoch(records: &[EpochRecord]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in records.iter().enumerate() {
        let better = match best {
            None => true,
            Some(b) => {
                let (m, bm) = (r.mean_miou(), records[b].mean_miou());
                m > bm || (m == bm && r.mean_med() < records[b].mean_med())
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str =
        "epoch,phase,lr,step,landmark_loss,inaccuracy_loss,total_loss,masked_fraction,\
pupil_med,pupil_miou,iris_med,iris_miou,eyelid_med,eyelid_miou,best";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.epochs {
            let _ = write!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.epoch, r.phase, r.lr, r.step, r.landmark_loss, r.inaccuracy_loss, r.total_loss, r.masked_fraction
            );
            for v in &r.validation {
                let _ = write!(s, ",{},{}", v.med, v.miou);
            }
            let _ = writeln!(s, ",{}", (r.epoch == self.best_epoch) as u8);
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub best: Regressor<f32>,
    /// Parameters after the final epoch.
    pub last: Regressor<f32>,
    pub history: TrainHistory,
}

/// Fresh model whose coordinate outputs start at the mean training landmarks.
pub fn init_model(config: ModelConfig, train: &[Sample], seed: u64) -> Result<Regressor<f32>> {
    let mut model = Regressor::init(config, seed)?;
    if !train.is_empty() {
        let mut mean = vec![0.0; target_coords(&train[0]).len()];
        for s in train {
            for (m, v) in mean.iter_mut().zip(target_coords(s)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= train.len() as f64);
        model.set_coordinate_bias(&mean)?;
    }
    Ok(model)
}

const SHUFFLE_STREAM: u64 = 1 << 63;

/// Generator for augmenting batch `batch` of epoch `epoch`.
pub fn batch_rng(seed: u64, epoch: usize, batch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | batch as u64);
    rng
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SHUFFLE_STREAM | epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Loss statistics of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub landmark_loss: f64,
    pub inaccuracy_loss: f64,
    pub total_loss: f64,
    pub masked_fraction: f64,
}

/// Forward, loss, backward and Adam update on one already augmented batch.
pub fn train_step(
    model: &mut Regressor<f32>,
    state: &mut AdamState<f32>,
    batch: &[&Sample],
    lr: f64,
    cfg: &TrainConfig,
) -> Result<StepStats> {
    let x = input_batch::<f32>(batch);
    let (out, mut trace) = model.forward(x.view())?;
    let out64 = out.mapv(f64::from);
    let layout = &model.config.layout;
    let gt: Vec<Vec<f64>> = batch.iter().map(|s| target_coords(s)).collect();
    let areas: Vec<_> = batch
        .iter()
        .zip(out64.rows())
        .map(|(s, row)| {
            let gt_areas = shape_areas(&s.shapes, cfg.metric_grid);
            match cfg.loss.area_source {
                AreaSource::GroundTruth => gt_areas,
                AreaSource::Refit => refit_areas(layout, &row.to_vec(), &gt_areas, cfg.metric_grid),
            }
        })
        .collect();
    let loss = batch_loss(out64.view(), &gt, &areas, layout, &cfg.loss, lr)?;
    let g = loss.output_grad.mapv(|v| v as f32);
    let grads = model.backward(&mut trace, g.view())?;
    if !grads.is_finite() {
        return Err(TrainError::NonFinite { epoch: 0, batch: 0, what: "gradient" });
    }
    adam_step(&mut model.param_slices_mut(), &grads.slices(), state, lr, &cfg.adam)?;
    if !model.is_finite() {
        return Err(TrainError::NonFinite { epoch: 0, batch: 0, what: "parameter" });
    }
    Ok(StepStats {
        landmark_loss: loss.landmark_loss,
        inaccuracy_loss: loss.inaccuracy_loss,
        total_loss: loss.total,
        masked_fraction: loss.masked_fraction,
    })
}

/// Trains `model` for both phases and returns the best validation epoch's
/// parameters. When `checkpoint_dir` is given the best model so far is saved
/// there after each improving epoch, so an aborted run leaves it behind.
pub fn train(
    mut model: Regressor<f32>,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(TrainError::InvalidArgument("training and validation sets must be non-empty".into()));
    }
    let mut state = AdamState::new(model.param_count());
    let mut records: Vec<EpochRecord> = Vec::with_capacity(cfg.total_epochs());
    let mut best: Option<(usize, Regressor<f32>)> = None;

    for epoch in 0..cfg.total_epochs() {
        let lr = cfg.lr_for_epoch(epoch);
        let order = epoch_order(cfg.seed, epoch, train_set.len());
        let (mut lm, mut inacc, mut total, mut masked) = (0.0, 0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut rng = batch_rng(cfg.seed, epoch, b);
            let augmented: Vec<Sample> =
                idx.iter().map(|&i| augment(&train_set[i], &mut rng, &cfg.augmentation)).collect();
            let refs: Vec<&Sample> = augmented.iter().collect();
            let stats = train_step(&mut model, &mut state, &refs, lr, cfg).map_err(|e| match e {
                TrainError::NonFinite { what, .. } => TrainError::NonFinite { epoch, batch: b, what },
                TrainError::Loss(LossError::NonFinite(what)) => TrainError::NonFinite { epoch, batch: b, what },
                other => other,
            })?;
            lm += stats.landmark_loss;
            inacc += stats.inaccuracy_loss;
            total += stats.total_loss;
            masked += stats.masked_fraction;
            batches += 1;
        }
        let n = batches as f64;
        let preds = predict(&model, val_set)?;
        let validation = raw_scores(&preds, val_set, cfg.metric_grid)?;
        records.push(EpochRecord {
            epoch,
            phase: if epoch < cfg.epochs_phase1 { 1 } else { 2 },
            lr,
            step: state.t,
            landmark_loss: lm / n,
            inaccuracy_loss: inacc / n,
            total_loss: total / n,
            masked_fraction: masked / n,
            validation,
        });
        if best_epoch(&records) == Some(epoch) {
            if let Some(dir) = checkpoint_dir {
                save_checkpoint(&model, dir, serde_json::json!({ "epoch": epoch, "seed": cfg.seed }))?;
            }
            best = Some((epoch, model.clone()));
        }
    }
    let (best_epoch, best_model) = match best {
        Some(b) => b,
        None => (0, model.clone()),
    };
    Ok(TrainOutcome { best: best_model, last: model, history: TrainHistory { epochs: records, best_epoch } })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(epoch: usize, miou: f64, med: f64) -> EpochRecord {
        let s = ShapeScore { miou, med, fit_failures: 0, excluded_fraction: 0.0 };
        EpochRecord {
            epoch,
            phase: 1,
            lr: 1e-4,
            step: 0,
            landmark_loss: 0.0,
            inaccuracy_loss: 0.0,
            total_loss: 0.0,
            masked_fraction: 0.0,
            validation: vec![s; 3],
        }
    }

    #[test]
    fn best_epoch_tie_breaks() {
        let r = vec![record(0, 0.5, 3.0), record(1, 0.7, 2.0), record(2, 0.7, 1.5), record(3, 0.7, 1.5)];
        assert_eq!(best_epoch(&r), Some(2));
        assert_eq!(best_epoch(&r[..2]), Some(1));
        assert_eq!(best_epoch(&[]), None);
    }

    #[test]
    fn schedule() {
        let cfg = TrainConfig { epochs_phase1: 3, epochs_phase2: 2, ..TrainConfig::default() };
        assert_eq!(cfg.lr_for_epoch(2), 1e-4);
        assert_eq!(cfg.lr_for_epoch(3), 1e-5);
        assert_eq!(TrainConfig::long_schedule().total_epochs(), 100);
    }

    #[test]
    fn shuffles_are_permutations_and_reproducible() {
        let a = epoch_order(3, 1, 20);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(3, 1, 20));
        assert_ne!(a, epoch_order(3, 2, 20));
    }
}
