//! Experiment harness: dataset generation, training runs, the margin sweep,
//! the loss comparison, the correction study and the gradient check. Every
//! command writes CSV tables that are byte-identical across reruns with the
//! same seeds.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod experiments;
pub mod gradcheck;
pub mod table;

use std::collections::BTreeSet;
use std::path::PathBuf;

use anyhow::{bail, Result};
use serde::Serialize;

use landval::loss::LossVariant;
use landval::trainer::TrainConfig;

pub use experiments::{
    run_compare_losses, run_correction_eval, run_gen_data, run_margin_sweep, run_train, CompareRow, CorrectionRow,
    ReportRow, SweepRow,
};
pub use gradcheck::{run_grad_check, GradCheckOptions, GradCheckReport};

/// Margins of the sweep.
pub const SWEEP_MARGINS: [f64; 6] = [0.001, 0.005, 0.01, 0.02, 0.04, 0.05];
pub const DEFAULT_MARGIN: f64 = 0.005;
pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

#[derive(Clone, Debug, Serialize)]
pub struct ExperimentSpec {
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub seeds: Vec<u64>,
    /// Base training configuration; the seed is replaced per run.
    pub train: TrainConfig,
    pub hidden: Vec<usize>,
    pub inaccuracy_activation: landval::model::InaccuracyActivation,
    /// Variants to train where a command trains several.
    pub variants: Vec<LossVariant>,
    pub margins: Vec<f64>,
    /// Margin given explicitly on the command line.
    pub margin_override: Option<f64>,
}

impl ExperimentSpec {
    pub fn new(dataset: PathBuf, out: PathBuf) -> Self {
        ExperimentSpec {
            dataset,
            out,
            seeds: DEFAULT_SEEDS.to_vec(),
            train: TrainConfig::default(),
            hidden: vec![256, 256],
            inaccuracy_activation: landval::model::InaccuracyActivation::Softplus,
            variants: LossVariant::ALL.to_vec(),
            margins: SWEEP_MARGINS.to_vec(),
            margin_override: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("at least one seed is required");
        }
        let distinct: BTreeSet<u64> = self.seeds.iter().copied().collect();
        if distinct.len() != self.seeds.len() {
            bail!("seeds must be distinct");
        }
        if self.variants.is_empty() {
            bail!("at least one loss variant is required");
        }
        if self.margins.is_empty() || self.margins.iter().any(|m| !(*m >= 0.0)) {
            bail!("margins must be a non-empty list of non-negative values");
        }
        self.train.validate()?;
        Ok(())
    }
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation; zero for a single value.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}
