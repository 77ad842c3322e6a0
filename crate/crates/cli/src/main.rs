use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

use landval::geometry::RasterGrid;
use landval::loss::{AreaSource, LossVariant, MarginMode};
use landval::model::InaccuracyActivation;
use landval::synthdata::{AugmentConfig, DatasetConfig};
use landval::trainer::TrainConfig;
use landval_cli::{
    run_compare_losses, run_correction_eval, run_gen_data, run_grad_check, run_margin_sweep, run_train, ExperimentSpec,
    GradCheckOptions, DEFAULT_MARGIN,
};

#[derive(Parser)]
#[command(name = "landval", version, about = "Landmark regression with per-landmark inaccuracy estimates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic eye dataset with train, validation and test splits.
    GenData(GenDataArgs),
    /// Train one loss variant per seed and score it on test.
    Train(TrainArgs),
    /// Sweep the margin on a split carved from the training data.
    MarginSweep(TrainArgs),
    /// Train every loss variant at one margin and compare raw test scores.
    CompareLosses(TrainArgs),
    /// Exclude landmarks by predicted inaccuracy and refit, using the models
    /// of `compare-losses`.
    CorrectionEval(TrainArgs),
    /// Finite-difference check of the analytic gradients.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1200)]
    n_train: usize,
    #[arg(long, default_value_t = 300)]
    n_val: usize,
    #[arg(long, default_value_t = 500)]
    n_test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Side length of the rendered image in pixels.
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    /// Disable training-time augmentation for models trained on this dataset.
    #[arg(long)]
    no_augment: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum MarginModeArg {
    MaskOnly,
    LrScaled,
}

#[derive(Clone, Copy, ValueEnum)]
enum AreaArg {
    Gt,
    Refit,
}

#[derive(Clone, Copy, ValueEnum)]
enum ActivationArg {
    Softplus,
    Identity,
}

#[derive(Clone, Copy, ValueEnum)]
enum DecayArg {
    /// Decay applied directly to the weights.
    Decoupled,
    /// Decay added to the gradient.
    L2,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma separated seeds.
    #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3, 4, 5])]
    seeds: Vec<u64>,
    /// Margin; for `compare-losses` it overrides the sweep winner.
    #[arg(long)]
    margin: Option<f64>,
    /// Loss variants (comma separated); `train` uses the first.
    #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
    variant: Vec<LossVariant>,
    /// Weight of the inaccuracy term.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, value_enum, default_value_t = OnOff::On)]
    detach_target: OnOff,
    #[arg(long, value_enum, default_value_t = MarginModeArg::MaskOnly)]
    margin_mode: MarginModeArg,
    #[arg(long, value_enum, default_value_t = AreaArg::Gt)]
    area_source: AreaArg,
    #[arg(long)]
    epochs_p1: Option<usize>,
    #[arg(long)]
    epochs_p2: Option<usize>,
    /// 50 + 50 epochs instead of 10 + 10.
    #[arg(long)]
    long_schedule: bool,
    #[arg(long, value_enum, default_value_t = ActivationArg::Softplus)]
    inacc_activation: ActivationArg,
    #[arg(long, value_enum, default_value_t = DecayArg::Decoupled)]
    weight_decay_mode: DecayArg,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Comma separated hidden layer widths.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    /// Comma separated margins for `margin-sweep`.
    #[arg(long, value_delimiter = ',')]
    margins: Option<Vec<f64>>,
}

fn parse_variant(s: &str) -> Result<LossVariant, String> {
    s.parse()
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    params: usize,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    /// Scale the analytic gradients to confirm the check can fail.
    #[arg(long, default_value_t = 1.0)]
    corrupt_scale: f64,
}

impl TrainArgs {
    fn spec(&self, default_variants: &[LossVariant]) -> ExperimentSpec {
        let mut spec = ExperimentSpec::new(self.dataset.clone(), self.out.clone());
        spec.seeds = self.seeds.clone();
        let mut train = if self.long_schedule { TrainConfig::long_schedule() } else { TrainConfig::default() };
        if let Some(e) = self.epochs_p1 {
            train.epochs_phase1 = e;
        }
        if let Some(e) = self.epochs_p2 {
            train.epochs_phase2 = e;
        }
        train.loss.inaccuracy_weight = self.lambda;
        train.loss.detach_target = matches!(self.detach_target, OnOff::On);
        train.loss.margin_mode = match self.margin_mode {
            MarginModeArg::MaskOnly => MarginMode::MaskOnly,
            MarginModeArg::LrScaled => MarginMode::LrScaled,
        };
        train.loss.area_source = match self.area_source {
            AreaArg::Gt => AreaSource::GroundTruth,
            AreaArg::Refit => AreaSource::Refit,
        };
        train.loss.margin = self.margin.unwrap_or(DEFAULT_MARGIN);
        train.adam.decoupled = matches!(self.weight_decay_mode, DecayArg::Decoupled);
        if let Some(wd) = self.weight_decay {
            train.adam.weight_decay = wd;
        }
        spec.variants = if self.variant.is_empty() { default_variants.to_vec() } else { self.variant.clone() };
        train.loss.variant = spec.variants[0];
        spec.train = train;
        spec.margin_override = self.margin;
        if let Some(h) = &self.hidden {
            spec.hidden = h.clone();
        }
        if let Some(m) = &self.margins {
            spec.margins = m.clone();
        }
        spec.inaccuracy_activation = match self.inacc_activation {
            ActivationArg::Softplus => InaccuracyActivation::Softplus,
            ActivationArg::Identity => InaccuracyActivation::Identity,
        };
        spec
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData(a) => {
            let cfg = DatasetConfig {
                n_train: a.n_train,
                n_val: a.n_val,
                n_test: a.n_test,
                seed: a.seed,
                grid: RasterGrid::new(a.image_size, a.image_size)?,
                augmentation: if a.no_augment { AugmentConfig::none() } else { AugmentConfig::default() },
                ..DatasetConfig::default()
            };
            run_gen_data(&a.out, &cfg)?;
        }
        Command::Train(a) => {
            run_train(&a.spec(&[LossVariant::NormEuclid]))?;
        }
        Command::MarginSweep(a) => {
            run_margin_sweep(&a.spec(&[LossVariant::NormAbs, LossVariant::NormEuclid]))?;
        }
        Command::CompareLosses(a) => {
            run_compare_losses(&a.spec(&LossVariant::ALL))?;
        }
        Command::CorrectionEval(a) => {
            run_correction_eval(&a.spec(&LossVariant::ALL))?;
        }
        Command::GradCheck(a) => {
            let opts = GradCheckOptions {
                seed: a.seed,
                params_per_model: a.params,
                tolerance: a.tolerance,
                corrupt_scale: a.corrupt_scale,
                ..GradCheckOptions::default()
            };
            let report = run_grad_check(&opts)?;
            for c in &report.components {
                println!(
                    "{} {:<48} checked {:>4}  max relative error {:.3e}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.checked,
                    c.max_error
                );
            }
            println!("max relative error {:.3e} (tolerance {:e})", report.max_error(), report.tolerance);
            return Ok(report.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
