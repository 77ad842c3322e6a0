use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use landval::evaluate::{
    evaluate_model, predict, raw_scores, select_thresholds_for_model, SelectionAudit, ShapeScore, ThresholdPolicy,
    Thresholds,
};
use landval::geometry::ShapeKind;
use landval::loss::LossVariant;
use landval::model::{load_checkpoint, save_checkpoint, ModelConfig, Regressor, CHECKPOINT_BIN};
use landval::synthdata::{generate_dataset, write_dataset, DatasetConfig, Sample};
use landval::trainer::{init_model, train, TrainConfig, TrainHistory, TrainOutcome};

use crate::data::{load_test, load_train_val, sweep_split};
use crate::table::{num, print_table, read_csv, write_csv};
use crate::{mean, std_dev, ExperimentSpec, DEFAULT_MARGIN};

pub fn run_gen_data(out: &Path, cfg: &DatasetConfig) -> Result<()> {
    let ds = generate_dataset(cfg)?;
    write_dataset(&ds, out).with_context(|| format!("writing dataset to {}", out.display()))?;
    println!(
        "wrote {} train / {} val / {} test samples to {}",
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        out.display()
    );
    Ok(())
}

fn run_config(
    spec: &ExperimentSpec,
    data: &DatasetConfig,
    seed: u64,
    variant: LossVariant,
    margin: f64,
) -> TrainConfig {
    let mut cfg = spec.train.clone();
    cfg.seed = seed;
    cfg.loss.variant = variant;
    cfg.loss.margin = margin;
    cfg.augmentation = data.augmentation;
    cfg
}

fn model_config(spec: &ExperimentSpec, data: &DatasetConfig) -> ModelConfig {
    let mut m = ModelConfig::for_dataset(&data.landmarks, data.grid);
    m.hidden = spec.hidden.clone();
    m.inaccuracy_activation = spec.inaccuracy_activation;
    m
}

#[allow(clippy::too_many_arguments)]
fn train_one(
    spec: &ExperimentSpec,
    data: &DatasetConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    seed: u64,
    variant: LossVariant,
    margin: f64,
    checkpoint: Option<&Path>,
) -> Result<TrainOutcome> {
    let cfg = run_config(spec, data, seed, variant, margin);
    let model = init_model(model_config(spec, data), train_set, seed)?;
    let out = train(model, train_set, val_set, &cfg, checkpoint)
        .with_context(|| format!("training {variant} margin {margin} seed {seed}"))?;
    eprintln!(
        "  trained {variant} margin {margin} seed {seed}: best epoch {} (val mean MIoU {:.4})",
        out.history.best_epoch,
        out.history.epochs[out.history.best_epoch].mean_miou()
    );
    Ok(out)
}

fn write_manifest(spec: &ExperimentSpec, command: &str, extra: serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(&spec.out)?;
    let dataset_manifest: serde_json::Value = std::fs::read_to_string(spec.dataset.join("manifest.json"))
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok())
        .unwrap_or(serde_json::Value::Null);
    let doc = serde_json::json!({
        "command": command,
        "spec": spec,
        "dataset_manifest": dataset_manifest,
        "result": extra,
    });
    let path = spec.out.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&doc)?).with_context(|| format!("writing {}", path.display()))
}

fn model_dir(out: &Path, variant: LossVariant, seed: u64) -> PathBuf {
    out.join("models").join(variant.name()).join(format!("seed-{seed}"))
}

/// One row of `report.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub seed: u64,
    pub variant: LossVariant,
    pub shape: ShapeKind,
    pub raw_miou: f64,
    pub raw_med: f64,
    pub corrected_miou: f64,
    pub corrected_med: f64,
    pub threshold: f64,
    pub excluded_fraction: f64,
}

const REPORT_HEADER: [&str; 9] = [
    "seed",
    "variant",
    "shape",
    "raw_miou",
    "raw_med",
    "corrected_miou",
    "corrected_med",
    "threshold",
    "excluded_fraction",
];

fn report_rows(rows: &[ReportRow]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            vec![
                r.seed.to_string(),
                r.variant.name().into(),
                r.shape.name().into(),
                num(r.raw_miou),
                num(r.raw_med),
                num(r.corrected_miou),
                num(r.corrected_med),
                num(r.threshold),
                num(r.excluded_fraction),
            ]
        })
        .collect()
}

/// Thresholds on validation, then raw and corrected scores on test.
fn score_model(
    model: &Regressor<f32>,
    val_set: &[Sample],
    test: &[Sample],
    spec: &ExperimentSpec,
    seed: u64,
    variant: LossVariant,
) -> Result<Vec<ReportRow>> {
    let grid = spec.train.metric_grid;
    let mut audit = SelectionAudit::default();
    let thresholds: Thresholds =
        select_thresholds_for_model(model, val_set, &ThresholdPolicy::default(), grid, &mut audit)?;
    audit.check_disjoint(test.iter().map(|s| s.id)).context("validation and test ids overlap")?;
    let report = evaluate_model(model, test, &thresholds, grid)?;
    Ok(report
        .shapes
        .iter()
        .map(|s| ReportRow {
            seed,
            variant,
            shape: s.kind,
            raw_miou: s.raw_miou,
            raw_med: s.raw_med,
            corrected_miou: s.corrected_miou,
            corrected_med: s.corrected_med,
            threshold: s.threshold,
            excluded_fraction: s.excluded_fraction,
        })
        .collect())
}

fn history_rows(seed: u64, history: &TrainHistory) -> Vec<Vec<String>> {
    history
        .to_csv()
        .lines()
        .skip(1)
        .map(|l| std::iter::once(seed.to_string()).chain(l.split(',').map(str::to_string)).collect())
        .collect()
}

fn history_header() -> Vec<&'static str> {
    std::iter::once("seed").chain(TrainHistory::CSV_HEADER.split(',')).collect()
}

/// Trains one model per seed with the configured variant and margin, then
/// scores it. Writes `history.csv`, `report.csv`, `manifest.json` and a
/// checkpoint per seed.
pub fn run_train(spec: &ExperimentSpec) -> Result<Vec<ReportRow>> {
    spec.validate()?;
    let data = load_train_val(&spec.dataset)?;
    let variant = spec.train.loss.variant;
    let margin = spec.margin_override.unwrap_or(spec.train.loss.margin);
    let mut models = Vec::new();
    let mut history = Vec::new();
    for &seed in &spec.seeds {
        let dir = spec.out.join(format!("seed-{seed}"));
        let out = train_one(spec, &data.config, &data.train, &data.val, seed, variant, margin, None)?;
        save_checkpoint(
            &out.best,
            &dir,
            serde_json::json!({"seed": seed, "variant": variant.name(), "margin": margin}),
        )?;
        history.extend(history_rows(seed, &out.history));
        models.push((seed, out.best));
    }
    write_csv(&spec.out.join("history.csv"), &history_header(), &history)?;
    let test = load_test(&spec.dataset)?;
    let mut rows = Vec::new();
    for (seed, model) in &models {
        rows.extend(score_model(model, &data.val, &test, spec, *seed, variant)?);
    }
    let table = report_rows(&rows);
    write_csv(&spec.out.join("report.csv"), &REPORT_HEADER, &table)?;
    print_table(&format!("{variant}, margin {margin}"), &REPORT_HEADER, &table);
    write_manifest(spec, "train", serde_json::json!({"variant": variant.name(), "margin": margin}))?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub margin: f64,
    pub variant: LossVariant,
    pub shape: ShapeKind,
    pub miou_mean: f64,
    pub miou_std: f64,
    pub med_mean: f64,
    pub med_std: f64,
}

const SWEEP_HEADER: [&str; 7] = ["variant", "margin", "shape", "miou_mean", "miou_std", "med_mean", "med_std"];

/// Every margin for every variant, trained and tested on a split carved from
/// the training portion only. Writes `sweep.csv`.
pub fn run_margin_sweep(spec: &ExperimentSpec) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let data = load_train_val(&spec.dataset)?;
    let (tr, va, te) = sweep_split(&data.train);
    if tr.is_empty() || va.is_empty() || te.is_empty() {
        bail!("training portion of {} samples is too small to carve a sweep split", data.train.len());
    }
    let grid = spec.train.metric_grid;
    let mut rows = Vec::new();
    for &variant in &spec.variants {
        for &margin in &spec.margins {
            let mut per_seed: Vec<Vec<ShapeScore>> = Vec::new();
            for &seed in &spec.seeds {
                let out = train_one(spec, &data.config, &tr, &va, seed, variant, margin, None)?;
                per_seed.push(raw_scores(&predict(&out.best, &te)?, &te, grid)?);
            }
            for (k, &shape) in ShapeKind::ALL.iter().enumerate() {
                let miou: Vec<f64> = per_seed.iter().map(|s| s[k].miou).collect();
                let med: Vec<f64> = per_seed.iter().map(|s| s[k].med).collect();
                rows.push(SweepRow {
                    margin,
                    variant,
                    shape,
                    miou_mean: mean(&miou),
                    miou_std: std_dev(&miou),
                    med_mean: mean(&med),
                    med_std: std_dev(&med),
                });
            }
        }
    }
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.variant.name().into(),
                num(r.margin),
                r.shape.name().into(),
                num(r.miou_mean),
                num(r.miou_std),
                num(r.med_mean),
                num(r.med_std),
            ]
        })
        .collect();
    write_csv(&spec.out.join("sweep.csv"), &SWEEP_HEADER, &table)?;
    print_wide("Margin sweep (split carved from training data)", &rows);
    let winner = sweep_winner(&rows);
    write_manifest(spec, "margin-sweep", serde_json::json!({"winner": winner}))?;
    Ok(rows)
}

fn print_wide(title: &str, rows: &[SweepRow]) {
    let header = ["model", "margin", "pupil MIoU", "pupil MED", "iris MIoU", "iris MED", "eyelid MIoU", "eyelid MED"];
    let lines: Vec<Vec<String>> = rows
        .chunks(ShapeKind::ALL.len())
        .map(|c| {
            let mut l = vec![c[0].variant.name().to_string(), num(c[0].margin)];
            for r in c {
                l.push(format!("{:.3}", r.miou_mean));
                l.push(format!("{:.3}", r.med_mean));
            }
            l
        })
        .collect();
    print_table(title, &header, &lines);
}

/// Margin with the highest mean MIoU over all variants and shapes; ties go to
/// lower mean MED, then to the smaller margin.
pub fn sweep_winner(rows: &[SweepRow]) -> Option<f64> {
    let mut margins: Vec<f64> = rows.iter().map(|r| r.margin).collect();
    margins.sort_by(|a, b| a.total_cmp(b));
    margins.dedup();
    let mut best: Option<(f64, f64, f64)> = None;
    for m in margins {
        let sel: Vec<&SweepRow> = rows.iter().filter(|r| r.margin == m).collect();
        let miou = mean(&sel.iter().map(|r| r.miou_mean).collect::<Vec<_>>());
        let med = mean(&sel.iter().map(|r| r.med_mean).collect::<Vec<_>>());
        let better = match best {
            None => true,
            Some((_, bm, bd)) => miou > bm || (miou == bm && med < bd),
        };
        if better {
            best = Some((m, miou, med));
        }
    }
    best.map(|b| b.0)
}

fn read_sweep(path: &Path) -> Result<Vec<SweepRow>> {
    let (_, rows) = read_csv(path)?;
    rows.iter()
        .map(|r| {
            let shape = ShapeKind::ALL
                .into_iter()
                .find(|k| k.name() == r[2])
                .with_context(|| format!("unknown shape '{}' in {}", r[2], path.display()))?;
            Ok(SweepRow {
                variant: r[0].parse().map_err(anyhow::Error::msg)?,
                margin: r[1].parse()?,
                shape,
                miou_mean: r[3].parse()?,
                miou_std: r[4].parse()?,
                med_mean: r[5].parse()?,
                med_std: r[6].parse()?,
            })
        })
        .collect()
}

/// Explicit margin, else the winner of a sweep in the output directory, else
/// the default.
pub fn comparison_margin(spec: &ExperimentSpec) -> Result<f64> {
    if let Some(m) = spec.margin_override {
        return Ok(m);
    }
    let sweep = spec.out.join("sweep.csv");
    if sweep.is_file() {
        if let Some(m) = sweep_winner(&read_sweep(&sweep)?) {
            return Ok(m);
        }
    }
    Ok(DEFAULT_MARGIN)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub variant: LossVariant,
    pub shape: ShapeKind,
    pub miou_mean: f64,
    pub miou_std: f64,
    pub med_mean: f64,
    pub med_std: f64,
    pub miou_per_seed: Vec<f64>,
    pub med_per_seed: Vec<f64>,
}

/// Trains every variant for every seed at one margin and scores the raw
/// predictions on test. Models are kept under `models/` for the correction
/// study. Writes `compare.csv`.
pub fn run_compare_losses(spec: &ExperimentSpec) -> Result<Vec<CompareRow>> {
    spec.validate()?;
    let data = load_train_val(&spec.dataset)?;
    let margin = comparison_margin(spec)?;
    let mut trained = Vec::new();
    for &variant in &spec.variants {
        for &seed in &spec.seeds {
            let dir = model_dir(&spec.out, variant, seed);
            let out = train_one(spec, &data.config, &data.train, &data.val, seed, variant, margin, None)?;
            save_checkpoint(
                &out.best,
                &dir,
                serde_json::json!({"seed": seed, "variant": variant.name(), "margin": margin}),
            )?;
            write_csv(&dir.join("history.csv"), &history_header(), &history_rows(seed, &out.history))?;
            trained.push((variant, seed, out.best));
        }
    }
    let test = load_test(&spec.dataset)?;
    let grid = spec.train.metric_grid;
    let mut rows = Vec::new();
    for &variant in &spec.variants {
        let mut per_seed: Vec<Vec<ShapeScore>> = Vec::new();
        for (_, _, model) in trained.iter().filter(|(v, _, _)| *v == variant) {
            per_seed.push(raw_scores(&predict(model, &test)?, &test, grid)?);
        }
        for (k, &shape) in ShapeKind::ALL.iter().enumerate() {
            let miou: Vec<f64> = per_seed.iter().map(|s| s[k].miou).collect();
            let med: Vec<f64> = per_seed.iter().map(|s| s[k].med).collect();
            rows.push(CompareRow {
                variant,
                shape,
                miou_mean: mean(&miou),
                miou_std: std_dev(&miou),
                med_mean: mean(&med),
                med_std: std_dev(&med),
                miou_per_seed: miou,
                med_per_seed: med,
            });
        }
    }
    let mut header: Vec<String> =
        ["variant", "shape", "miou_mean", "miou_std", "med_mean", "med_std"].iter().map(|s| s.to_string()).collect();
    header.extend(spec.seeds.iter().map(|s| format!("miou_seed{s}")));
    header.extend(spec.seeds.iter().map(|s| format!("med_seed{s}")));
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut l = vec![
                r.variant.name().to_string(),
                r.shape.name().to_string(),
                num(r.miou_mean),
                num(r.miou_std),
                num(r.med_mean),
                num(r.med_std),
            ];
            l.extend(r.miou_per_seed.iter().map(|v| num(*v)));
            l.extend(r.med_per_seed.iter().map(|v| num(*v)));
            l
        })
        .collect();
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(&spec.out.join("compare.csv"), &header_refs, &table)?;
    let console: Vec<SweepRow> = rows
        .iter()
        .map(|r| SweepRow {
            margin,
            variant: r.variant,
            shape: r.shape,
            miou_mean: r.miou_mean,
            miou_std: r.miou_std,
            med_mean: r.med_mean,
            med_std: r.med_std,
        })
        .collect();
    print_wide("Loss comparison on test (seed means)", &console);
    write_manifest(spec, "compare-losses", serde_json::json!({"margin": margin}))?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrectionRow {
    pub variant: LossVariant,
    pub shape: ShapeKind,
    pub raw_miou: f64,
    pub corrected_miou: f64,
    pub delta_miou: f64,
    pub raw_med: f64,
    pub corrected_med: f64,
    pub delta_med: f64,
    pub excluded_fraction: f64,
}

/// Loads the models of the comparison step, selects exclusion thresholds on
/// validation and scores raw and corrected shapes on test. Writes
/// `correction.csv` (seed means) and `report.csv` (per seed).
pub fn run_correction_eval(spec: &ExperimentSpec) -> Result<(Vec<CorrectionRow>, Vec<ReportRow>)> {
    spec.validate()?;
    let data = load_train_val(&spec.dataset)?;
    let mut models = Vec::new();
    for &variant in &spec.variants {
        for &seed in &spec.seeds {
            let dir = model_dir(&spec.out, variant, seed);
            if !dir.join(CHECKPOINT_BIN).is_file() {
                bail!("no trained model at {}; run `landval compare-losses` with the same --out first", dir.display());
            }
            models.push((variant, seed, load_checkpoint(&dir)?));
        }
    }
    let test = load_test(&spec.dataset)?;
    let mut report = Vec::new();
    for (variant, seed, model) in &models {
        report.extend(score_model(model, &data.val, &test, spec, *seed, *variant)?);
    }
    let mut rows = Vec::new();
    for &variant in &spec.variants {
        for &shape in &ShapeKind::ALL {
            let sel: Vec<&ReportRow> = report.iter().filter(|r| r.variant == variant && r.shape == shape).collect();
            let m = |f: fn(&ReportRow) -> f64| mean(&sel.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (raw_miou, corrected_miou) = (m(|r| r.raw_miou), m(|r| r.corrected_miou));
            let (raw_med, corrected_med) = (m(|r| r.raw_med), m(|r| r.corrected_med));
            rows.push(CorrectionRow {
                variant,
                shape,
                raw_miou,
                corrected_miou,
                delta_miou: corrected_miou - raw_miou,
                raw_med,
                corrected_med,
                delta_med: corrected_med - raw_med,
                excluded_fraction: m(|r| r.excluded_fraction),
            });
        }
    }
    let header = [
        "variant",
        "shape",
        "raw_miou",
        "corrected_miou",
        "delta_miou",
        "raw_med",
        "corrected_med",
        "delta_med",
        "excluded_fraction",
    ];
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.variant.name().into(),
                r.shape.name().into(),
                num(r.raw_miou),
                num(r.corrected_miou),
                num(r.delta_miou),
                num(r.raw_med),
                num(r.corrected_med),
                num(r.delta_med),
                num(r.excluded_fraction),
            ]
        })
        .collect();
    write_csv(&spec.out.join("correction.csv"), &header, &table)?;
    write_csv(&spec.out.join("report.csv"), &REPORT_HEADER, &report_rows(&report))?;
    print_table("Correction on test (seed means)", &header, &table);
    write_manifest(spec, "correction-eval", serde_json::Value::Null)?;
    Ok((rows, report))
}
