use landval::geometry::RasterGrid;
use landval::loss::LossVariant;
use landval::model::ModelConfig;
use landval::synthdata::{generate_dataset, AugmentConfig, Dataset, DatasetConfig};
use landval::trainer::{init_model, train, TrainConfig};

fn tiny_dataset() -> Dataset {
    generate_dataset(&DatasetConfig { n_train: 40, n_val: 12, n_test: 4, seed: 9, ..DatasetConfig::default() }).unwrap()
}

fn tiny_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig { seed, epochs_phase1: 2, epochs_phase2: 1, ..TrainConfig::default() };
    cfg.metric_grid = RasterGrid::new(64, 64).unwrap();
    cfg
}

fn model_config(ds: &Dataset) -> ModelConfig {
    let mut m = ModelConfig::for_dataset(&ds.config.landmarks, ds.config.grid);
    m.hidden = vec![24];
    m
}

#[test]
fn training_is_deterministic() {
    let ds = tiny_dataset();
    let cfg = tiny_config(3);
    let run = || {
        let model = init_model(model_config(&ds), &ds.train, 3).unwrap();
        train(model, &ds.train, &ds.val, &cfg, None).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.history, b.history);
    assert_eq!(a.best.params_flat(), b.best.params_flat());
    assert_eq!(a.history.epochs.len(), cfg.total_epochs());
    assert!(a.history.best_epoch < a.history.epochs.len());
}

#[test]
fn best_epoch_has_maximal_validation_miou() {
    let ds = tiny_dataset();
    let cfg = tiny_config(4);
    let model = init_model(model_config(&ds), &ds.train, 4).unwrap();
    let out = train(model, &ds.train, &ds.val, &cfg, None).unwrap();
    let best = out.history.epochs[out.history.best_epoch].mean_miou();
    assert!(out.history.epochs.iter().all(|r| r.mean_miou() <= best));
}

#[test]
fn without_inaccuracy_weight_the_margin_is_irrelevant() {
    let ds = tiny_dataset();
    let mut results = Vec::new();
    for margin in [0.0, 0.005, 0.05, f64::INFINITY] {
        let mut cfg = tiny_config(5);
        cfg.loss.inaccuracy_weight = 0.0;
        cfg.loss.margin = margin;
        cfg.loss.variant = LossVariant::NormAbs;
        cfg.augmentation = AugmentConfig::none();
        let model = init_model(model_config(&ds), &ds.train, 5).unwrap();
        let out = train(model, &ds.train, &ds.val, &cfg, None).unwrap();
        results.push(out.history.epochs.iter().map(|r| r.mean_med()).collect::<Vec<_>>());
    }
    assert!(results.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn checkpoint_of_best_epoch_is_written() {
    let ds = tiny_dataset();
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(6);
    let model = init_model(model_config(&ds), &ds.train, 6).unwrap();
    let out = train(model, &ds.train, &ds.val, &cfg, Some(dir.path())).unwrap();
    let loaded = landval::model::load_checkpoint(dir.path()).unwrap();
    assert_eq!(loaded.params_flat(), out.best.params_flat());
}
