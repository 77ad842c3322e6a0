//! Dataset access for the commands. Training and validation splits are read
//! on their own; the test split is only read by the final scoring step.

use std::path::Path;

use anyhow::{Context, Result};

use landval::synthdata::{read_manifest, read_split, DatasetConfig, Sample, Split, MANIFEST_FILE};

pub struct TrainVal {
    pub config: DatasetConfig,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

fn ensure_exists(dir: &Path) -> Result<()> {
    if !dir.join(MANIFEST_FILE).is_file() {
        anyhow::bail!(
            "no dataset at {} (missing {}); create one with `landval gen-data --out {}`",
            dir.display(),
            MANIFEST_FILE,
            dir.display()
        );
    }
    Ok(())
}

pub fn load_train_val(dir: &Path) -> Result<TrainVal> {
    ensure_exists(dir)?;
    let manifest = read_manifest(dir).with_context(|| format!("reading manifest in {}", dir.display()))?;
    let train = read_split(dir, Split::Train).context("reading training split")?;
    let val = read_split(dir, Split::Val).context("reading validation split")?;
    Ok(TrainVal { config: manifest.config, train, val })
}

pub fn load_test(dir: &Path) -> Result<Vec<Sample>> {
    ensure_exists(dir)?;
    read_split(dir, Split::Test).context("reading test split")
}

/// Carves a train/validation/test split out of the training portion alone,
/// in proportions 50 : 20 : 50.
pub fn sweep_split(train: &[Sample]) -> (Vec<Sample>, Vec<Sample>, Vec<Sample>) {
    let n = train.len();
    let n_train = n * 50 / 120;
    let n_val = n * 20 / 120;
    let (a, rest) = train.split_at(n_train);
    let (b, c) = rest.split_at(n_val);
    (a.to_vec(), b.to_vec(), c.to_vec())
}
