//! Config-driven workflow shared by the command-line tool and the tests.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::bench::{report_csv, report_text, run_table, top1, ExperimentResult, TableSetup};
use crate::cifar::{self, CifarError};
use crate::config::{DatasetFormat, RunConfig};
use crate::data::{make_splits, BenchSplits, LabeledDataset, Split, SplitKind};
use crate::models::Pipeline;
use crate::persist::{write_atomic, ModelFile, ModelFileError};
use crate::synth;
use crate::training::{train_backbone, TrainLog};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Model(#[from] crate::Error),
    #[error(transparent)]
    Dataset(#[from] CifarError),
    #[error(transparent)]
    ModelFile(#[from] ModelFileError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

type Result<T> = std::result::Result<T, ExperimentError>;

pub struct Datasets {
    /// Used only to pre-train the backbone.
    pub pretrain: LabeledDataset,
    /// Held-out pool the benchmark splits are cut from.
    pub pool: LabeledDataset,
}

pub fn load_datasets(cfg: &RunConfig) -> Result<Datasets> {
    match cfg.dataset.format {
        DatasetFormat::Cifar10 => Ok(Datasets {
            pretrain: cifar::ingest_train(&cfg.dataset.path)?,
            pool: cifar::ingest_test(&cfg.dataset.path)?,
        }),
        DatasetFormat::Synthetic => {
            let (pretrain, pool) = synth::generate_sets(&cfg.synthetic);
            Ok(Datasets { pretrain, pool })
        }
    }
}

/// Only the held-out pool; skips reading the pre-training files.
pub fn load_pool(cfg: &RunConfig) -> Result<LabeledDataset> {
    match cfg.dataset.format {
        DatasetFormat::Cifar10 => Ok(cifar::ingest_test(&cfg.dataset.path)?),
        DatasetFormat::Synthetic => Ok(synth::generate_sets(&cfg.synthetic).1),
    }
}

/// Leading part for training, trailing `val_fraction` for early stopping.
pub fn pretrain_splits(pretrain: &LabeledDataset, val_fraction: f64) -> Result<(Split, Split)> {
    let n_val = (pretrain.len() as f64 * val_fraction).round() as usize;
    if n_val == 0 || n_val >= pretrain.len() {
        return Err(crate::Error::InvalidArgument(format!(
            "pre-training set of {} cannot hold out a fraction of {val_fraction}",
            pretrain.len()
        ))
        .into());
    }
    let (train, val) = pretrain.samples().split_at(pretrain.len() - n_val);
    Ok((
        Split::new(SplitKind::Train, train.to_vec()),
        Split::new(SplitKind::Val, val.to_vec()),
    ))
}

pub fn pool_splits(pool: &LabeledDataset, cfg: &RunConfig) -> Result<BenchSplits> {
    Ok(pool.split(&make_splits(pool.len(), cfg.dataset.proportions)?)?)
}

/// Pre-trains the backbone and caches its clean top-1 on the held-out test
/// split in the returned model file.
pub fn pretrain(cfg: &RunConfig, data: &Datasets) -> Result<(ModelFile, TrainLog)> {
    let (train, val) = pretrain_splits(&data.pretrain, cfg.backbone.val_fraction)?;
    let (backbone, means, log) =
        train_backbone(&train, &val, &cfg.backbone.arch, &cfg.backbone_train())?;
    let splits = pool_splits(&data.pool, cfg)?;
    let clean = top1(&Pipeline::new(backbone.clone(), means), &splits.test)?;
    Ok((
        ModelFile::from_backbone(&backbone, means, Some(clean), cfg.seed),
        log,
    ))
}

pub struct TableOutput {
    pub results: Vec<ExperimentResult>,
    pub text: String,
    pub csv: String,
}

pub fn table(
    cfg: &RunConfig,
    backbone_file: &ModelFile,
    pool: &LabeledDataset,
) -> Result<TableOutput> {
    let (backbone, channel_means) = backbone_file.backbone()?;
    let splits = pool_splits(pool, cfg)?;
    let clean_top1 = match backbone_file.header.clean_top1 {
        Some(v) => v,
        None => top1(
            &Pipeline::new(backbone.clone(), channel_means),
            &splits.test,
        )?,
    };
    let setup = TableSetup {
        backbone,
        channel_means,
        clean_top1,
        adapter_layers: cfg.adapter.layers,
        adapter_init: cfg.adapter.init,
        adapter_cfg: cfg.adapter_train(),
        finetune_cfg: cfg.finetune_train(),
    };
    let results = run_table(&setup, &splits, &cfg.scenario, &cfg.methods()?)?;
    let text = report_text(&cfg.scenario, clean_top1, cfg.seed, &results);
    let csv = report_csv(&results);
    Ok(TableOutput { results, text, csv })
}

/// Atomically writes `name` under `dir`, creating the directory if needed.
pub fn write_output(dir: &Path, name: &str, contents: &[u8]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|source| ExperimentError::Io {
        path: dir.into(),
        source,
    })?;
    let path = dir.join(name);
    write_atomic(&path, contents).map_err(|source| ExperimentError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}
