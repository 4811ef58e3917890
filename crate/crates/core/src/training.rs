//! Training loops: the backbone from scratch, the adapter against a frozen
//! backbone, and fine-tuning of the backbone's last layers.
//!
//! All three share one loop over a [`Pipeline`]; what differs is which
//! tensors have `requires_grad` set. Every loop early-stops on validation
//! top-1 and returns the best-epoch weights.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Optimizer, OptimizerKind, Tape};
use crate::bench::top1;
use crate::data::Split;
use crate::error::{Error, Result};
use crate::models::{AdapterNet, ArchConfig, Backbone, Pipeline, RGB};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn adapter_default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            batch_size: 64,
            max_epochs: 60,
            patience: 8,
            seed: 0,
        }
    }

    /// Same schedule as the adapter at a tenth of the backbone's rate.
    pub fn finetune_default() -> Self {
        Self {
            learning_rate: 1e-4,
            ..Self::adapter_default()
        }
    }

    pub fn backbone_default() -> Self {
        Self {
            max_epochs: 30,
            patience: 4,
            ..Self::adapter_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::InvalidArgument("patience must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidArgument("max_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Loss on the very first mini-batch, before any update.
    pub initial_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_top1: f64,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_top1\n");
        for e in &self.epochs {
            writeln!(out, "{},{:.6},{:.6}", e.epoch, e.train_loss, e.val_top1).unwrap();
        }
        out
    }

    /// True when some epoch after the best one scored strictly lower.
    pub fn declined_after_best(&self) -> bool {
        self.epochs
            .iter()
            .any(|e| e.epoch > self.best_epoch && e.val_top1 < self.best_val_top1)
    }
}

/// Shuffle seed for one epoch, derived from the run seed.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    // splitmix64 finalizer over (seed, epoch)
    let mut z = seed
        ^ (epoch as u64)
            .wrapping_add(1)
            .wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One optimizer step on every `requires_grad` tensor of the pipeline.
/// Returns the batch loss before the update.
pub fn train_step(
    pipeline: &mut Pipeline<f32>,
    optimizer: &mut Optimizer<f32>,
    images: Tensor<f32>,
    labels: &[usize],
) -> Result<f64> {
    let mut tape = Tape::new();
    let ap = pipeline
        .adapter
        .as_ref()
        .map(|a| a.bind(&mut tape))
        .unwrap_or_default();
    let bp = pipeline.backbone.bind(&mut tape);
    let x = tape.leaf_owned(images);
    let logits = pipeline.forward_bound(&mut tape, &ap, &bp, x)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    tape.backward(loss)?;

    let Pipeline {
        adapter, backbone, ..
    } = pipeline;
    let adapter_params = adapter.as_mut().map(|a| a.params_mut()).unwrap_or_default();
    let mut params: Vec<&mut Tensor<f32>> = Vec::new();
    for (p, &v) in adapter_params
        .into_iter()
        .zip(&ap)
        .chain(backbone.params_mut().into_iter().zip(&bp))
    {
        if p.requires_grad() {
            p.zero_grad();
            tape.accumulate_into(v, p)?;
            params.push(p);
        }
    }
    if params.is_empty() {
        return Err(Error::InvalidArgument(
            "nothing to train: every parameter is frozen".into(),
        ));
    }
    optimizer.step(&mut params)?;
    params.iter_mut().for_each(|p| p.zero_grad());
    Ok(tape.value(loss)[0] as f64)
}

/// Shared loop: trains whatever is unfrozen in `pipeline`, early-stopping
/// on validation top-1, and returns the best-epoch pipeline.
pub fn fit(
    mut pipeline: Pipeline<f32>,
    train: &Split,
    val: &Split,
    cfg: &TrainConfig,
) -> Result<(Pipeline<f32>, TrainLog)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate)?;
    let mut log = TrainLog {
        initial_loss: f64::NAN,
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_top1: f64::NEG_INFINITY,
    };
    let mut best = pipeline.clone();
    let mut since_best = 0;
    for epoch in 0..cfg.max_epochs {
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for batch in train.batches::<f32>(cfg.batch_size, Some(epoch_seed(cfg.seed, epoch)))? {
            let (images, labels) = batch?;
            let loss = train_step(&mut pipeline, &mut optimizer, images, &labels)?;
            if log.initial_loss.is_nan() {
                log.initial_loss = loss;
            }
            loss_sum += loss * labels.len() as f64;
            seen += labels.len();
        }
        let val_top1 = top1(&pipeline, val)?;
        log.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_top1,
        });
        if val_top1 > log.best_val_top1 {
            log.best_val_top1 = val_top1;
            log.best_epoch = epoch;
            best = pipeline.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok((best, log))
}

/// Per-channel means of the images in [0, 1].
pub fn channel_means(split: &Split) -> Result<[f32; RGB]> {
    if split.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let mut sums = [0u64; RGB];
    let mut pixels = 0u64;
    for s in split.samples() {
        for px in s.image.pixels().chunks_exact(RGB) {
            for (acc, &v) in sums.iter_mut().zip(px) {
                *acc += v as u64;
            }
        }
        pixels += (s.image.pixels().len() / RGB) as u64;
    }
    Ok(sums.map(|s| (s as f64 / pixels as f64 / 255.0) as f32))
}

/// Trains a fresh backbone on clean data. Returns it fully frozen, along
/// with the channel means it was trained with.
pub fn train_backbone(
    train: &Split,
    val: &Split,
    arch: &ArchConfig,
    cfg: &TrainConfig,
) -> Result<(Backbone<f32>, [f32; RGB], TrainLog)> {
    let means = channel_means(train)?;
    let backbone = Backbone::build(arch, cfg.seed)?;
    let (trained, log) = fit(Pipeline::new(backbone, means), train, val, cfg)?;
    let mut backbone = trained.backbone;
    backbone.freeze();
    Ok((backbone, means, log))
}

/// Trains `pipeline.adapter` with the backbone held fixed.
///
/// Refuses to run if any backbone tensor is trainable.
pub fn train_adapter(
    pipeline: &Pipeline<f32>,
    train: &Split,
    val: &Split,
    cfg: &TrainConfig,
) -> Result<(AdapterNet<f32>, TrainLog)> {
    if !pipeline.backbone.is_fully_frozen() {
        return Err(Error::BackboneNotFrozen);
    }
    if pipeline.adapter.is_none() {
        return Err(Error::InvalidArgument(
            "pipeline has no adapter to train".into(),
        ));
    }
    let (trained, log) = fit(pipeline.clone(), train, val, cfg)?;
    Ok((trained.adapter.expect("adapter present"), log))
}

/// Retrains the last `n_last` weight-bearing layers of a pre-trained
/// backbone. The result comes back fully frozen.
pub fn fine_tune(
    backbone: &Backbone<f32>,
    channel_means: [f32; RGB],
    n_last: usize,
    train: &Split,
    val: &Split,
    cfg: &TrainConfig,
) -> Result<(Backbone<f32>, TrainLog)> {
    let total = backbone.num_trainable_layers();
    if n_last < 1 || n_last > total {
        return Err(Error::InvalidArgument(format!(
            "fine-tune depth {n_last} outside 1..={total}"
        )));
    }
    let mut backbone = backbone.clone();
    backbone.set_trainable_last(n_last)?;
    let (trained, log) = fit(Pipeline::new(backbone, channel_means), train, val, cfg)?;
    let mut backbone = trained.backbone;
    backbone.freeze();
    Ok((backbone, log))
}
