//! Benchmark protocol: top-1 evaluation, the five-method comparison under a
//! simulated camera, and the hue-rotation sweep.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::colorsim::Camera;
use crate::data::{batch_of, BenchSplits, Sample, Split, TestSplit};
use crate::error::{Error, Result};
use crate::models::{AdapterInit, AdapterNet, Backbone, Pipeline, RGB};
use crate::training::{fine_tune, fit, TrainConfig, TrainLog};

/// Samples per forward pass during evaluation. Fixed so results do not
/// depend on how many threads share the work.
pub const EVAL_CHUNK: usize = 250;

/// Environment variable overriding the evaluation thread count.
pub const THREADS_ENV: &str = "ADAPTERNET_THREADS";

pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

mod sealed {
    pub trait Sealed {}
    impl Sealed for crate::data::Split {}
    impl Sealed for crate::data::TestSplit {}
}

/// Data that may be scored. Implemented for [`Split`] and [`TestSplit`].
pub trait EvalSplit: sealed::Sealed {
    #[doc(hidden)]
    fn eval_samples(&self) -> &[Sample];
}

impl EvalSplit for Split {
    fn eval_samples(&self) -> &[Sample] {
        self.samples()
    }
}

impl EvalSplit for TestSplit {
    fn eval_samples(&self) -> &[Sample] {
        self.samples()
    }
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn predict_chunk(pipeline: &Pipeline<f32>, chunk: &[Sample]) -> Result<Vec<usize>> {
    let (images, _) = batch_of::<f32>(chunk.iter())?;
    let logits = pipeline.logits(&images)?;
    let k = logits.shape()[1];
    Ok(logits.data().chunks_exact(k).map(argmax).collect())
}

/// Predicted class per sample, in order.
pub fn predictions<S: EvalSplit + ?Sized>(
    pipeline: &Pipeline<f32>,
    split: &S,
) -> Result<Vec<usize>> {
    let chunks: Vec<&[Sample]> = split.eval_samples().chunks(EVAL_CHUNK).collect();
    let threads = thread_count().min(chunks.len()).max(1);
    if threads == 1 {
        return Ok(chunks
            .iter()
            .map(|c| predict_chunk(pipeline, c))
            .collect::<Result<Vec<_>>>()?
            .concat());
    }
    let mut results: Vec<Option<Result<Vec<usize>>>> = (0..chunks.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let chunks = &chunks;
                scope.spawn(move || {
                    (t..chunks.len())
                        .step_by(threads)
                        .map(|i| (i, predict_chunk(pipeline, chunks[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("evaluation thread panicked") {
                results[i] = Some(r);
            }
        }
    });
    Ok(results
        .into_iter()
        .map(|r| r.expect("every chunk evaluated"))
        .collect::<Result<Vec<_>>>()?
        .concat())
}

/// Fraction of samples whose top-scoring class is the label.
pub fn top1<S: EvalSplit + ?Sized>(pipeline: &Pipeline<f32>, split: &S) -> Result<f64> {
    let samples = split.eval_samples();
    if samples.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let preds = predictions(pipeline, split)?;
    let hits = preds
        .iter()
        .zip(samples)
        .filter(|(&p, s)| p == s.label as usize)
        .count();
    Ok(hits as f64 / samples.len() as f64)
}

/// Relative top-1 drop against the clean baseline, in percent.
pub fn drop_pct(clean_top1: f64, top1: f64) -> f64 {
    (clean_top1 - top1) / clean_top1 * 100.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    PureInference,
    /// Retrain the last N weight-bearing backbone layers.
    Finetune(usize),
    Adapter,
}

impl Method {
    pub const TABLE: [Method; 5] = [
        Method::PureInference,
        Method::Finetune(1),
        Method::Finetune(2),
        Method::Finetune(3),
        Method::Adapter,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pure_inference" => Ok(Method::PureInference),
            "adapter" => Ok(Method::Adapter),
            _ => s
                .strip_prefix("finetune_")
                .and_then(|n| n.parse().ok())
                .filter(|&n| n >= 1)
                .map(Method::Finetune)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown method `{s}`"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::PureInference => f.write_str("pure_inference"),
            Method::Finetune(n) => write!(f, "finetune_{n}"),
            Method::Adapter => f.write_str("adapter"),
        }
    }
}

/// Scores reported for the full-size ImageNet/VGG16 setting, kept alongside
/// desk-scale results for comparison only.
pub const IMAGENET_CLEAN_TOP1: f64 = 0.6546;

#[allow(clippy::approx_constant)]
pub fn imagenet_reference(camera: &Camera, method: Method) -> Option<f64> {
    let row = match camera {
        Camera::ColorRotation { theta } if *theta == 150.0 => {
            [0.4282, 0.4821, 0.5215, 0.4343, 0.631]
        }
        Camera::Power { exponents } if *exponents == [0.2, 0.3, 0.4] => {
            [0.4356, 0.4362, 0.5134, 0.4322, 0.6188]
        }
        _ => return None,
    };
    Method::TABLE
        .iter()
        .position(|&m| m == method)
        .map(|i| row[i])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub method: Method,
    pub scenario: Camera,
    pub top1: f64,
    pub drop_pct: f64,
    /// Indices of backbone parameter tensors that differ from the
    /// pre-trained weights after this method ran.
    pub changed_backbone_tensors: Vec<usize>,
    pub log: Option<TrainLog>,
}

/// Everything `run_table` needs besides the data.
#[derive(Debug, Clone)]
pub struct TableSetup {
    pub backbone: Backbone<f32>,
    pub channel_means: [f32; RGB],
    /// Top-1 of the backbone on the clean test split.
    pub clean_top1: f64,
    pub adapter_layers: usize,
    pub adapter_init: AdapterInit,
    pub adapter_cfg: TrainConfig,
    pub finetune_cfg: TrainConfig,
}

fn changed_tensors(before: &Backbone<f32>, after: &Backbone<f32>) -> Vec<usize> {
    before
        .param_digests()
        .iter()
        .zip(after.param_digests())
        .enumerate()
        .filter(|(_, (a, b))| *a != b)
        .map(|(i, _)| i)
        .collect()
}

/// Runs each method on `clean` data seen through `camera` and scores it
/// on the transformed test split.
pub fn run_table(
    setup: &TableSetup,
    clean: &BenchSplits,
    camera: &Camera,
    methods: &[Method],
) -> Result<Vec<ExperimentResult>> {
    if setup.clean_top1 <= 0.0 {
        return Err(Error::InvalidArgument(
            "clean baseline top-1 must be positive".into(),
        ));
    }
    let mut frozen = setup.backbone.clone();
    frozen.freeze();
    let data = clean.map_images(camera);
    let base = Pipeline::new(frozen.clone(), setup.channel_means);
    let mut out = Vec::with_capacity(methods.len());
    for &method in methods {
        let (pipeline, log) = match method {
            Method::PureInference => (base.clone(), None),
            Method::Finetune(n) => {
                let (tuned, log) = fine_tune(
                    &frozen,
                    setup.channel_means,
                    n,
                    &data.train,
                    &data.val,
                    &setup.finetune_cfg,
                )?;
                (Pipeline::new(tuned, setup.channel_means), Some(log))
            }
            Method::Adapter => {
                let adapter = AdapterNet::build(
                    setup.adapter_layers,
                    setup.adapter_init,
                    setup.adapter_cfg.seed,
                )?;
                let (trained, log) = fit(
                    base.clone().with_adapter(adapter),
                    &data.train,
                    &data.val,
                    &setup.adapter_cfg,
                )?;
                (trained, Some(log))
            }
        };
        let score = top1(&pipeline, &data.test)?;
        out.push(ExperimentResult {
            method,
            scenario: *camera,
            top1: score,
            drop_pct: drop_pct(setup.clean_top1, score),
            changed_backbone_tensors: changed_tensors(&frozen, &pipeline.backbone),
            log,
        });
    }
    Ok(out)
}

/// Aligned-text rendering of a results table.
pub fn report_text(
    camera: &Camera,
    clean_top1: f64,
    seed: u64,
    results: &[ExperimentResult],
) -> String {
    let mut s = String::new();
    writeln!(s, "scenario: {}", camera.label()).unwrap();
    writeln!(s, "seed: {seed}").unwrap();
    writeln!(s, "clean top-1: {clean_top1:.4}").unwrap();
    writeln!(s).unwrap();
    writeln!(
        s,
        "{:<16} {:>7} {:>8} {:>10} {:>14} {:>14}",
        "method", "top1", "drop%", "best_epoch", "changed_layers", "imagenet_ref"
    )
    .unwrap();
    for r in results {
        let best = r
            .log
            .as_ref()
            .map(|l| l.best_epoch.to_string())
            .unwrap_or_else(|| "-".into());
        let reference = imagenet_reference(&r.scenario, r.method)
            .map(|v| format!("{v:.4} ({:.1}%)", drop_pct(IMAGENET_CLEAN_TOP1, v)))
            .unwrap_or_else(|| "-".into());
        writeln!(
            s,
            "{:<16} {:>7.4} {:>8.2} {:>10} {:>14} {:>14}",
            r.method.to_string(),
            r.top1,
            r.drop_pct,
            best,
            layers_changed(&r.changed_backbone_tensors),
            reference
        )
        .unwrap();
    }
    s
}

/// Weight-bearing layers touched, counted from the output (1 = last layer).
fn layers_changed(tensors: &[usize]) -> String {
    if tensors.is_empty() {
        return "none".into();
    }
    let mut layers: Vec<usize> = tensors.iter().map(|t| t / 2).collect();
    layers.dedup();
    format!("{} layer(s)", layers.len())
}

pub fn report_csv(results: &[ExperimentResult]) -> String {
    let mut s =
        String::from("scenario,method,top1,drop_pct,best_epoch,epochs_run,changed_tensors\n");
    for r in results {
        let (best, run) = r
            .log
            .as_ref()
            .map(|l| (l.best_epoch.to_string(), l.epochs.len().to_string()))
            .unwrap_or_else(|| (String::new(), String::new()));
        let changed: Vec<String> = r
            .changed_backbone_tensors
            .iter()
            .map(|i| i.to_string())
            .collect();
        writeln!(
            s,
            "\"{}\",{},{:.6},{:.4},{},{},{}",
            r.scenario.label(),
            r.method,
            r.top1,
            r.drop_pct,
            best,
            run,
            changed.join(";")
        )
        .unwrap();
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub subset_size: usize,
    pub points: Vec<(f64, f64)>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("theta_deg,top1\n");
        for (t, v) in &self.points {
            writeln!(s, "{t},{v:.6}").unwrap();
        }
        s
    }

    /// The angle with the lowest top-1 (first one on ties).
    pub fn worst(&self) -> Option<(f64, f64)> {
        self.points.iter().copied().fold(None, |acc, p| match acc {
            Some(a) if a.1 <= p.1 => Some(a),
            _ => Some(p),
        })
    }
}

/// θ = 0, 30, …, 330.
pub fn default_thetas() -> Vec<f64> {
    (0..12).map(|i| i as f64 * 30.0).collect()
}

/// Scores `pipeline` on hue-rotated copies of the first `subset_size`
/// test samples for each angle.
pub fn angle_sweep(
    pipeline: &Pipeline<f32>,
    test: &TestSplit,
    thetas: &[f64],
    subset_size: usize,
) -> Result<SweepResult> {
    if thetas.is_empty() {
        return Err(Error::Empty("angle list"));
    }
    if thetas
        .windows(2)
        .any(|w| w[1].partial_cmp(&w[0]) != Some(std::cmp::Ordering::Greater))
    {
        return Err(Error::InvalidArgument(
            "sweep angles must be strictly increasing".into(),
        ));
    }
    if subset_size == 0 {
        return Err(Error::Empty("sweep subset"));
    }
    let subset = test.head(subset_size)?;
    let points = thetas
        .iter()
        .map(|&theta| {
            Ok((
                theta,
                top1(
                    pipeline,
                    &subset.map_images(&Camera::ColorRotation { theta }),
                )?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult {
        subset_size,
        points,
    })
}
