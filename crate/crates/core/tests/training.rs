use adapternet::autodiff::{Optimizer, OptimizerKind};
use adapternet::bench::{argmax, top1};
use adapternet::colorsim::Camera;
use adapternet::data::{make_splits, BenchSplits, Sample, Split, SplitKind};
use adapternet::models::{images_to_tensor, AdapterNet, ArchConfig, Backbone, Pipeline};
use adapternet::synth::{generate_sets, SynthConfig};
use adapternet::training::{fine_tune, train_adapter, train_backbone, train_step, TrainConfig};
use adapternet::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 200 train / 40 val / 10 test images.
fn toy() -> BenchSplits {
    let cfg = SynthConfig {
        train_size: 0,
        pool_size: 250,
        seed: 3,
        ..SynthConfig::default()
    };
    let (_, pool) = generate_sets(&cfg);
    pool.split(&make_splits(250, [0.8, 0.16, 0.04]).unwrap())
        .unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 20,
        max_epochs: epochs,
        patience: epochs,
        ..TrainConfig::backbone_default()
    }
}

fn trained_toy() -> (BenchSplits, Backbone<f32>, [f32; 3]) {
    let splits = toy();
    let (bb, means, _) = train_backbone(
        &splits.train,
        &splits.val,
        &ArchConfig::small_vgg(),
        &quick(2),
    )
    .unwrap();
    (splits, bb, means)
}

/// Indices of parameter tensors whose digest differs.
fn changed(a: &Backbone<f32>, b: &Backbone<f32>) -> Vec<usize> {
    a.param_digests()
        .iter()
        .zip(b.param_digests())
        .enumerate()
        .filter(|(_, (x, y))| **x != *y)
        .map(|(i, _)| i)
        .collect()
}

#[test]
fn backbone_smoke_run() {
    let splits = toy();
    let (bb, means, log) = train_backbone(
        &splits.train,
        &splits.val,
        &ArchConfig::small_vgg(),
        &quick(2),
    )
    .unwrap();
    assert_eq!(log.epochs.len(), 2);
    assert!(
        log.epochs[1].train_loss < log.epochs[0].train_loss,
        "{log:?}"
    );
    if log.best_epoch > 0 {
        assert!(log.epochs[log.best_epoch].train_loss < log.epochs[0].train_loss);
    }
    assert!(means.iter().all(|m| (0.0..=1.0).contains(m)));
    assert!(bb.is_fully_frozen());

    let ln10 = 10f64.ln();
    assert!(
        (log.initial_loss - ln10).abs() < 0.1 * ln10,
        "initial loss {}",
        log.initial_loss
    );

    // the returned weights are the best epoch's
    let best = top1(&Pipeline::new(bb, means), &splits.val).unwrap();
    assert_eq!(best, log.best_val_top1);
    assert_eq!(
        log.best_val_top1,
        log.epochs
            .iter()
            .map(|e| e.val_top1)
            .fold(f64::MIN, f64::max)
    );
}

#[test]
fn same_seed_same_weights() {
    let splits = toy();
    let run = || {
        train_backbone(
            &splits.train,
            &splits.val,
            &ArchConfig::small_vgg(),
            &quick(1),
        )
        .unwrap()
    };
    let ((a, ma, la), (b, mb, lb)) = (run(), run());
    assert_eq!(a.param_digests(), b.param_digests());
    assert_eq!((ma, la), (mb, lb));
    let other = train_backbone(
        &splits.train,
        &splits.val,
        &ArchConfig::small_vgg(),
        &TrainConfig {
            seed: 1,
            ..quick(1)
        },
    )
    .unwrap();
    assert_ne!(a.param_digests(), other.0.param_digests());
}

#[test]
fn adapter_training_leaves_backbone_untouched() {
    let (splits, bb, means) = trained_toy();
    let clean = top1(&Pipeline::new(bb.clone(), means), &splits.val).unwrap();
    let pipe = Pipeline::new(bb.clone(), means).with_adapter(AdapterNet::identity(5).unwrap());
    let (adapter, _) = train_adapter(&pipe, &splits.train, &splits.val, &quick(2)).unwrap();
    let adapted = Pipeline::new(bb.clone(), means).with_adapter(adapter);
    assert!(changed(&bb, &adapted.backbone).is_empty());
    // on untransformed data the adapter has nothing to undo and should not hurt
    let after = top1(&adapted, &splits.val).unwrap();
    assert!(after >= clean - 0.02, "clean {clean}, adapted {after}");
}

#[test]
fn one_adapter_step_moves_only_the_adapter() {
    let (splits, bb, means) = trained_toy();
    let fresh = AdapterNet::<f32>::identity(3).unwrap();
    let mut pipe = Pipeline::new(bb.clone(), means).with_adapter(fresh.clone());
    let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-3).unwrap();
    let (images, labels) = splits
        .train
        .batches::<f32>(32, None)
        .unwrap()
        .next()
        .unwrap()
        .unwrap();
    let loss = train_step(&mut pipe, &mut opt, images, &labels).unwrap();
    assert!(loss > 0.0);
    assert!(changed(&bb, &pipe.backbone).is_empty());
    let before: Vec<_> = fresh.params().iter().map(|p| p.digest()).collect();
    let after: Vec<_> = pipe
        .adapter
        .unwrap()
        .params()
        .iter()
        .map(|p| p.digest())
        .collect();
    assert!(before.iter().zip(&after).any(|(x, y)| x != y));
}

#[test]
fn adapter_training_refuses_a_trainable_backbone() {
    let splits = toy();
    let bb = Backbone::<f32>::build(&ArchConfig::small_vgg(), 0).unwrap();
    let pipe = Pipeline::new(bb, [0.5; 3]).with_adapter(AdapterNet::identity(5).unwrap());
    let err = train_adapter(&pipe, &splits.train, &splits.val, &quick(1)).unwrap_err();
    assert!(matches!(err, Error::BackboneNotFrozen), "{err}");
}

#[test]
fn fine_tuning_changes_exactly_the_last_layers() {
    let (splits, bb, means) = trained_toy();
    let shifted = splits.map_images(&Camera::ColorRotation { theta: 150.0 });
    let tensors = bb.param_digests().len();
    for n in [1, 2] {
        let (tuned, log) =
            fine_tune(&bb, means, n, &shifted.train, &shifted.val, &quick(2)).unwrap();
        assert!(tuned.is_fully_frozen());
        // a best epoch exists, so at least one step was kept
        assert!(log.best_epoch < 2);
        let got = changed(&bb, &tuned);
        assert!(
            got.iter().all(|&i| i >= tensors - 2 * n),
            "n = {n}: changed {got:?}"
        );
        assert!(
            got.contains(&(tensors - 2)),
            "n = {n}: output weights untouched"
        );
    }
    for n in [0, 7] {
        assert!(fine_tune(&bb, means, n, &shifted.train, &shifted.val, &quick(1)).is_err());
    }
}

fn samples(n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| Sample {
            id: i as u32 + 1,
            label: rng.random_range(0..10),
            image: adapternet::colorsim::ImageU8::new(
                32,
                32,
                (0..32 * 32 * 3).map(|_| rng.random()).collect(),
            )
            .unwrap(),
        })
        .collect()
}

#[test]
fn top1_matches_per_sample_loop() {
    let pipe = Pipeline::new(
        Backbone::<f32>::build(&ArchConfig::small_vgg(), 5).unwrap(),
        [0.5; 3],
    );
    let data = samples(100, 1);
    let mut hits = 0;
    for s in &data {
        let logits = pipe
            .logits(&images_to_tensor(std::slice::from_ref(&s.image)).unwrap())
            .unwrap();
        let row = logits.data();
        let mut best = 0;
        for k in 1..row.len() {
            if row[k] > row[best] {
                best = k;
            }
        }
        hits += usize::from(best == s.label as usize);
    }
    let split = Split::new(SplitKind::Val, data);
    assert_eq!(top1(&pipe, &split).unwrap(), hits as f64 / 100.0);
}

#[test]
fn top1_single_correct_sample() {
    let pipe = Pipeline::new(
        Backbone::<f32>::build(&ArchConfig::small_vgg(), 2).unwrap(),
        [0.5; 3],
    );
    let mut s = samples(1, 9).remove(0);
    let logits = pipe
        .logits(&images_to_tensor(std::slice::from_ref(&s.image)).unwrap())
        .unwrap();
    s.label = argmax(logits.data()) as u8;
    assert_eq!(
        top1(&pipe, &Split::new(SplitKind::Val, vec![s])).unwrap(),
        1.0
    );
    assert!(top1(&pipe, &Split::new(SplitKind::Val, vec![])).is_err());
}

#[test]
fn constant_logits_score_chance() {
    let arch = ArchConfig::small_vgg();
    let zeros = arch
        .param_shapes()
        .unwrap()
        .iter()
        .map(|s| Tensor::zeros(s))
        .collect();
    let pipe = Pipeline::new(
        Backbone::<f32>::from_params(&arch, zeros).unwrap(),
        [0.5; 3],
    );
    let (_, pool) = generate_sets(&SynthConfig {
        train_size: 0,
        pool_size: 100,
        ..SynthConfig::default()
    });
    let split = Split::new(SplitKind::Val, pool.into_samples());
    assert_eq!(top1(&pipe, &split).unwrap(), 0.1);
}
