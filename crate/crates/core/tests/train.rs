use cada::backbone::{checkpoint, Backbone, BackboneConfig, SpatialFilterKind};
use cada::nn::{named_state, zero_grad, Mode, Module, Rng};
use cada::tensor::Shape;
use cada::train::{
    cosine_lr, crop_flip, evaluate, make_batch, sgd_step, train_loop, Augment, Dataset, Sgd, SyntheticParams, TrainConfig, CHECKPOINT_FILE,
    METRICS_FILE,
};
use proptest::prelude::*;
use rand::SeedableRng;

fn tiny_model(seed: u64) -> Backbone<f32> {
    let mut cfg = BackboneConfig::toy(SpatialFilterKind::CadaSp);
    cfg.stem_width = 4;
    cfg.input_hw = (16, 16);
    for (s, w) in cfg.stages.iter_mut().zip([4, 8, 8, 8]) {
        s.width = w;
        s.c_h = 4;
        s.b = 2;
    }
    Backbone::build(&cfg, seed).unwrap()
}

fn tiny_data(seed: u64) -> (Dataset, Dataset) {
    let p = SyntheticParams { train_samples: 24, val_samples: 8, hw: (16, 16), block: 4, ..SyntheticParams::default() };
    Dataset::synthetic(&p, seed).unwrap()
}

fn tiny_config(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 8, seed: 3, ..TrainConfig::default() }
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(cosine_lr(0, 10, 0.1).unwrap(), 0.1);
    assert!(cosine_lr(10, 10, 0.1).unwrap().abs() < 1e-15);
    assert!((cosine_lr(5, 10, 0.1).unwrap() - 0.05).abs() < 1e-15);
    assert!(cosine_lr(0, 0, 0.1).is_err());
    assert!(cosine_lr(11, 10, 0.1).is_err());
}

#[test]
fn sgd_without_gradient_only_decays_velocity() {
    let (mut p, mut v) = (vec![1.5f64, -2.0], vec![0.4, -1.0]);
    sgd_step(&mut p, &[0.0, 0.0], &mut v, 0.0, 0.9, 0.0);
    assert_eq!(p, vec![1.5, -2.0]);
    assert!((v[0] - 0.36).abs() < 1e-15 && (v[1] + 0.9).abs() < 1e-15);
}

#[test]
fn sgd_without_momentum_is_gradient_descent() {
    let (mut p, mut v) = (vec![1.0f64, 2.0], vec![0.0; 2]);
    sgd_step(&mut p, &[0.5, -1.0], &mut v, 0.1, 0.0, 0.0);
    assert!((p[0] - 0.95).abs() < 1e-15 && (p[1] - 2.1).abs() < 1e-15);
}

#[test]
fn two_sgd_steps_match_hand_recurrence() {
    let (lr, mu, wd) = (0.1, 0.9, 0.01);
    let (mut p, mut v) = ([1.0f64], [0.0]);
    sgd_step(&mut p, &[2.0], &mut v, lr, mu, wd);
    // v1 = 2 + 0.01 = 2.01, p1 = 1 - 0.201 = 0.799
    assert!((v[0] - 2.01).abs() < 1e-14 && (p[0] - 0.799).abs() < 1e-14);
    sgd_step(&mut p, &[-1.0], &mut v, lr, mu, wd);
    // v2 = 0.9·2.01 − 1 + 0.00799 = 0.81699, p2 = 0.799 − 0.081699
    assert!((v[0] - 0.81699).abs() < 1e-14 && (p[0] - 0.717301).abs() < 1e-14);
}

#[test]
fn zero_gradients_without_decay_are_fixed_points() {
    let mut model = tiny_model(1);
    zero_grad(&mut model);
    let before = named_state(&model);
    let mut opt = Sgd::<f32>::new(0.9, 0.0, true);
    for _ in 0..3 {
        opt.step(&mut model, 0.1);
    }
    assert_eq!(named_state(&model), before);
}

#[test]
fn norm_and_bias_decay_can_be_switched_off() {
    let mut model = tiny_model(2);
    model.fc.bias.fill(1.0);
    zero_grad(&mut model);
    let w0 = model.fc.weight.clone();
    Sgd::<f32>::new(0.0, 0.1, false).step(&mut model, 1.0);
    assert!(model.fc.bias.data().iter().all(|&v| v == 1.0));
    assert!(model.fc.weight.max_abs_diff(&w0.scale(0.9)) < 1e-6);
    Sgd::<f32>::new(0.0, 0.1, true).step(&mut model, 1.0);
    assert!(model.fc.bias.data().iter().all(|&v| (v - 0.9).abs() < 1e-7));
}

#[test]
fn single_correct_sample_scores_one() {
    let mut model = tiny_model(4);
    let (train, _) = tiny_data(4);
    let one = train.subset(&[0]);
    let (x, _) = make_batch::<f32>(&one, &[0], &Augment::default(), None).unwrap();
    let logits = model.forward(&x, Mode::Eval).unwrap();
    let pred = (0..4).max_by(|&a, &b| logits.data()[a].total_cmp(&logits.data()[b])).unwrap();
    let ds = Dataset::new(one.images.clone(), vec![pred], 3, (16, 16), 4).unwrap();
    assert_eq!(evaluate(&mut model, &ds, &Augment::default(), 4).unwrap(), 1.0);
    let wrong = Dataset::new(one.images, vec![(pred + 1) % 4], 3, (16, 16), 4).unwrap();
    assert_eq!(evaluate(&mut model, &wrong, &Augment::default(), 4).unwrap(), 0.0);
}

#[test]
fn empty_sets_are_rejected() {
    let mut model = tiny_model(5);
    let empty = Dataset::new(vec![], vec![], 3, (16, 16), 4).unwrap();
    assert!(evaluate(&mut model, &empty, &Augment::default(), 4).is_err());
    let (train, _) = tiny_data(5);
    assert!(train_loop(&mut model, &train, &empty, &tiny_config(1), None).is_err());
}

#[test]
fn same_seed_gives_identical_histories_and_files() {
    let (train, val) = tiny_data(6);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let runs: Vec<_> = dirs
        .iter()
        .map(|d| {
            let mut model = tiny_model(6);
            let h = train_loop(&mut model, &train, &val, &tiny_config(2), Some(d.path())).unwrap();
            (h, named_state(&model))
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
    let h = &runs[0].0;
    assert_eq!(h.epochs.len(), 2);
    assert!(h.epochs.iter().all(|e| e.train_loss.is_finite() && (0.0..=1.0).contains(&e.val_top1)));
    let csv = std::fs::read_to_string(dirs[0].path().join(METRICS_FILE)).unwrap();
    assert_eq!(csv, h.to_csv());
    assert!(csv.starts_with("epoch,train_loss,val_top1,lr\n"));
    assert_eq!(std::fs::read(dirs[0].path().join(CHECKPOINT_FILE)).unwrap(), std::fs::read(dirs[1].path().join(CHECKPOINT_FILE)).unwrap());
    let restored = checkpoint::load::<f32>(&dirs[0].path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(named_state(&restored), runs[0].1);
}

#[test]
fn synthetic_data_is_seeded_and_labelled_in_range() {
    let (a, va) = tiny_data(7);
    let (b, _) = tiny_data(7);
    let (c, _) = tiny_data(8);
    assert_eq!(a, b);
    assert_ne!(a.images, c.images);
    assert_eq!((a.len(), va.len()), (24, 8));
    assert!(a.labels.iter().chain(&va.labels).all(|&l| l < 4));
    assert!(Dataset::new(vec![0.0; 3 * 16 * 16], vec![4], 3, (16, 16), 4).is_err());
}

#[test]
fn cifar_records_load_with_scaled_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.bin");
    let mut bytes = Vec::new();
    for label in [2u8, 0] {
        bytes.push(label);
        bytes.extend((0..3072).map(|i| (i % 256) as u8));
    }
    std::fs::write(&path, &bytes).unwrap();
    let ds = Dataset::load_cifar(&path, 10).unwrap();
    assert_eq!(ds.labels, vec![2, 0]);
    assert_eq!(ds.image(1)[255], 1.0);
    std::fs::write(&path, &bytes[..100]).unwrap();
    assert!(Dataset::load_cifar(&path, 10).is_err());
    assert!(Dataset::load_cifar(&dir.path().join("missing.bin"), 10).unwrap_err().to_string().contains("missing.bin"));
}

#[test]
fn batches_are_normalized_per_channel() {
    let ds = Dataset::new(vec![1.0, 3.0, 5.0, 7.0], vec![1], 2, (1, 2), 2).unwrap();
    let aug = Augment { crop_pad: 0, hflip: false, mean: vec![1.0, 5.0], std: vec![2.0, 1.0] };
    let (x, labels) = make_batch::<f64>(&ds, &[0], &aug, None).unwrap();
    assert_eq!(x.shape(), Shape::new(1, 2, 1, 2));
    assert_eq!(x.data(), &[0.0, 1.0, 0.0, 2.0]);
    assert_eq!(labels, vec![1]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cosine_is_bounded_and_non_increasing(total in 1usize..500, base in 0.0..1.0f64) {
        let mut prev = f64::INFINITY;
        for step in 0..=total {
            let lr = cosine_lr(step, total, base).unwrap();
            prop_assert!(lr >= -1e-15 && lr <= base + 1e-15 && lr <= prev + 1e-15);
            prev = lr;
        }
    }

    #[test]
    fn crop_and_flip_only_move_pixels(
        pad in 0usize..4, dy in 0usize..8, dx in 0usize..8, flip in any::<bool>(),
        img in prop::collection::vec(1.0f32..2.0, 2 * 5 * 6),
    ) {
        let (dy, dx) = (dy % (2 * pad + 1), dx % (2 * pad + 1));
        let out = crop_flip(&img, 2, (5, 6), pad, dy, dx, flip);
        prop_assert_eq!(out.len(), img.len());
        prop_assert!(out.iter().all(|v| *v == 0.0 || img.contains(v)));
        let (lo, hi) = img.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        prop_assert!(out.iter().all(|&v| v == 0.0 || (lo..=hi).contains(&v)));
        if pad == 0 {
            let mut a = out.clone();
            let mut b = img.clone();
            a.sort_by(f32::total_cmp);
            b.sort_by(f32::total_cmp);
            prop_assert_eq!(a, b);
            prop_assert_eq!(crop_flip(&out, 2, (5, 6), 0, 0, 0, flip), img);
        }
    }

    #[test]
    fn augmentation_keeps_labels(seed in any::<u64>()) {
        let (train, _) = tiny_data(9);
        let idx: Vec<usize> = (0..train.len()).rev().collect();
        let mut rng = Rng::seed_from_u64(seed);
        let (x, labels) = make_batch::<f32>(&train, &idx, &Augment::default(), Some(&mut rng)).unwrap();
        prop_assert_eq!(labels, idx.iter().map(|&i| train.labels[i]).collect::<Vec<_>>());
        prop_assert!(x.is_finite());
    }
}
