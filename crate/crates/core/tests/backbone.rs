use cada::analysis::profile;
use cada::backbone::{checkpoint, Backbone, BackboneConfig, DownsamplingFilterKind, SpatialFilterKind, Stem, Variant};
use cada::nn::{named_state, Initializer, Mode, Module};
use cada::tensor::{Shape, Tensor};
use cada::Error;
use proptest::prelude::*;

const FILTERS: [SpatialFilterKind; 6] = [
    SpatialFilterKind::Conv3x3,
    SpatialFilterKind::MhDwConv,
    SpatialFilterKind::Cada,
    SpatialFilterKind::CadaSp,
    SpatialFilterKind::Da,
    SpatialFilterKind::DaSp,
];

fn narrow(filter: SpatialFilterKind) -> BackboneConfig {
    let mut cfg = BackboneConfig::toy(filter);
    cfg.stem_width = 4;
    for (s, w) in cfg.stages.iter_mut().zip([4, 8, 8, 8]) {
        s.width = w;
        s.c_h = 2;
        s.b = 2;
    }
    cfg
}

fn input(shape: Shape, seed: u64) -> Tensor<f32> {
    Initializer::seeded(seed).normal(shape, 1.0)
}

#[test]
fn every_filter_yields_logits_of_the_same_shape() {
    let x = input(Shape::new(2, 3, 32, 32), 1);
    for filter in FILTERS {
        let mut model = Backbone::<f32>::build(&narrow(filter), 7).unwrap();
        let logits = model.forward(&x, Mode::Train).unwrap();
        assert_eq!(logits.shape(), Shape::new(2, 4, 1, 1), "{filter:?}");
        assert!(logits.is_finite());
    }
}

#[test]
fn stages_reduce_224_to_7() {
    let mut cfg = BackboneConfig::toy(SpatialFilterKind::MhDwConv);
    cfg.stem_width = 1;
    for s in &mut cfg.stages {
        s.width = 1;
        s.c_h = 1;
    }
    let mut model = Backbone::<f32>::build(&cfg, 0).unwrap();
    let mut h = model.stem.forward(&input(Shape::new(1, 3, 224, 224), 2), Mode::Eval).unwrap();
    assert_eq!(h.shape().h, 56);
    for stage in &mut model.stages {
        for block in &mut stage.blocks {
            h = block.forward(&h, Mode::Eval).unwrap();
        }
    }
    assert_eq!((h.shape().h, h.shape().w), (7, 7));
}

#[test]
fn eval_forward_is_deterministic() {
    let mut model = Backbone::<f32>::build(&narrow(SpatialFilterKind::Cada), 3).unwrap();
    let x = input(Shape::new(3, 3, 32, 32), 4);
    assert_eq!(model.forward(&x, Mode::Eval).unwrap(), model.forward(&x, Mode::Eval).unwrap());
}

#[test]
fn zero_input_yields_classifier_bias() {
    for filter in FILTERS {
        let mut model = Backbone::<f64>::build(&narrow(filter), 5).unwrap();
        model.fc.bias = Tensor::from_vec(Shape::new(4, 1, 1, 1), vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let logits = model.forward(&Tensor::zeros(Shape::new(2, 3, 32, 32)), Mode::Eval).unwrap();
        for n in 0..2 {
            assert_eq!(logits.sample(n), model.fc.bias.data(), "{filter:?}");
        }
    }
}

#[test]
fn variant_rules_are_enforced() {
    let mut cfg = narrow(SpatialFilterKind::Conv3x3);
    cfg.stages[1].downsample = DownsamplingFilterKind::Binomial3;
    let msg = Backbone::<f32>::build(&cfg, 0).unwrap_err().to_string();
    assert!(msg.contains("variant E"), "{msg}");

    cfg.variant = Variant::E;
    let msg = Backbone::<f32>::build(&cfg, 0).unwrap_err().to_string();
    assert!(msg.contains("stage 3"), "{msg}");
    for s in cfg.stages.iter_mut().filter(|s| s.stride == 2) {
        s.downsample = DownsamplingFilterKind::Ideal;
    }
    assert!(Backbone::<f32>::build(&cfg, 0).is_ok());

    let mut cfg = narrow(SpatialFilterKind::Cada);
    cfg.stages[0].c_h = 3;
    assert!(matches!(Backbone::<f32>::build(&cfg, 0), Err(Error::Config(_))));
    let mut cfg = narrow(SpatialFilterKind::Cada);
    cfg.stages[2].g = 4;
    assert!(Backbone::<f32>::build(&cfg, 0).unwrap_err().to_string().contains("odd"));
}

#[test]
fn variant_e_runs_with_each_downsampling_filter() {
    let kinds = [
        DownsamplingFilterKind::Ideal,
        DownsamplingFilterKind::Box,
        DownsamplingFilterKind::Binomial3,
        DownsamplingFilterKind::AvgPool(3),
        DownsamplingFilterKind::DwConv { k: 3, c_h: 1 },
        DownsamplingFilterKind::CadaSp { k: 3, t: 3, b: 2, c_h: None },
    ];
    let x = input(Shape::new(2, 3, 32, 32), 6);
    for kind in kinds {
        let mut cfg = narrow(SpatialFilterKind::Conv3x3);
        cfg.variant = Variant::E;
        cfg.stem = Stem::DeepNoMaxPool;
        for s in cfg.stages.iter_mut().filter(|s| s.stride == 2) {
            s.downsample = kind;
        }
        let mut model = Backbone::<f32>::build(&cfg, 8).unwrap();
        assert_eq!(model.forward(&x, Mode::Train).unwrap().shape(), Shape::new(2, 4, 1, 1), "{kind:?}");
    }
}

#[test]
fn skip_pooling_adds_no_counted_work() {
    for filter in [SpatialFilterKind::Conv3x3, SpatialFilterKind::Cada] {
        let d = profile(&BackboneConfig::resnet50(Variant::D, Stem::Deep, filter), (224, 224)).unwrap();
        let b = profile(&BackboneConfig::resnet50(Variant::B, Stem::Deep, filter), (224, 224)).unwrap();
        assert_eq!(d.total_flops(), b.total_flops());
        assert_eq!(d.total_params(), b.total_params());
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut model = Backbone::<f32>::build(&narrow(SpatialFilterKind::CadaSp), 9).unwrap();
    model.forward(&input(Shape::new(2, 3, 32, 32), 10), Mode::Train).unwrap();
    let bytes = checkpoint::to_bytes(&model);
    assert_eq!(&bytes[..4], b"CADA");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), checkpoint::VERSION);
    let back = checkpoint::from_bytes::<f32>(&bytes).unwrap();
    assert_eq!(back.config, model.config);
    assert_eq!(named_state(&back), named_state(&model));
    assert_eq!(checkpoint::to_bytes(&back), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.cada");
    checkpoint::save(&model, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(named_state(&checkpoint::load::<f32>(&path).unwrap()), named_state(&model));
}

#[test]
fn malformed_checkpoints_are_rejected() {
    let bytes = checkpoint::to_bytes(&Backbone::<f32>::build(&narrow(SpatialFilterKind::Da), 11).unwrap());
    let mut bad = bytes.clone();
    bad[4..8].copy_from_slice(&7u32.to_le_bytes());
    assert!(matches!(checkpoint::from_bytes::<f32>(&bad), Err(Error::Version { found: 7, .. })));
    assert!(matches!(checkpoint::from_bytes::<f32>(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
    assert!(matches!(checkpoint::from_bytes::<f32>(b"NOPE"), Err(Error::Checkpoint(_))));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(checkpoint::from_bytes::<f32>(&long), Err(Error::Checkpoint(_))));
    let missing = std::path::Path::new("/nonexistent/dir/m.cada");
    assert!(matches!(checkpoint::load::<f32>(missing), Err(Error::Io { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn logits_shape_is_independent_of_filter_and_batch(f in 0usize..6, n in 1usize..4, classes in 2usize..6, seed in any::<u64>()) {
        let mut cfg = narrow(FILTERS[f]);
        cfg.num_classes = classes;
        let mut model = Backbone::<f32>::build(&cfg, seed).unwrap();
        let logits = model.forward(&input(Shape::new(n, 3, 16, 16), seed ^ 1), Mode::Eval).unwrap();
        prop_assert_eq!(logits.shape(), Shape::new(n, classes, 1, 1));
        prop_assert!(logits.is_finite());
    }
}
