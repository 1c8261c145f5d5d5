use cada::analysis::{export_spectra, kernel_correlation, l1_prune, pearson, profile};
use cada::attention::BaseKernelBank;
use cada::backbone::{Backbone, BackboneConfig, DownsamplingFilterKind, SpatialFilter, SpatialFilterKind, Stem, Variant};
use cada::lowpass::Spectrum;
use cada::nn::{Conv2d, Initializer, Module};
use cada::analysis::ProfileReport;
use cada::tensor::Shape;
use cada::train::{Augment, Dataset, SyntheticParams};
use proptest::prelude::*;

fn bank(heads: usize, bases: usize, size: usize, seed: u64) -> BaseKernelBank<f64> {
    let mut init = Initializer::seeded(seed);
    let base = init.normal::<f64>(Shape::new(heads, bases, size, size), 1.0).into_vec();
    let pos = init.normal::<f64>(Shape::new(heads, 1, size, size), 1.0).into_vec();
    BaseKernelBank::from_parts(heads, bases, size, base, Some(pos)).unwrap()
}

fn textbook(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (sa, sb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
    let sab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let (saa, sbb) = (a.iter().map(|x| x * x).sum::<f64>(), b.iter().map(|y| y * y).sum::<f64>());
    (n * sab - sa * sb) / ((n * saa - sa * sa).sqrt() * (n * sbb - sb * sb).sqrt())
}

fn pruning_model(seed: u64) -> (Backbone<f32>, Dataset) {
    let mut cfg = BackboneConfig::toy(SpatialFilterKind::Cada);
    cfg.stem_width = 4;
    cfg.input_hw = (16, 16);
    for (s, w) in cfg.stages.iter_mut().zip([4, 8, 8, 8]) {
        s.width = w;
        s.c_h = 4;
        s.b = 2;
    }
    let p = SyntheticParams { train_samples: 4, val_samples: 40, hw: (16, 16), block: 4, ..SyntheticParams::default() };
    let (_, val) = Dataset::synthetic(&p, seed).unwrap();
    (Backbone::build(&cfg, seed).unwrap(), val)
}

#[test]
fn correlation_of_kernel_with_itself_and_negation() {
    let k = [0.3, -1.2, 0.5, 2.0];
    let neg: Vec<f64> = k.iter().map(|v| -v).collect();
    assert!((pearson(&k, &k).unwrap() - 1.0).abs() < 1e-12);
    assert!((pearson(&k, &neg).unwrap() + 1.0).abs() < 1e-12);
    assert_eq!(pearson(&k, &[1.0; 4]), None);
}

#[test]
fn correlation_matches_textbook_formula() {
    let b = bank(3, 4, 5, 1);
    let c = kernel_correlation(&b);
    assert!(!c.degenerate);
    for h in 0..3 {
        for i in 0..4 {
            assert!((c.pairwise[h][i][i] - 1.0).abs() < 1e-12);
            for j in 0..4 {
                assert!((c.pairwise[h][i][j] - textbook(b.kernel(h, i), b.kernel(h, j))).abs() < 1e-12);
                assert_eq!(c.pairwise[h][i][j], c.pairwise[h][j][i]);
            }
            assert!((c.with_pos[h][i] - textbook(b.kernel(h, i), b.pos_kernel(h))).abs() < 1e-12);
        }
    }
    assert!(c.mean_pairwise().unwrap().abs() < 1.0);
}

#[test]
fn zero_variance_kernels_are_flagged() {
    let mut b = bank(1, 3, 3, 2);
    b.kernel_mut(0, 1).fill(0.7);
    let c = kernel_correlation(&b);
    assert!(c.degenerate);
    assert_eq!(c.pairwise[0][1][2], 0.0);
    assert_eq!(c.with_pos[0][1], 0.0);
}

#[test]
fn single_pointwise_conv_hand_count() {
    let conv = Conv2d::<f32>::new(4, 4, 1, 1, 1, false, &mut Initializer::zeros()).unwrap();
    let mut r = ProfileReport::default();
    conv.profile("c", Shape::new(1, 4, 8, 8), &mut r).unwrap();
    assert_eq!((r.total_params(), r.total_flops()), (16, 1024));
}

#[test]
fn toy_attention_layer_hand_count() {
    // width 8, C_h 2 (4 heads), b 3, T 3, G 3, position encoding, 6×6 input
    let (hw, width, heads, b, t, g) = (36, 8, 4, 3, 3, 3);
    let aggregate = width * hw * g * g;
    for (kind, groups_a) in [(SpatialFilterKind::Cada, heads), (SpatialFilterKind::CadaSp, 1)] {
        let f = SpatialFilter::<f32>::build(kind, width, 1, b, 2, t, g, true, &mut Initializer::zeros()).unwrap();
        let mut r = ProfileReport::default();
        f.profile("f", Shape::new(1, width, 6, 6), &mut r).unwrap();
        let conv1_params = (groups_a * b) * (width / groups_a) * t * t;
        let bn = 2 * groups_a * b;
        let acc_params = heads * g * g * b + heads * g * g;
        let acc_flops = heads * g * g * b * hw;
        assert_eq!(r.total_params() as usize, conv1_params + bn + acc_params, "{kind:?}");
        assert_eq!(r.total_flops() as usize, conv1_params * hw + acc_flops + aggregate, "{kind:?}");
        assert_eq!(conv1_params, width * b * t * t);
    }
}

#[test]
fn disabling_position_encoding_removes_one_kernel_per_head() {
    let mut cfg = BackboneConfig::toy(SpatialFilterKind::Cada);
    let with = profile(&cfg, (32, 32)).unwrap();
    for s in &mut cfg.stages {
        s.pos = false;
    }
    let without = profile(&cfg, (32, 32)).unwrap();
    let expected: usize = cfg.stages.iter().map(|s| s.blocks * (s.width / s.c_h) * s.g * s.g).sum();
    assert_eq!((with.total_params() - without.total_params()) as usize, expected);
}

#[test]
fn profile_totals_are_column_sums_and_value_independent() {
    let cfg = BackboneConfig::resnet50(Variant::D, Stem::Deep, SpatialFilterKind::CadaSp);
    let r = profile(&cfg, (224, 224)).unwrap();
    assert_eq!(r.total_params(), r.rows.iter().map(|x| x.params).sum::<u64>());
    assert_eq!(r.total_flops(), r.rows.iter().map(|x| x.flops).sum::<u64>());
    let seeded = Backbone::<f32>::build(&cfg, 99).unwrap().profile_report((224, 224)).unwrap();
    assert_eq!(seeded, r);
    let csv = r.to_csv();
    assert!(csv.starts_with("layer,params,flops\n"));
    assert!(csv.ends_with(&format!("total,{},{}\n", r.total_params(), r.total_flops())));
}

#[test]
fn zero_kernel_is_pruned_first_without_cost() {
    let (mut model, val) = pruning_model(3);
    let name = {
        let mut banks = model.banks_mut();
        let (name, net) = &mut banks[1];
        net.bank_mut().zero_kernel(0, 1);
        name.clone()
    };
    let report = l1_prune(&mut model, &val, &Augment::default(), 8, 0.0).unwrap();
    assert!(report.removed >= 1);
    assert!(report.accuracy_after >= report.accuracy_before);
    let layer = report.layers.iter().find(|l| l.name == name).unwrap();
    assert!(layer.heads[0].0 < layer.heads[0].1);
}

#[test]
fn survivors_shrink_as_tolerance_grows() {
    let (model, val) = pruning_model(4);
    let params = profile(&model.config, (16, 16)).unwrap().total_params();
    let mut prev = usize::MAX;
    for tol in [0.0, 0.05, 0.2, 1.0] {
        let mut m = model.clone();
        let r = l1_prune(&mut m, &val, &Augment::default(), 8, tol).unwrap();
        assert!(r.accuracy_before - r.accuracy_after <= tol + 1e-12);
        assert!(r.layers.iter().all(|l| l.heads.iter().all(|&(s, b)| s <= b)));
        assert!(r.surviving() <= prev);
        prev = r.surviving();
        assert_eq!(profile(&m.config, (16, 16)).unwrap().total_params(), params);
        assert_eq!(r.to_csv().lines().count(), 1 + r.layers.iter().map(|l| l.heads.len()).sum::<usize>());
    }
    assert_eq!(prev, 0);
}

#[test]
fn pruning_preconditions() {
    let (mut model, val) = pruning_model(5);
    let empty = val.subset(&[]);
    assert!(l1_prune(&mut model, &empty, &Augment::default(), 8, 0.0).is_err());
    assert!(l1_prune(&mut model, &val, &Augment::default(), 8, -0.1).is_err());
    let mut plain = Backbone::<f32>::build(&BackboneConfig::toy(SpatialFilterKind::MhDwConv), 0).unwrap();
    assert!(l1_prune(&mut plain, &val, &Augment::default(), 8, 0.0).is_err());
}

#[test]
fn exported_spectra_match_analytic_responses_and_round_trip() {
    let mut cfg = BackboneConfig::toy(SpatialFilterKind::MhDwConv);
    cfg.variant = Variant::E;
    cfg.stem = Stem::DeepNoMaxPool;
    for s in cfg.stages.iter_mut().filter(|s| s.stride == 2) {
        s.downsample = DownsamplingFilterKind::DwConv { k: 3, c_h: 16 };
    }
    let mut model = Backbone::<f32>::build(&cfg, 6).unwrap();
    if let SpatialFilter::MhDw(d) = &mut model.stages[0].blocks[0].filter {
        d.weight.fill(0.0);
        let g = d.size();
        for h in 0..d.heads() {
            d.weight.data_mut()[h * g * g + g * g / 2] = 1.0;
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let files = export_spectra(&mut model, dir.path(), 16).unwrap();
    assert!(files.iter().any(|f| f.extension().unwrap() == "pgm"));

    let read = |name: &str| Spectrum::from_csv(&std::fs::read_to_string(dir.path().join(name)).unwrap()).unwrap();
    let blur = read("stage2.down.head0.csv");
    for r in 0..16 {
        for c in 0..16 {
            let expect = (1.0 + blur.frequency(r).cos()) / 2.0 * (1.0 + blur.frequency(c).cos()) / 2.0;
            assert!((blur.values[r * 16 + c] - expect).abs() < 1e-6);
        }
    }
    let flat = read("stage1.block1.filter.head0.csv");
    assert!(flat.values.iter().all(|v| (v - 1.0).abs() < 1e-12));

    for f in files.iter().filter(|f| f.extension().unwrap() == "csv") {
        let text = std::fs::read_to_string(f).unwrap();
        let s = Spectrum::from_csv(&text).unwrap();
        assert_eq!(s.to_csv(), text);
        assert_eq!(s.to_pgm(), std::fs::read(f.with_extension("pgm")).unwrap());
    }
}

#[test]
fn spectra_need_static_kernels() {
    let mut model = Backbone::<f32>::build(&BackboneConfig::toy(SpatialFilterKind::Cada), 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    assert!(export_spectra(&mut model, dir.path(), 16).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn correlation_matrix_is_symmetric_with_unit_diagonal(heads in 1usize..4, bases in 2usize..5, size in prop::sample::select(vec![3usize, 5]), seed in any::<u64>()) {
        let c = kernel_correlation(&bank(heads, bases, size, seed));
        for m in &c.pairwise {
            for i in 0..bases {
                prop_assert!((m[i][i] - 1.0).abs() < 1e-12);
                for j in 0..bases {
                    prop_assert_eq!(m[i][j], m[j][i]);
                    prop_assert!(m[i][j].abs() <= 1.0);
                }
            }
        }
    }

    #[test]
    fn profile_ignores_batch_values_and_seed(f in 0usize..6, seed in any::<u64>()) {
        let kinds = [
            SpatialFilterKind::Conv3x3, SpatialFilterKind::MhDwConv, SpatialFilterKind::Cada,
            SpatialFilterKind::CadaSp, SpatialFilterKind::Da, SpatialFilterKind::DaSp,
        ];
        let cfg = BackboneConfig::toy(kinds[f]);
        let a = Backbone::<f32>::build(&cfg, seed).unwrap().profile_report((32, 32)).unwrap();
        prop_assert_eq!(a, profile(&cfg, (32, 32)).unwrap());
    }
}
