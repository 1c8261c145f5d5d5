use std::path::PathBuf;

use cada::analysis::profile;
use cada::config::ExperimentConfig;

fn shipped(name: &str) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    ExperimentConfig::load(&path).unwrap()
}

fn totals(name: &str) -> (f64, f64) {
    let cfg = shipped(name);
    let r = profile(&cfg.model, cfg.model.input_hw).unwrap();
    (r.total_params() as f64 / 1e6, r.total_flops() as f64 / 1e9)
}

#[test]
fn every_shipped_config_parses_and_profiles() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for e in std::fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        let cfg = ExperimentConfig::load(&path).unwrap();
        let r = profile(&cfg.model, cfg.model.input_hw).unwrap();
        assert!(r.total_params() > 0 && r.total_flops() > 0, "{}", path.display());
    }
}

#[test]
fn resnet50_d_conv_has_torchvision_parameter_count() {
    let cfg = shipped("resnet50-d-conv.cfg");
    let r = profile(&cfg.model, (224, 224)).unwrap();
    // three 3x3 stem convs (864 + 9216 + 18432, BN 256) replace the 7x7 conv (9408, BN 128)
    assert_eq!(r.total_params(), 25_557_032 + 28_768 - 9_536);
}

#[test]
fn original_and_b_match_torchvision_parameter_count() {
    for name in ["resnet50-original.cfg", "resnet50-b.cfg"] {
        let cfg = shipped(name);
        assert_eq!(profile(&cfg.model, (224, 224)).unwrap().total_params(), 25_557_032);
    }
}

#[test]
fn stride_placement_only_moves_flops() {
    let (_, original) = totals("resnet50-original.cfg");
    let (_, b) = totals("resnet50-b.cfg");
    assert!(b > original);
}

#[test]
fn depthwise_and_attention_shrink_the_network() {
    let (conv, _) = totals("resnet50-d-conv.cfg");
    let (dw, _) = totals("resnet50-d-dw7.cfg");
    let (cada, _) = totals("resnet50-d-cada-b4.cfg");
    assert!(dw < cada && cada < conv);
}
