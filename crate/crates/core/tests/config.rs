use std::path::PathBuf;

use cada::backbone::{DownsamplingFilterKind, NormAct, SpatialFilterKind, Variant};
use cada::config::{parse_model_text, ExperimentConfig};
use cada::Error;
use proptest::prelude::*;

fn shipped() -> Vec<PathBuf> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut files: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files
}

#[test]
fn resolved_text_parses_back_to_the_same_config() {
    for path in shipped() {
        let cfg = ExperimentConfig::load(&path).unwrap();
        let text = cfg.to_text();
        let back = ExperimentConfig::parse(&text, "resolved").unwrap();
        assert_eq!(back, cfg, "{}", path.display());
        assert_eq!(back.to_text(), text);
    }
}

#[test]
fn single_stage_value_broadcasts_and_lists_are_per_stage() {
    let cfg = ExperimentConfig::parse("stages.blocks = 1,2,1\nstages.width = 8,16,32\nstages.stride = 1,2,2\nstages.filter = cada\nstages.ch = 4\n", "t").unwrap();
    let s = &cfg.model.stages;
    assert_eq!(s.len(), 3);
    assert_eq!(s.iter().map(|x| x.blocks).collect::<Vec<_>>(), vec![1, 2, 1]);
    assert!(s.iter().all(|x| x.filter == SpatialFilterKind::Cada && x.c_h == 4 && x.norm_act == NormAct::None));
}

#[test]
fn filter_choice_sets_its_default_norm_act_unless_overridden() {
    let conv = ExperimentConfig::parse("stages.filter = conv\n", "t").unwrap();
    assert!(conv.model.stages.iter().all(|s| s.norm_act == NormAct::BnRelu));
    let custom = ExperimentConfig::parse("stages.filter = mhdw\nstages.norm_act = bn\n", "t").unwrap();
    assert!(custom.model.stages.iter().all(|s| s.norm_act == NormAct::Bn));
}

#[test]
fn comments_blank_lines_and_overrides() {
    let text = "# header\n\nmodel.variant = e # trailing\nstages.downsample = none,binomial3,binomial3,binomial3\n";
    let cfg = ExperimentConfig::parse_with_overrides(text, "t", &["run.seed=12".into(), "stages.downsample=none,avgpool:3,avgpool:3,avgpool:3".into()]).unwrap();
    assert_eq!(cfg.model.variant, Variant::E);
    assert_eq!(cfg.seed(), 12);
    assert_eq!(cfg.model.stages[1].downsample, DownsamplingFilterKind::AvgPool(3));
}

#[test]
fn errors_name_origin_line_and_key() {
    match ExperimentConfig::parse("model.variant = d\n\ntrain.lr = fast\n", "exp.cfg") {
        Err(Error::Parse { origin, line, key, .. }) => assert_eq!((origin.as_str(), line, key.as_str()), ("exp.cfg", 3, "train.lr")),
        other => panic!("{other:?}"),
    }
    let e = ExperimentConfig::parse("model.colour = red\n", "x").unwrap_err().to_string();
    assert!(e.contains("x:1") && e.contains("model.colour") && e.contains("unknown key"), "{e}");
    let e = ExperimentConfig::parse("stages.width = 8,16\n", "x").unwrap_err().to_string();
    assert!(e.contains("stages.width") && e.contains("2 values"), "{e}");
    let e = ExperimentConfig::parse("stages.filter = conv,conv,nope,conv\n", "x").unwrap_err().to_string();
    assert!(e.contains("stage 3"), "{e}");
    assert!(ExperimentConfig::parse("just words\n", "x").is_err());
}

#[test]
fn semantic_violations_are_configuration_errors() {
    assert!(matches!(ExperimentConfig::parse("stages.filter = cada\nstages.g = 4\n", "x"), Err(Error::Config(_))));
    assert!(matches!(ExperimentConfig::parse("train.momentum = 1.5\n", "x"), Err(Error::Config(_))));
    assert!(matches!(ExperimentConfig::parse("stages.downsample = binomial3\n", "x"), Err(Error::Config(_))));
}

#[test]
fn model_text_alone_is_enough() {
    let cfg = ExperimentConfig::load(&shipped()[0]).unwrap();
    assert_eq!(parse_model_text(&model_text(&cfg)).unwrap(), cfg.model);
}

fn model_text(cfg: &ExperimentConfig) -> String {
    cada::config::model_to_text(&cfg.model)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn numeric_fields_round_trip(seed in any::<u64>(), lr in 0.0..10.0f64, wd in 0.0..1.0f64, noise in 0.0..10.0f64, epochs in 0usize..1000) {
        let text = format!("run.seed = {seed}\ntrain.lr = {lr}\ntrain.weight_decay = {wd}\ndata.noise = {noise}\ntrain.epochs = {epochs}\n");
        let cfg = ExperimentConfig::parse(&text, "p").unwrap();
        prop_assert_eq!((cfg.seed(), cfg.train.base_lr, cfg.train.weight_decay, cfg.data.noise, cfg.train.epochs), (seed, lr, wd, noise, epochs));
        prop_assert_eq!(ExperimentConfig::parse(&cfg.to_text(), "p").unwrap(), cfg);
    }
}
