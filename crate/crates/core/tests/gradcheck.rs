use cada::backbone::{BackboneConfig, DownsamplingFilterKind, SpatialFilterKind, StageConfig, Variant};
use cada::gradcheck::{attention_suite, layer_suite, model_check, GradCheck, TOLERANCE};

fn assert_all(results: &[GradCheck], tol: f64) {
    let mut failed = Vec::new();
    for r in results {
        if !r.passed(tol) || r.skipped * 10 > r.checked + r.skipped {
            failed.push(format!("{} max_rel={:.3e} checked={} skipped={}", r.name, r.max_rel, r.checked, r.skipped));
        }
    }
    assert!(failed.is_empty(), "gradient mismatches:\n{}", failed.join("\n"));
}

#[test]
fn layers_match_finite_differences() {
    let r = layer_suite(11).unwrap();
    assert_all(&r, TOLERANCE);
    let strict: Vec<GradCheck> = r.into_iter().filter(|r| r.name.starts_with("conv2d")).collect();
    assert_eq!(strict.len(), 4);
    assert_all(&strict, 1e-6);
}

#[test]
fn attention_matrix_matches_finite_differences() {
    let r = attention_suite(12).unwrap();
    assert!(r.len() > 288);
    assert_all(&r, TOLERANCE);
    let strict: Vec<GradCheck> = r.into_iter().filter(|r| r.name.starts_with("aggregate")).collect();
    assert_eq!(strict.len(), 12);
    assert_all(&strict, 1e-6);
}

fn tiny(filter: SpatialFilterKind) -> BackboneConfig {
    let mut c = BackboneConfig::toy(filter);
    c.stem_width = 2;
    c.input_hw = (12, 12);
    c.stages = vec![StageConfig::new(1, 4, 1, filter), StageConfig::new(1, 8, 2, filter)];
    for s in &mut c.stages {
        s.c_h = 2;
        s.b = 2;
    }
    c
}

#[test]
fn toy_backbones_match_finite_differences() {
    let mut results = Vec::new();
    for filter in [SpatialFilterKind::Conv3x3, SpatialFilterKind::MhDwConv, SpatialFilterKind::Cada, SpatialFilterKind::CadaSp, SpatialFilterKind::Da, SpatialFilterKind::DaSp] {
        let mut r = model_check(&tiny(filter), 2, 40, 5).unwrap();
        r.name = format!("model {filter}");
        results.push(r);
    }
    for (variant, down) in [
        (Variant::Original, DownsamplingFilterKind::None),
        (Variant::B, DownsamplingFilterKind::None),
        (Variant::E, DownsamplingFilterKind::Binomial3),
        (Variant::E, DownsamplingFilterKind::Ideal),
        (Variant::E, DownsamplingFilterKind::AvgPool(3)),
        (Variant::E, DownsamplingFilterKind::DwConv { k: 3, c_h: 2 }),
        (Variant::E, DownsamplingFilterKind::CadaSp { k: 3, t: 3, b: 2, c_h: Some(2) }),
    ] {
        let mut c = tiny(SpatialFilterKind::Cada);
        c.variant = variant;
        c.stages[1].downsample = down;
        let mut r = model_check(&c, 2, 40, 6).unwrap();
        r.name = format!("model {variant} {down}");
        results.push(r);
    }
    assert_all(&results, 1e-4);
}
