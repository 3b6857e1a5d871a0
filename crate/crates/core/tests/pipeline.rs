mod common;

use common::{desk_config, evaluate, render, train, Variant};
use hierkd::inference::VocabularyMode;
use hierkd::pipeline::Method;
use hierkd::run_config::RunConfig;

fn tiny(root: &std::path::Path) -> RunConfig {
    let mut cfg = desk_config(root);
    cfg.synth.train_images = 16;
    cfg.synth.test_images = 12;
    cfg.training.epochs = 1;
    cfg.training.max_steps = 6;
    cfg.training.warmup_steps = 2;
    cfg.training.batch_size = 2;
    cfg
}

#[test]
fn upper_bound_is_perfect_at_every_input_size() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.synth.test_images = 40;
    render(&cfg, dir.path());
    for size in [64, 224] {
        cfg.teacher.input_size = size;
        for mode in [VocabularyMode::Zsd, VocabularyMode::Gzsd, VocabularyMode::Base] {
            let report = evaluate(&cfg, Method::UpperBound, mode);
            assert_eq!(report.map_all, Some(1.0), "input {size}, mode {mode}");
        }
    }
}

#[test]
fn vocabulary_mode_restricts_categories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    render(&cfg, dir.path());
    let zsd = evaluate(&cfg, Method::UpperBound, VocabularyMode::Zsd);
    assert!(zsd.categories.iter().all(|c| c.novel));
    assert_eq!(zsd.map_base, None);
    let base = evaluate(&cfg, Method::UpperBound, VocabularyMode::Base);
    assert!(base.categories.iter().all(|c| !c.novel));
    let gzsd = evaluate(&cfg, Method::UpperBound, VocabularyMode::Gzsd);
    assert_eq!(gzsd.categories.len(), zsd.categories.len() + base.categories.len());
}

#[test]
fn training_is_deterministic_and_leaves_teacher_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    render(&cfg, dir.path());
    Variant::Hierarchical.apply(&mut cfg);
    let a = train(&cfg);
    let b = train(&cfg);
    assert_eq!(a.step_log.lines().count(), 6);
    assert_eq!(a.step_log, b.step_log);
    assert_eq!(a.teacher_before, a.teacher_after);
    let ra = evaluate(&cfg, Method::Detector(&a.state.detector), VocabularyMode::Gzsd);
    let rb = evaluate(&cfg, Method::Detector(&b.state.detector), VocabularyMode::Gzsd);
    assert_eq!(ra.to_kv(&[]), rb.to_kv(&[]));
    assert!(a.step_log.lines().all(|l| l.contains("num_distill=")));

    cfg.seed += 1;
    assert_ne!(train(&cfg).step_log, a.step_log);
}

#[test]
fn distillation_terms_follow_the_variant() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.training.max_steps = 2;
    render(&cfg, dir.path());
    let field = |log: &str, key: &str| -> f64 {
        log.lines()
            .map(|l| {
                let v = l.split(' ').find_map(|kv| kv.strip_prefix(&format!("{key}="))).unwrap();
                v.parse::<f64>().unwrap()
            })
            .sum()
    };
    for variant in Variant::ALL {
        variant.apply(&mut cfg);
        let log = train(&cfg).step_log;
        let ins = field(&log, "w_ins");
        let glo = field(&log, "w_glo");
        assert_eq!(ins > 0.0, cfg.ikd.enabled, "{}", variant.name());
        assert_eq!(glo > 0.0, cfg.gkd.enabled, "{}", variant.name());
    }
}
