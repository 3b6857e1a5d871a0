//! Dataset generation, training and evaluation helpers shared by the
//! pipeline tests and the acceptance run.
#![allow(dead_code)]

use std::path::Path;

use hierkd::data::generate_synthetic;
use hierkd::evaluation::EvalReport;
use hierkd::inference::VocabularyMode;
use hierkd::pipeline::{evaluate_method, load_split_and_teacher, load_test, load_train, run_training, Method};
use hierkd::run_config::RunConfig;
use hierkd::teacher::Teacher;
use hierkd::training::TrainState;

/// The shipped desk-scale configuration.
pub const DESK_INI: &str = include_str!("../../../../configs/desk.ini");

/// Desk configuration reading data from `root`.
pub fn desk_config(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::parse(DESK_INI, "configs/desk.ini").expect("desk config parses");
    cfg.data.root = root.to_path_buf();
    cfg
}

/// Renders the synthetic dataset described by `cfg.synth` under `root`.
pub fn render(cfg: &RunConfig, root: &Path) {
    generate_synthetic(&cfg.synth, root).expect("synthetic data renders");
}

/// The four training variants compared by the distillation ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    Instance,
    Global,
    Hierarchical,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Instance, Variant::Global, Variant::Hierarchical];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Instance => "instance-only",
            Variant::Global => "global-only",
            Variant::Hierarchical => "hierarchical",
        }
    }

    pub fn apply(self, cfg: &mut RunConfig) {
        cfg.ikd.enabled = matches!(self, Variant::Instance | Variant::Hierarchical);
        cfg.gkd.enabled = matches!(self, Variant::Global | Variant::Hierarchical);
    }
}

pub struct RunOutcome {
    pub state: TrainState,
    pub step_log: String,
    pub teacher_before: String,
    pub teacher_after: String,
}

/// Trains with `cfg`, recording every step line and the teacher checksum
/// before and after.
pub fn train(cfg: &RunConfig) -> RunOutcome {
    let (split, teacher) = load_split_and_teacher(cfg).expect("split and teacher load");
    let data = load_train(cfg, &split).expect("training data loads");
    let teacher_before = teacher.checksum();
    let mut step_log = String::new();
    let state = run_training(
        cfg,
        &teacher,
        &split,
        &data.samples,
        |r| {
            step_log.push_str(&r.to_log_line());
            step_log.push('\n');
            Ok(())
        },
        |_, _| Ok(()),
    )
    .expect("training succeeds");
    RunOutcome {
        state,
        step_log,
        teacher_after: teacher.checksum(),
        teacher_before,
    }
}

pub fn evaluate(cfg: &RunConfig, method: Method<'_>, mode: VocabularyMode) -> EvalReport {
    let (split, teacher) = load_split_and_teacher(cfg).expect("split and teacher load");
    let test = load_test(cfg, &split).expect("test data loads");
    evaluate_method(method, cfg, &teacher, &split, &test.samples, mode)
        .expect("evaluation succeeds")
        .0
}

/// Novel-category AP at IoU 0.5 in zero-shot mode, in points.
pub fn novel_ap50(cfg: &RunConfig, state: &TrainState) -> f64 {
    let report = evaluate(cfg, Method::Detector(&state.detector), VocabularyMode::Zsd);
    100.0 * report.map_novel.unwrap_or(0.0)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
