use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hierkd::inference::{class_probabilities, Vocabulary, VocabularyMode};
use hierkd::pipeline::{load_split_and_teacher, load_test};
use hierkd::run_config::RunConfig;
use hierkd::training::Checkpoint;

const DESK: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.ini");

fn hierkd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hierkd"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("HIERKD_DATA_ROOT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = hierkd(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// A small rendered dataset plus a short training run.
struct Workspace {
    _dir: tempfile::TempDir,
    data: PathBuf,
    run: PathBuf,
}

impl Workspace {
    fn sets(&self) -> Vec<String> {
        [
            format!("data.root={}", self.data.display()),
            "synth.train_images=8".into(),
            "synth.test_images=6".into(),
            "training.max_steps=3".into(),
            "training.batch_size=2".into(),
            "training.warmup_steps=1".into(),
            "gkd.enabled=true".into(),
        ]
        .into_iter()
        .flat_map(|s| ["--set".to_string(), s])
        .collect()
    }

    fn args<'a>(&'a self, head: &[&'a str], owned: &'a [String]) -> Vec<&'a str> {
        let mut v: Vec<&str> = head.to_vec();
        v.extend(["--config", DESK]);
        v.extend(owned.iter().map(String::as_str));
        v
    }

    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace {
            data: dir.path().join("data"),
            run: dir.path().join("run"),
            _dir: dir,
        };
        let sets = ws.sets();
        ok(&ws.args(&["synth-data"], &sets));
        ws
    }

    fn train(&self, out: &Path) {
        let sets = self.sets();
        let out = out.display().to_string();
        ok(&self.args(&["train", "--out", &out], &sets));
    }

    fn config(&self) -> RunConfig {
        let mut cfg = RunConfig::load(Path::new(DESK)).unwrap();
        cfg.apply_overrides(&self.sets().iter().skip(1).step_by(2).collect::<Vec<_>>()).unwrap();
        cfg
    }
}

#[test]
fn end_to_end_run_writes_its_artifacts() {
    let ws = Workspace::new();
    ws.train(&ws.run);
    for f in ["config.ini", "steps.log", "checkpoint.bin"] {
        assert!(ws.run.join(f).exists(), "missing {f}");
    }
    let sets = ws.sets();
    let run = ws.run.display().to_string();
    let ck = ws.run.join("checkpoint.bin").display().to_string();
    let out = ok(&ws.args(&["eval", "--out", &run, "--checkpoint", &ck, "--mode", "gzsd"], &sets));
    assert!(String::from_utf8_lossy(&out.stdout).contains("novel"));
    let kv = std::fs::read_to_string(ws.run.join("eval-gzsd-detector.kv")).unwrap();
    assert!(kv.contains("config_hash="));
    ok(&ws.args(&["eval", "--out", &run, "--method", "upper-bound"], &sets));
    ok(&ws.args(&["direct-infer", "--out", &run, "--checkpoint", &ck], &sets));
    assert!(ws.run.join("direct-detections-zsd.tsv").exists());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let ws = Workspace::new();
    let other = ws.run.with_file_name("again");
    ws.train(&ws.run);
    ws.train(&other);
    let read = |p: &Path, f: &str| std::fs::read(p.join(f)).unwrap();
    assert_eq!(read(&ws.run, "steps.log"), read(&other, "steps.log"));
    let sets = ws.sets();
    for dir in [&ws.run, &other] {
        let d = dir.display().to_string();
        let ck = dir.join("checkpoint.bin").display().to_string();
        ok(&ws.args(&["eval", "--out", &d, "--checkpoint", &ck], &sets));
    }
    assert_eq!(read(&ws.run, "eval-zsd-detector.kv"), read(&other, "eval-zsd-detector.kv"));
}

#[test]
fn vocabulary_mode_limits_inferred_categories() {
    let ws = Workspace::new();
    ws.train(&ws.run);
    let sets = ws.sets();
    let run = ws.run.display().to_string();
    let ck = ws.run.join("checkpoint.bin").display().to_string();
    let categories = |mode: &str| -> std::collections::BTreeSet<String> {
        ok(&ws.args(&["infer", "--out", &run, "--checkpoint", &ck, "--mode", mode], &sets));
        std::fs::read_to_string(ws.run.join(format!("detections-{mode}.tsv")))
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with('#'))
            .map(|l| l.split('\t').nth(1).unwrap().to_string())
            .collect()
    };
    let split = ws.config().data.load_split().unwrap();
    let zsd = categories("zsd");
    assert!(!zsd.is_empty());
    assert!(zsd.iter().all(|c| split.novel.contains(c)));
    let gzsd = categories("gzsd");
    assert!(gzsd.iter().all(|c| split.novel.contains(c) || split.base.contains(c)));
    assert!(gzsd.iter().any(|c| split.base.contains(c)));
}

#[test]
fn score_grids_equal_class_probabilities() {
    let ws = Workspace::new();
    ws.train(&ws.run);
    let cfg = ws.config();
    let (split, teacher) = load_split_and_teacher(&cfg).unwrap();
    let sample = load_test(&cfg, &split).unwrap().samples.remove(0);
    let id = sample.id.to_string();
    let sets = ws.sets();
    let run = ws.run.display().to_string();
    let ck = ws.run.join("checkpoint.bin");
    let ck_arg = ck.display().to_string();
    ok(&ws.args(&["plot-scores", "--out", &run, "--checkpoint", &ck_arg, "--image-id", &id, "--mode", "gzsd"], &sets));

    let detector = Checkpoint::load(&ck).unwrap().state.detector;
    let dense = detector.predict(&sample.image).unwrap();
    let vocab = Vocabulary::new(VocabularyMode::Gzsd, &split, &teacher).unwrap();
    let probs = class_probabilities(&dense, &vocab).unwrap();
    let dir = ws.run.join(format!("scores-{id}"));
    for (k, name) in vocab.names().iter().enumerate() {
        let slug: String = name.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
        for level in 0..dense.anchors.levels() {
            let text = std::fs::read_to_string(dir.join(format!("{slug}-level{level}.txt"))).unwrap();
            let values: Vec<f64> = text
                .lines()
                .filter(|l| !l.starts_with('#'))
                .flat_map(|l| l.split(' ').map(|v| v.parse::<f64>().unwrap()))
                .collect();
            let want: Vec<f64> = dense.anchors.level_range(level).map(|a| probs[a][k]).collect();
            assert_eq!(values, want, "{name} level {level}");
            assert!(dir.join(format!("{slug}-level{level}.png")).exists());
        }
    }
}

#[test]
fn configuration_errors_exit_with_code_two() {
    let out = hierkd(&["train", "--set", "training.no_such_key=1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = hierkd(&["train", "--set", "training.lr=fast"]);
    assert_eq!(out.status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ini");
    std::fs::write(&bad, "[nowhere]\nx = 1\n").unwrap();
    let out = hierkd(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));
}

#[test]
fn missing_checkpoint_is_an_error() {
    let ws = Workspace::new();
    let sets = ws.sets();
    let run = ws.run.display().to_string();
    let missing = ws.run.join("absent.bin").display().to_string();
    let out = hierkd(&ws.args(&["eval", "--out", &run, "--checkpoint", &missing], &sets));
    assert!(!out.status.success());
    assert_ne!(out.status.code(), Some(2));
    let out = hierkd(&ws.args(&["eval", "--out", &run], &sets));
    assert!(!out.status.success());
}
