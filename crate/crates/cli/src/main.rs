use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use hierkd::data::generate_synthetic;
use hierkd::inference::{class_probabilities, write_detections, Vocabulary, VocabularyMode};
use hierkd::pipeline::{evaluate_method, load_split_and_teacher, load_test, load_train, run_training, Method};
use hierkd::run_config::RunConfig;
use hierkd::teacher::Teacher;
use hierkd::training::Checkpoint;
use hierkd::{Error, Result};

#[derive(Parser)]
#[command(name = "hierkd", version, about = "Open-vocabulary detection with hierarchical distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// INI run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Builtin split id or split file.
    #[arg(long)]
    split: Option<String>,
    /// `section.key=value`, repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Zsd,
    Gzsd,
    Base,
}

impl From<Mode> for VocabularyMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Zsd => VocabularyMode::Zsd,
            Mode::Gzsd => VocabularyMode::Gzsd,
            Mode::Base => VocabularyMode::Base,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvalMethod {
    Detector,
    Direct,
    UpperBound,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic shapes dataset into the data root (or --out).
    SynthData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a detector; writes checkpoints and a per-step loss log.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate on the test set; writes a report table and a key=value file.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "zsd")]
        mode: Mode,
        #[arg(long, value_enum, default_value = "detector")]
        method: EvalMethod,
    },
    /// Write detector detections for the test set.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "zsd")]
        mode: Mode,
    },
    /// Write teacher-classified detections for the test set.
    DirectInfer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "zsd")]
        mode: Mode,
    },
    /// Per-level classification-score grids for one test image.
    PlotScores {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image_id: u64,
        /// Category to plot; every category of the vocabulary when omitted.
        #[arg(long)]
        category: Option<String>,
        #[arg(long, value_enum, default_value = "zsd")]
        mode: Mode,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    if let Some(s) = &c.split {
        cfg.data.split = s.clone();
    }
    cfg.apply_overrides(&c.overrides)?;
    Ok(cfg)
}

fn header(cfg: &RunConfig) -> Vec<(&'static str, String)> {
    vec![("config_hash", cfg.hash()), ("seed", cfg.seed.to_string())]
}

fn header_text(cfg: &RunConfig) -> String {
    header(cfg).iter().map(|(k, v)| format!("# {k}={v}\n")).collect()
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write(p: &Path, text: &str) -> Result<()> {
    std::fs::write(p, text).map_err(|e| Error::io(p, e))
}

fn load_checkpoint(path: &Path, cfg: &RunConfig) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    if ck.config_hash != cfg.hash() {
        warn!(
            "checkpoint was trained with config {} but the current config hashes to {}",
            ck.config_hash,
            cfg.hash()
        );
    }
    Ok(ck)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::SynthData { common } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.synth.seed = s;
            }
            let root = match &common.out {
                Some(o) => o.clone(),
                None => cfg.data.effective_root(),
            };
            let split = generate_synthetic(&cfg.synth, &root)?;
            info!("wrote synthetic split `{}` to {}", split.id, root.display());
            Ok(())
        }
        Command::Train { common } => train(&load_config(&common)?),
        Command::Eval {
            common,
            checkpoint,
            mode,
            method,
        } => {
            let cfg = load_config(&common)?;
            let ck = match (&checkpoint, method) {
                (Some(p), _) => Some(load_checkpoint(p, &cfg)?),
                (None, EvalMethod::UpperBound) => None,
                (None, _) => return Err(Error::Checkpoint("--checkpoint is required for this method".into())),
            };
            let method = match (method, &ck) {
                (EvalMethod::UpperBound, _) => Method::UpperBound,
                (EvalMethod::Detector, Some(c)) => Method::Detector(&c.state.detector),
                (EvalMethod::Direct, Some(c)) => Method::Direct(&c.state.detector),
                _ => unreachable!("checkpoint presence checked above"),
            };
            evaluate(&cfg, method, mode.into())
        }
        Command::Infer {
            common,
            checkpoint,
            mode,
        } => {
            let cfg = load_config(&common)?;
            let ck = load_checkpoint(&checkpoint, &cfg)?;
            dump(&cfg, Method::Detector(&ck.state.detector), mode.into(), "detections")
        }
        Command::DirectInfer {
            common,
            checkpoint,
            mode,
        } => {
            let cfg = load_config(&common)?;
            let ck = load_checkpoint(&checkpoint, &cfg)?;
            dump(&cfg, Method::Direct(&ck.state.detector), mode.into(), "direct-detections")
        }
        Command::PlotScores {
            common,
            checkpoint,
            image_id,
            category,
            mode,
        } => {
            let cfg = load_config(&common)?;
            let ck = load_checkpoint(&checkpoint, &cfg)?;
            plot_scores(&cfg, &ck, image_id, category.as_deref(), mode.into())
        }
    }
}

fn train(cfg: &RunConfig) -> Result<()> {
    let (split, teacher) = load_split_and_teacher(cfg)?;
    let train_set = load_train(cfg, &split)?;
    create_dir(&cfg.out)?;
    write(&cfg.out.join("config.ini"), &format!("{}{}", header_text(cfg), cfg.to_ini()))?;
    let checksum = teacher.checksum();
    let mut log = header_text(cfg);
    let log_path = cfg.out.join("steps.log");
    let hash = cfg.hash();
    let every = cfg.training.checkpoint_every;
    let out = cfg.out.clone();
    info!("training on {} images", train_set.samples.len());
    let state = run_training(
        cfg,
        &teacher,
        &split,
        &train_set.samples,
        |r| {
            log.push_str(&r.to_log_line());
            log.push('\n');
            if r.step % 50 == 0 {
                info!("step {} total {:.4}", r.step, r.loss.total);
            }
            Ok(())
        },
        |epoch, state| {
            if every > 0 && epoch % every == 0 {
                Checkpoint::save(&out.join(format!("checkpoint-epoch{epoch}.bin")), state, &hash)?;
            }
            Ok(())
        },
    )?;
    write(&log_path, &log)?;
    Checkpoint::save(&cfg.out.join("checkpoint.bin"), &state, &hash)?;
    if teacher.checksum() != checksum {
        return Err(Error::Checkpoint("teacher parameters changed during training".into()));
    }
    info!("wrote {}", cfg.out.join("checkpoint.bin").display());
    Ok(())
}

fn method_tag(method: &Method<'_>) -> &'static str {
    match method {
        Method::Detector(_) => "detector",
        Method::Direct(_) => "direct",
        Method::UpperBound => "upper-bound",
    }
}

fn evaluate(cfg: &RunConfig, method: Method<'_>, mode: VocabularyMode) -> Result<()> {
    let (split, teacher) = load_split_and_teacher(cfg)?;
    let test = load_test(cfg, &split)?;
    let (report, _) = evaluate_method(method, cfg, &teacher, &split, &test.samples, mode)?;
    create_dir(&cfg.out)?;
    let stem = format!("eval-{mode}-{}", method_tag(&method));
    let mut head = header(cfg);
    head.push(("method", method_tag(&method).to_string()));
    write(&cfg.out.join(format!("{stem}.kv")), &report.to_kv(&head))?;
    let table = format!("{}{}", header_text(cfg), report.to_table());
    write(&cfg.out.join(format!("{stem}.txt")), &table)?;
    print!("{}", report.to_table());
    Ok(())
}

fn dump(cfg: &RunConfig, method: Method<'_>, mode: VocabularyMode, stem: &str) -> Result<()> {
    let (split, teacher) = load_split_and_teacher(cfg)?;
    let test = load_test(cfg, &split)?;
    let (_, dets) = evaluate_method(method, cfg, &teacher, &split, &test.samples, mode)?;
    let vocab = Vocabulary::new(mode, &split, &teacher)?;
    create_dir(&cfg.out)?;
    let path = cfg.out.join(format!("{stem}-{mode}.tsv"));
    let mut head = header(cfg);
    head.push(("mode", mode.to_string()));
    write_detections(&path, &dets, vocab.names(), &head)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

fn plot_scores(
    cfg: &RunConfig,
    ck: &Checkpoint,
    image_id: u64,
    category: Option<&str>,
    mode: VocabularyMode,
) -> Result<()> {
    let (split, teacher) = load_split_and_teacher(cfg)?;
    let test = load_test(cfg, &split)?;
    let sample = test
        .samples
        .iter()
        .find(|s| s.id == image_id)
        .ok_or_else(|| Error::InvalidArgument(format!("no test image with id {image_id}")))?;
    let vocab = Vocabulary::new(mode, &split, &teacher)?;
    let wanted: Vec<usize> = match category {
        Some(name) => vec![vocab
            .index(name)
            .ok_or_else(|| Error::UnknownCategory(name.to_string()))?],
        None => (0..vocab.len()).collect(),
    };
    let dense = ck.state.detector.predict(&sample.image)?;
    let probs = class_probabilities(&dense, &vocab)?;
    let dir = cfg.out.join(format!("scores-{image_id}"));
    create_dir(&dir)?;
    for k in wanted {
        let name = slug(&vocab.names()[k]);
        for level in 0..dense.anchors.levels() {
            let (h, w) = dense.anchors.level_shape(level);
            let range = dense.anchors.level_range(level);
            let grid: Vec<f64> = range.map(|a| probs[a][k]).collect();
            let mut text = header_text(cfg);
            text.push_str(&format!(
                "# image_id={image_id}\n# category={}\n# level={level}\n# rows={h}\n# cols={w}\n",
                vocab.names()[k]
            ));
            for row in grid.chunks(w) {
                let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                text.push_str(&cells.join(" "));
                text.push('\n');
            }
            let stem = dir.join(format!("{name}-level{level}"));
            write(&stem.with_extension("txt"), &text)?;
            render_heatmap(&grid, h, w, &stem.with_extension("png"))?;
        }
    }
    info!("wrote score grids to {}", dir.display());
    Ok(())
}

/// Black-red-yellow-white ramp over [0, 1], each cell drawn as a square.
fn render_heatmap(grid: &[f64], h: usize, w: usize, path: &Path) -> Result<()> {
    let cell = (256 / h.max(w)).max(1) as u32;
    let img = image::RgbImage::from_fn(w as u32 * cell, h as u32 * cell, |x, y| {
        let v = grid[(y / cell) as usize * w + (x / cell) as usize].clamp(0.0, 1.0);
        let channel = |lo: f64| ((v * 3.0 - lo).clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([channel(0.0), channel(1.0), channel(2.0)])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
