//! The INI run configuration: top-level `seed` and `out`, then one
//! `[section]` per component. Overrides use dotted paths such as
//! `training.lr=0.02`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{invalid, parse, unknown, Section};
use crate::data::{CocoCategory, SplitSpec, SynthConfig};
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::gkd::GkdConfig;
use crate::ikd::IkdConfig;
use crate::teacher::{StubCategory, StubTeacher, StubTeacherConfig};
use crate::training::TrainingConfig;

/// Overrides `data.root` when set.
pub const DATA_ROOT_ENV: &str = "HIERKD_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub root: PathBuf,
    /// Builtin split id or path to a split file, relative to `root`.
    pub split: String,
    pub train_annotations: PathBuf,
    pub train_images: PathBuf,
    pub test_annotations: PathBuf,
    pub test_images: PathBuf,
    /// Use only the first this many training images when nonzero.
    pub max_train_images: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: PathBuf::from("data/synthetic"),
            split: "split.txt".into(),
            train_annotations: "train/annotations.json".into(),
            train_images: "train".into(),
            test_annotations: "test/annotations.json".into(),
            test_images: "test".into(),
            max_train_images: 0,
        }
    }
}

impl DataConfig {
    /// `root`, replaced by the environment override when present.
    pub fn effective_root(&self) -> PathBuf {
        match std::env::var_os(DATA_ROOT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.root.clone(),
        }
    }

    pub fn resolve(&self, relative: &Path) -> PathBuf {
        self.effective_root().join(relative)
    }

    pub fn load_split(&self) -> Result<SplitSpec> {
        match SplitSpec::builtin(&self.split) {
            Some(s) => Ok(s),
            None => SplitSpec::load(&self.resolve(Path::new(&self.split))),
        }
    }
}

impl Section for DataConfig {
    const NAME: &'static str = "data";

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("root", self.root.display().to_string()),
            ("split", self.split.clone()),
            ("train_annotations", self.train_annotations.display().to_string()),
            ("train_images", self.train_images.display().to_string()),
            ("test_annotations", self.test_annotations.display().to_string()),
            ("test_images", self.test_images.display().to_string()),
            ("max_train_images", self.max_train_images.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let s = Self::NAME;
        match key {
            "root" => self.root = value.into(),
            "split" => self.split = value.into(),
            "train_annotations" => self.train_annotations = value.into(),
            "train_images" => self.train_images = value.into(),
            "test_annotations" => self.test_annotations = value.into(),
            "test_images" => self.test_images = value.into(),
            "max_train_images" => self.max_train_images = parse(s, key, value)?,
            _ => return Err(unknown(s, key)),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.split.trim().is_empty() {
            return Err(invalid(Self::NAME, "split", "must not be empty"));
        }
        Ok(())
    }
}

/// Teacher backend settings. Only the deterministic stub is built in; its
/// palette comes from the dataset's category colors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSettings {
    pub backend: String,
    pub seed: u64,
    pub color_semantics: f64,
    pub max_rotation: f64,
    pub color_tolerance: f32,
    pub input_size: usize,
}

impl Default for TeacherSettings {
    fn default() -> Self {
        let stub = StubTeacherConfig::default();
        TeacherSettings {
            backend: "stub".into(),
            seed: stub.seed,
            color_semantics: stub.color_semantics,
            max_rotation: stub.max_rotation,
            color_tolerance: stub.color_tolerance,
            input_size: stub.input_size,
        }
    }
}

impl TeacherSettings {
    pub fn build(&self, dim: usize, categories: &[CocoCategory]) -> Result<StubTeacher> {
        let palette = categories
            .iter()
            .map(|c| {
                let color = c.color.ok_or_else(|| {
                    invalid(
                        Self::NAME,
                        "backend",
                        format!("the stub teacher needs a color for category `{}`", c.name),
                    )
                })?;
                Ok(StubCategory {
                    name: c.name.clone(),
                    color,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        StubTeacher::new(
            palette,
            StubTeacherConfig {
                dim,
                seed: self.seed,
                color_semantics: self.color_semantics,
                max_rotation: self.max_rotation,
                color_tolerance: self.color_tolerance,
                input_size: self.input_size,
            },
        )
    }
}

impl Section for TeacherSettings {
    const NAME: &'static str = "teacher";

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("backend", self.backend.clone()),
            ("seed", self.seed.to_string()),
            ("color_semantics", self.color_semantics.to_string()),
            ("max_rotation", self.max_rotation.to_string()),
            ("color_tolerance", self.color_tolerance.to_string()),
            ("input_size", self.input_size.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let s = Self::NAME;
        match key {
            "backend" => self.backend = value.into(),
            "seed" => self.seed = parse(s, key, value)?,
            "color_semantics" => self.color_semantics = parse(s, key, value)?,
            "max_rotation" => self.max_rotation = parse(s, key, value)?,
            "color_tolerance" => self.color_tolerance = parse(s, key, value)?,
            "input_size" => self.input_size = parse(s, key, value)?,
            _ => return Err(unknown(s, key)),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let s = Self::NAME;
        if self.backend != "stub" {
            return Err(invalid(s, "backend", "only `stub` is available"));
        }
        if !(0.0..=1.0).contains(&self.color_semantics) {
            return Err(invalid(s, "color_semantics", "must lie in [0, 1]"));
        }
        if !(self.max_rotation >= 0.0) {
            return Err(invalid(s, "max_rotation", "must be >= 0"));
        }
        if !(self.color_tolerance > 0.0) {
            return Err(invalid(s, "color_tolerance", "must be > 0"));
        }
        if self.input_size == 0 {
            return Err(invalid(s, "input_size", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub teacher: TeacherSettings,
    pub synth: SynthConfig,
    pub detector: DetectorConfig,
    pub ikd: IkdConfig,
    pub gkd: GkdConfig,
    pub training: TrainingConfig,
    pub evaluation: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            teacher: TeacherSettings::default(),
            synth: SynthConfig::default(),
            detector: DetectorConfig::default(),
            ikd: IkdConfig::default(),
            gkd: GkdConfig::default(),
            training: TrainingConfig::default(),
            evaluation: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SECTIONS.contains(&name) {
                    return Err(Error::config(format!("{origin}:{}", n + 1), format!("unknown section `{name}`")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("{origin}:{}", n + 1), "expected `key = value`"))?;
            let path = match &section {
                Some(s) => format!("{s}.{}", k.trim()),
                None => k.trim().to_string(),
            };
            cfg.assign(&path, v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Sets one dotted key (`seed`, `out` or `section.key`) without
    /// validating cross-field constraints.
    pub fn assign(&mut self, path: &str, value: &str) -> Result<()> {
        match path.split_once('.') {
            None => match path {
                "seed" => {
                    self.seed = value
                        .parse()
                        .map_err(|_| Error::config("seed", format!("`{value}` is not an integer")))?
                }
                "out" => self.out = value.into(),
                _ => return Err(Error::config(path, "unknown key")),
            },
            Some((section, key)) => match section {
                "data" => self.data.set(key, value)?,
                "teacher" => self.teacher.set(key, value)?,
                "synth" => self.synth.set(key, value)?,
                "detector" => self.detector.set(key, value)?,
                "ikd" => self.ikd.set(key, value)?,
                "gkd" => self.gkd.set(key, value)?,
                "training" => self.training.set(key, value)?,
                "evaluation" => self.evaluation.set(key, value)?,
                _ => return Err(Error::config(path, format!("unknown section `{section}`"))),
            },
        }
        Ok(())
    }

    /// Applies `section.key=value` overrides, then validates.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o, "expected `section.key=value`"))?;
            self.assign(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.teacher.validate()?;
        self.synth.validate()?;
        self.detector.validate()?;
        self.ikd.validate()?;
        self.gkd.validate()?;
        self.training.validate()?;
        self.evaluation.validate()
    }

    /// Canonical INI text; parsing it yields an equal configuration.
    pub fn to_ini(&self) -> String {
        let mut out = format!("seed = {}\nout = {}\n", self.seed, self.out.display());
        let mut section = |name: &str, body: String| {
            out.push_str(&format!("\n[{name}]\n{body}"));
        };
        section(DataConfig::NAME, self.data.to_kv_string());
        section(TeacherSettings::NAME, self.teacher.to_kv_string());
        section(SynthConfig::NAME, self.synth.to_kv_string());
        section(DetectorConfig::NAME, self.detector.to_kv_string());
        section(IkdConfig::NAME, self.ikd.to_kv_string());
        section(GkdConfig::NAME, self.gkd.to_kv_string());
        section(TrainingConfig::NAME, self.training.to_kv_string());
        section(EvalConfig::NAME, self.evaluation.to_kv_string());
        out
    }

    /// Digest of every setting that affects results. Output directory and
    /// data location are excluded.
    pub fn hash(&self) -> String {
        let mut canonical = RunConfig {
            out: PathBuf::new(),
            ..self.clone()
        };
        canonical.data.root = PathBuf::new();
        hex::encode(&Sha256::digest(canonical.to_ini().as_bytes())[..8])
    }
}

const SECTIONS: &[&str] = &["data", "teacher", "synth", "detector", "ikd", "gkd", "training", "evaluation"];
