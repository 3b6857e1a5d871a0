use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Base and novel category names of a benchmark split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub id: String,
    pub base: Vec<String>,
    pub novel: Vec<String>,
}

const BUILTIN: &[(&str, &str)] = &[
    ("48/17", include_str!("../../data/splits/coco_48_17.txt")),
    ("65/15", include_str!("../../data/splits/coco_65_15.txt")),
    ("synthetic", include_str!("../../data/splits/synthetic.txt")),
];

impl SplitSpec {
    pub fn new(id: impl Into<String>, base: Vec<String>, novel: Vec<String>) -> Result<Self> {
        let spec = SplitSpec {
            id: id.into(),
            base,
            novel,
        };
        spec.check("<memory>")?;
        Ok(spec)
    }

    /// Parses the split file format:
    ///
    /// ```text
    /// id = 48/17
    /// [base]
    /// person
    /// [novel]
    /// cat
    /// ```
    ///
    /// Blank lines and `#` comments are ignored.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut id = None;
        let mut base = Vec::new();
        let mut novel = Vec::new();
        let mut section: Option<bool> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let at = || format!("{origin}:{}", n + 1);
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line {
                "[base]" => section = Some(true),
                "[novel]" => section = Some(false),
                _ if line.starts_with('[') => {
                    return Err(Error::Parse {
                        path: at(),
                        message: format!("unknown section {line}"),
                    })
                }
                _ => match section {
                    None => match line.split_once('=') {
                        Some((k, v)) if k.trim() == "id" => id = Some(v.trim().to_string()),
                        _ => {
                            return Err(Error::Parse {
                                path: at(),
                                message: "expected `id = ...` before the first section".into(),
                            })
                        }
                    },
                    Some(true) => base.push(line.to_string()),
                    Some(false) => novel.push(line.to_string()),
                },
            }
        }
        let spec = SplitSpec {
            id: id.ok_or_else(|| Error::Parse {
                path: origin.into(),
                message: "missing `id`".into(),
            })?,
            base,
            novel,
        };
        spec.check(origin)?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// A split shipped with the crate: `48/17`, `65/15` or `synthetic`.
    pub fn builtin(id: &str) -> Option<Self> {
        BUILTIN
            .iter()
            .find(|(k, _)| *k == id)
            .map(|(k, text)| Self::parse(text, k).expect("shipped split files are valid"))
    }

    /// A builtin id or a path to a split file.
    pub fn resolve(id_or_path: &str) -> Result<Self> {
        match Self::builtin(id_or_path) {
            Some(s) => Ok(s),
            None => Self::load(Path::new(id_or_path)),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("id = {}\n\n[base]\n", self.id);
        for n in &self.base {
            out.push_str(n);
            out.push('\n');
        }
        out.push_str("\n[novel]\n");
        for n in &self.novel {
            out.push_str(n);
            out.push('\n');
        }
        out
    }

    pub fn is_base(&self, name: &str) -> bool {
        self.base.iter().any(|b| b == name)
    }

    pub fn is_novel(&self, name: &str) -> bool {
        self.novel.iter().any(|b| b == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.is_base(name) || self.is_novel(name)
    }

    fn check(&self, origin: &str) -> Result<()> {
        let fail = |message: String| {
            Err(Error::Parse {
                path: origin.into(),
                message,
            })
        };
        if self.base.is_empty() || self.novel.is_empty() {
            return fail("split needs at least one base and one novel category".into());
        }
        let mut all: Vec<&String> = self.base.iter().chain(&self.novel).collect();
        all.sort();
        if let Some(w) = all.windows(2).find(|w| w[0] == w[1]) {
            return fail(format!("category `{}` listed twice", w[0]));
        }
        Ok(())
    }
}
