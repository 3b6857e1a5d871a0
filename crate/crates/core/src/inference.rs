//! Vocabulary selection, detection decoding, teacher-classified direct
//! inference and the ground-truth upper bound.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use crate::data::SplitSpec;
use crate::detector::{softmax, DenseOutput, Detector};
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::geometry::{detection_order, nms, BBox, Detection, Image};
use crate::teacher::{dot, encode_categories, encode_region, EmbeddingTable, Teacher};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VocabularyMode {
    /// Novel categories only.
    Zsd,
    /// Base followed by novel categories.
    Gzsd,
    /// Base categories only.
    Base,
}

impl fmt::Display for VocabularyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VocabularyMode::Zsd => "zsd",
            VocabularyMode::Gzsd => "gzsd",
            VocabularyMode::Base => "base",
        })
    }
}

impl FromStr for VocabularyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "zsd" => Ok(VocabularyMode::Zsd),
            "gzsd" => Ok(VocabularyMode::Gzsd),
            "base" => Ok(VocabularyMode::Base),
            _ => Err(Error::InvalidArgument(format!("unknown mode `{s}` (expected zsd, gzsd or base)"))),
        }
    }
}

/// The active category set with its text-embedding table. The background
/// row is supplied by the detector.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    pub mode: VocabularyMode,
    pub novel: Vec<bool>,
    pub table: EmbeddingTable,
}

impl Vocabulary {
    pub fn new(mode: VocabularyMode, split: &SplitSpec, teacher: &dyn Teacher) -> Result<Self> {
        let (names, novel): (Vec<String>, Vec<bool>) = match mode {
            VocabularyMode::Zsd => (split.novel.clone(), vec![true; split.novel.len()]),
            VocabularyMode::Base => (split.base.clone(), vec![false; split.base.len()]),
            VocabularyMode::Gzsd => {
                let mut names = split.base.clone();
                names.extend(split.novel.iter().cloned());
                let mut flags = vec![false; split.base.len()];
                flags.extend(vec![true; split.novel.len()]);
                (names, flags)
            }
        };
        Ok(Vocabulary {
            mode,
            novel,
            table: encode_categories(&names, teacher)?,
        })
    }

    pub fn names(&self) -> &[String] {
        self.table.names()
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.table.position(name)
    }
}

/// Per-anchor probabilities over the vocabulary plus background (last).
pub fn class_probabilities(dense: &DenseOutput, vocab: &Vocabulary) -> Result<Vec<Vec<f64>>> {
    dense.probabilities(&vocab.table)
}

/// Decodes dense predictions: score = class probability × predicted IoU,
/// background never emitted, boxes clipped to the image, then score
/// filtering, a pre-NMS cap, class-wise NMS and the per-image cap.
pub fn decode_detections(
    dense: &DenseOutput,
    vocab: &Vocabulary,
    width: usize,
    height: usize,
    config: &EvalConfig,
) -> Result<Vec<Detection>> {
    let probs = class_probabilities(dense, vocab)?;
    let mut cands = Vec::new();
    for (a, p) in probs.iter().enumerate() {
        let bbox = dense.boxes[a].clip(width as f64, height as f64);
        if bbox.area() <= 0.0 {
            continue;
        }
        for (k, &pk) in p[..vocab.len()].iter().enumerate() {
            let score = pk * dense.quality[a];
            if score > config.score_threshold {
                cands.push(Detection { bbox, category: k, score });
            }
        }
    }
    cands.sort_by(detection_order);
    cands.truncate(config.pre_nms_top);
    let mut kept = nms(&cands, config.nms_threshold);
    kept.truncate(config.max_detections);
    Ok(kept)
}

pub fn detect(detector: &Detector, image: &Image, vocab: &Vocabulary, config: &EvalConfig) -> Result<Vec<Detection>> {
    let dense = detector.predict(image)?;
    decode_detections(&dense, vocab, image.width(), image.height(), config)
}

/// Teacher re-classification of the detector's `k` best foreground anchors.
///
/// Anchors are ranked by (best class probability over `vocab`) × predicted
/// IoU; each selected anchor's predicted box is encoded by the teacher and
/// classified by a softmax over `tau · table · v`. Every category is
/// emitted with its softmax score, then class-wise NMS runs.
pub fn direct_inference_dense(
    dense: &DenseOutput,
    image: &Image,
    teacher: &dyn Teacher,
    vocab: &Vocabulary,
    k: usize,
    tau: f64,
    expansion: f64,
    config: &EvalConfig,
) -> Result<Vec<Detection>> {
    if k == 0 {
        return Err(Error::InvalidArgument("direct inference needs k > 0".into()));
    }
    let probs = class_probabilities(dense, vocab)?;
    let (w, h) = (image.width() as f64, image.height() as f64);
    let mut ranked: Vec<(f64, usize)> = probs
        .iter()
        .enumerate()
        .filter(|(a, _)| dense.boxes[*a].clip(w, h).area() > 0.0)
        .map(|(a, p)| {
            let best = p[..vocab.len()].iter().copied().fold(0.0, f64::max);
            (best * dense.quality[a], a)
        })
        .collect();
    ranked.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    ranked.truncate(k);
    let mut cands = Vec::new();
    for &(_, a) in &ranked {
        let bbox = dense.boxes[a].clip(w, h);
        let scores = teacher_scores(image, &bbox, teacher, &vocab.table, tau, expansion)?;
        for (c, &s) in scores.iter().enumerate() {
            if s > config.score_threshold {
                cands.push(Detection { bbox, category: c, score: s });
            }
        }
    }
    cands.sort_by(detection_order);
    Ok(nms(&cands, config.nms_threshold))
}

#[allow(clippy::too_many_arguments)]
pub fn direct_inference(
    detector: &Detector,
    image: &Image,
    teacher: &dyn Teacher,
    vocab: &Vocabulary,
    k: usize,
    tau: f64,
    expansion: f64,
    config: &EvalConfig,
) -> Result<Vec<Detection>> {
    let dense = detector.predict(image)?;
    direct_inference_dense(&dense, image, teacher, vocab, k, tau, expansion, config)
}

/// Softmax over `tau · table · v` where `v` is the teacher embedding of the
/// region.
pub fn teacher_scores(
    image: &Image,
    region: &BBox,
    teacher: &dyn Teacher,
    table: &EmbeddingTable,
    tau: f64,
    expansion: f64,
) -> Result<Vec<f64>> {
    let v = encode_region(image, region, expansion, teacher)?;
    let logits: Vec<f64> = (0..table.len()).map(|c| tau * dot(table.row(c), &v)).collect();
    Ok(softmax(&logits))
}

/// Ground-truth boxes verbatim, each labelled with the teacher's most
/// probable category and that probability as score.
pub fn upper_bound_inference(
    image: &Image,
    gt_boxes: &[BBox],
    teacher: &dyn Teacher,
    vocab: &Vocabulary,
    tau: f64,
) -> Result<Vec<Detection>> {
    gt_boxes
        .iter()
        .map(|b| {
            let s = teacher_scores(image, b, teacher, &vocab.table, tau, 1.0)?;
            let (category, score) = s
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (c, &v)| if v > acc.1 { (c, v) } else { acc });
            Ok(Detection {
                bbox: *b,
                category,
                score,
            })
        })
        .collect()
}

/// One detection per line: `image_id<TAB>category<TAB>score<TAB>x1<TAB>y1<TAB>x2<TAB>y2`.
pub fn write_detections(path: &Path, records: &[(u64, Vec<Detection>)], names: &[String], header: &[(&str, String)]) -> Result<()> {
    let mut out = Vec::new();
    for (k, v) in header {
        writeln!(out, "# {k}={v}").expect("write to memory");
    }
    for (id, dets) in records {
        for d in dets {
            writeln!(
                out,
                "{id}\t{}\t{}\t{}\t{}\t{}\t{}",
                names[d.category], d.score, d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2
            )
            .expect("write to memory");
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a detection dump, mapping category names through `names`.
pub fn read_detections(path: &Path, names: &[String]) -> Result<Vec<(u64, Detection)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: &str| Error::Parse {
            path: format!("{}:{}", path.display(), n + 1),
            message: m.to_string(),
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return Err(bad("expected 7 tab-separated fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("malformed number"));
        let id = f[0].parse::<u64>().map_err(|_| bad("malformed image id"))?;
        let category = names
            .iter()
            .position(|c| c == f[1])
            .ok_or_else(|| Error::UnknownCategory(f[1].to_string()))?;
        out.push((
            id,
            Detection {
                category,
                score: num(f[2])?,
                bbox: BBox::new(num(f[3])?, num(f[4])?, num(f[5])?, num(f[6])?),
            },
        ));
    }
    Ok(out)
}
