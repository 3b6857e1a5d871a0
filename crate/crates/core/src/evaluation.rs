//! AP at a fixed IoU, recall under a detection budget, size-bucketed AP and
//! the base/novel/all aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::{invalid, join, parse, parse_bool, parse_list, unknown, Section};
use crate::error::{Error, Result};
use crate::geometry::{detection_order, iou, BBox, Detection};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub bbox: BBox,
    /// Index into the active vocabulary.
    pub category: usize,
}

/// Outcome of greedy matching in one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// Per detection: index of the matched ground truth.
    pub matches: Vec<Option<usize>>,
    pub gt_matched: Vec<bool>,
}

impl MatchResult {
    pub fn true_positives(&self) -> Vec<bool> {
        self.matches.iter().map(|m| m.is_some()).collect()
    }
}

/// Greedy matching of score-sorted detections: each takes the unmatched
/// same-category ground truth of highest IoU (lowest index on ties) if that
/// IoU reaches `iou_threshold`. With `class_agnostic` categories are ignored.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_threshold: f64, class_agnostic: bool) -> MatchResult {
    let mut gt_matched = vec![false; gts.len()];
    let mut matches = Vec::with_capacity(dets.len());
    for d in dets {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt_matched[g] || (!class_agnostic && gt.category != d.category) {
                continue;
            }
            let v = iou(&d.bbox, &gt.bbox);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            gt_matched[g] = true;
        }
        matches.push(best.map(|b| b.0));
    }
    MatchResult { matches, gt_matched }
}

/// All-point interpolated AP: area under the precision envelope (precision
/// made non-increasing from the right) as a function of recall. Ties in
/// score keep input order. Zero when there is no ground truth.
pub fn average_precision(flags: &[bool], scores: &[f64], total_gt: usize) -> f64 {
    if total_gt == 0 || flags.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..flags.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(order.len());
    let mut recall = Vec::with_capacity(order.len());
    for (rank, &i) in order.iter().enumerate() {
        if flags[i] {
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / total_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..precision.len() {
        if recall[k] > prev_recall {
            ap += (recall[k] - prev_recall) * precision[k];
            prev_recall = recall[k];
        }
    }
    ap
}

/// Fraction of ground truths matched at IoU 0.5 by the `budget`
/// top-scoring detections of their image.
pub fn recall_at(images: &[(Vec<Detection>, Vec<GroundTruth>)], budget: usize, class_agnostic: bool) -> Result<f64> {
    if budget == 0 {
        return Err(Error::InvalidArgument("recall budget must be > 0".into()));
    }
    let mut matched = 0usize;
    let mut total = 0usize;
    for (dets, gts) in images {
        let mut sorted = dets.clone();
        sorted.sort_by(detection_order);
        sorted.truncate(budget);
        let m = match_detections(&sorted, gts, 0.5, class_agnostic);
        matched += m.gt_matched.iter().filter(|&&b| b).count();
        total += gts.len();
    }
    Ok(if total == 0 { 0.0 } else { matched as f64 / total as f64 })
}

/// Area ranges `[lo, hi)` of the small, medium and large buckets.
pub const SIZE_BUCKETS: [(f64, f64); 3] = [(0.0, 32.0 * 32.0), (32.0 * 32.0, 96.0 * 96.0), (96.0 * 96.0, f64::INFINITY)];

fn in_bucket(area: f64, (lo, hi): (f64, f64)) -> bool {
    area >= lo && area < hi
}

/// AP of `category` over `images` at `iou_threshold`, optionally restricted
/// to an area bucket. Detections matched to out-of-bucket ground truths are
/// ignored, as are unmatched detections whose own area is outside the bucket.
/// `None` when the category has no ground truth in range.
pub fn category_ap(
    images: &[(Vec<Detection>, Vec<GroundTruth>)],
    category: usize,
    iou_threshold: f64,
    bucket: Option<(f64, f64)>,
) -> Option<f64> {
    let mut flags = Vec::new();
    let mut scores = Vec::new();
    let mut total = 0usize;
    for (dets, gts) in images {
        let mut mine: Vec<Detection> = dets.iter().filter(|d| d.category == category).copied().collect();
        mine.sort_by(detection_order);
        let own: Vec<GroundTruth> = gts.iter().filter(|g| g.category == category).copied().collect();
        let keep = |b: &BBox| bucket.is_none_or(|r| in_bucket(b.area(), r));
        total += own.iter().filter(|g| keep(&g.bbox)).count();
        let m = match_detections(&mine, &own, iou_threshold, false);
        for (d, mt) in mine.iter().zip(&m.matches) {
            match mt {
                Some(g) if keep(&own[*g].bbox) => {
                    flags.push(true);
                    scores.push(d.score);
                }
                Some(_) => {}
                None if keep(&d.bbox) => {
                    flags.push(false);
                    scores.push(d.score);
                }
                None => {}
            }
        }
    }
    (total > 0).then(|| average_precision(&flags, &scores, total))
}

/// `(AP_S, AP_M, AP_L)` of one category; a bucket without ground truth is
/// `None`.
pub fn size_bucketed_ap(
    images: &[(Vec<Detection>, Vec<GroundTruth>)],
    category: usize,
    iou_threshold: f64,
) -> [Option<f64>; 3] {
    SIZE_BUCKETS.map(|b| category_ap(images, category, iou_threshold, Some(b)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub recall_budgets: Vec<usize>,
    pub class_agnostic_recall: bool,
    pub score_threshold: f64,
    pub nms_threshold: f64,
    /// Detections kept per image after NMS.
    pub max_detections: usize,
    /// Candidates per image entering NMS.
    pub pre_nms_top: usize,
    /// Foreground candidates re-classified by the teacher in direct inference.
    pub direct_topk: usize,
    /// Softmax temperature of direct inference and the upper bound.
    pub direct_tau: f64,
    /// Context expansion of the boxes cropped for direct inference.
    pub direct_expansion: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_threshold: 0.5,
            recall_budgets: vec![100],
            class_agnostic_recall: true,
            score_threshold: 0.0,
            nms_threshold: 0.4,
            max_detections: 100,
            pre_nms_top: 1000,
            direct_topk: 100,
            direct_tau: 100.0,
            direct_expansion: 1.0,
        }
    }
}

impl Section for EvalConfig {
    const NAME: &'static str = "evaluation";

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("iou_threshold", self.iou_threshold.to_string()),
            ("recall_budgets", join(&self.recall_budgets)),
            ("class_agnostic_recall", self.class_agnostic_recall.to_string()),
            ("score_threshold", self.score_threshold.to_string()),
            ("nms_threshold", self.nms_threshold.to_string()),
            ("max_detections", self.max_detections.to_string()),
            ("pre_nms_top", self.pre_nms_top.to_string()),
            ("direct_topk", self.direct_topk.to_string()),
            ("direct_tau", self.direct_tau.to_string()),
            ("direct_expansion", self.direct_expansion.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let s = Self::NAME;
        match key {
            "iou_threshold" => self.iou_threshold = parse(s, key, value)?,
            "recall_budgets" => self.recall_budgets = parse_list(s, key, value)?,
            "class_agnostic_recall" => self.class_agnostic_recall = parse_bool(s, key, value)?,
            "score_threshold" => self.score_threshold = parse(s, key, value)?,
            "nms_threshold" => self.nms_threshold = parse(s, key, value)?,
            "max_detections" => self.max_detections = parse(s, key, value)?,
            "pre_nms_top" => self.pre_nms_top = parse(s, key, value)?,
            "direct_topk" => self.direct_topk = parse(s, key, value)?,
            "direct_tau" => self.direct_tau = parse(s, key, value)?,
            "direct_expansion" => self.direct_expansion = parse(s, key, value)?,
            _ => return Err(unknown(s, key)),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let s = Self::NAME;
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(invalid(s, "iou_threshold", "must be in (0, 1]"));
        }
        if self.recall_budgets.is_empty() || self.recall_budgets.contains(&0) {
            return Err(invalid(s, "recall_budgets", "need positive budgets"));
        }
        if self.max_detections == 0 || self.pre_nms_top == 0 {
            return Err(invalid(s, "max_detections", "must be > 0"));
        }
        if self.direct_topk == 0 {
            return Err(invalid(s, "direct_topk", "must be > 0"));
        }
        if !(self.direct_tau > 0.0) {
            return Err(invalid(s, "direct_tau", "must be > 0"));
        }
        if !(self.direct_expansion >= 1.0 && self.direct_expansion.is_finite()) {
            return Err(invalid(s, "direct_expansion", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryResult {
    pub name: String,
    pub novel: bool,
    pub num_gt: usize,
    pub ap50: Option<f64>,
}

/// Metrics of one evaluation run; every value is a fraction in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub categories: Vec<CategoryResult>,
    pub map_base: Option<f64>,
    pub map_novel: Option<f64>,
    pub map_all: Option<f64>,
    pub recall: BTreeMap<usize, f64>,
    /// Size-bucketed AP over the novel categories.
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub num_images: usize,
    pub num_instances: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Evaluates detections against ground truth for the active vocabulary
/// `names` (with `novel[k]` marking novel entries). Means skip categories
/// without ground truth.
pub fn evaluate(
    images: &[(Vec<Detection>, Vec<GroundTruth>)],
    names: &[String],
    novel: &[bool],
    mode: &str,
    config: &EvalConfig,
) -> Result<EvalReport> {
    if names.len() != novel.len() {
        return Err(Error::Shape("vocabulary names and novel flags differ in length".into()));
    }
    if let Some(g) = images.iter().flat_map(|i| &i.1).find(|g| g.category >= names.len()) {
        return Err(Error::UnknownCategory(format!("index {}", g.category)));
    }
    let categories: Vec<CategoryResult> = names
        .iter()
        .enumerate()
        .map(|(k, name)| CategoryResult {
            name: name.clone(),
            novel: novel[k],
            num_gt: images.iter().flat_map(|i| &i.1).filter(|g| g.category == k).count(),
            ap50: category_ap(images, k, config.iou_threshold, None),
        })
        .collect();
    let pick = |want: Option<bool>| {
        mean(
            categories
                .iter()
                .filter(|c| want.is_none_or(|w| c.novel == w))
                .filter_map(|c| c.ap50),
        )
    };
    let mut recall = BTreeMap::new();
    for &b in &config.recall_budgets {
        recall.insert(b, recall_at(images, b, config.class_agnostic_recall)?);
    }
    let buckets: Vec<[Option<f64>; 3]> = (0..names.len())
        .filter(|&k| novel[k])
        .map(|k| size_bucketed_ap(images, k, config.iou_threshold))
        .collect();
    let bucket_mean = |j: usize| mean(buckets.iter().filter_map(|b| b[j]));
    Ok(EvalReport {
        mode: mode.to_string(),
        map_base: pick(Some(false)),
        map_novel: pick(Some(true)),
        map_all: pick(None),
        categories,
        recall,
        ap_small: bucket_mean(0),
        ap_medium: bucket_mean(1),
        ap_large: bucket_mean(2),
        num_images: images.len(),
        num_instances: images.iter().map(|i| i.1.len()).sum(),
    })
}

/// Marker written for metrics that are undefined.
pub const ABSENT: &str = "absent";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| ABSENT.to_string(), |x| format!("{x:.6}"))
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", 100.0 * x))
}

impl EvalReport {
    /// `key=value` lines, preceded by the given header entries.
    pub fn to_kv(&self, header: &[(&str, String)]) -> String {
        let mut out = String::new();
        for (k, v) in header {
            let _ = writeln!(out, "{k}={v}");
        }
        let _ = writeln!(out, "mode={}", self.mode);
        let _ = writeln!(out, "num_images={}", self.num_images);
        let _ = writeln!(out, "num_instances={}", self.num_instances);
        let _ = writeln!(out, "map50_base={}", fmt_opt(self.map_base));
        let _ = writeln!(out, "map50_novel={}", fmt_opt(self.map_novel));
        let _ = writeln!(out, "map50_all={}", fmt_opt(self.map_all));
        for (b, r) in &self.recall {
            let _ = writeln!(out, "recall@{b}={r:.6}");
        }
        let _ = writeln!(out, "ap50_small_novel={}", fmt_opt(self.ap_small));
        let _ = writeln!(out, "ap50_medium_novel={}", fmt_opt(self.ap_medium));
        let _ = writeln!(out, "ap50_large_novel={}", fmt_opt(self.ap_large));
        for c in &self.categories {
            let key = c.name.replace(' ', "_");
            let kind = if c.novel { "novel" } else { "base" };
            let _ = writeln!(out, "ap50.{kind}.{key}={}", fmt_opt(c.ap50));
            let _ = writeln!(out, "num_gt.{kind}.{key}={}", c.num_gt);
        }
        out
    }

    /// Fixed-width table with percentages.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "mode: {}   images: {}   instances: {}", self.mode, self.num_images, self.num_instances);
        let _ = writeln!(out, "{:<28} {:>6} {:>6} {:>7}", "category", "split", "gts", "AP50");
        for c in &self.categories {
            let kind = if c.novel { "novel" } else { "base" };
            let _ = writeln!(out, "{:<28} {:>6} {:>6} {:>7}", c.name, kind, c.num_gt, pct(c.ap50));
        }
        let _ = writeln!(out, "{:<28} {:>6} {:>6} {:>7}", "mean", "base", "", pct(self.map_base));
        let _ = writeln!(out, "{:<28} {:>6} {:>6} {:>7}", "mean", "novel", "", pct(self.map_novel));
        let _ = writeln!(out, "{:<28} {:>6} {:>6} {:>7}", "mean", "all", "", pct(self.map_all));
        for (b, r) in &self.recall {
            let _ = writeln!(out, "{:<28} {:>6} {:>6} {:>7}", format!("recall@{b}"), "", "", pct(Some(*r)));
        }
        let _ = writeln!(
            out,
            "novel AP50 by size: S {}  M {}  L {}",
            pct(self.ap_small),
            pct(self.ap_medium),
            pct(self.ap_large)
        );
        out
    }
}
