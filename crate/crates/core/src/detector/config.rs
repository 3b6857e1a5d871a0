use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{invalid, join, parse, parse_bool, parse_list, unknown, Section};
use crate::error::{Error, Result};
use crate::teacher::EMBED_DIM;

/// Which negative anchors contribute to the classification loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NegativeSampling {
    /// As many negatives as positives.
    OneToOne,
    /// Ten percent of the negatives, rounded up.
    TenPercent,
    /// Every negative.
    All,
}

impl fmt::Display for NegativeSampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NegativeSampling::OneToOne => "ratio-1:1",
            NegativeSampling::TenPercent => "fraction-10%",
            NegativeSampling::All => "all",
        })
    }
}

impl FromStr for NegativeSampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ratio-1:1" | "1:1" => Ok(NegativeSampling::OneToOne),
            "fraction-10%" | "10%" => Ok(NegativeSampling::TenPercent),
            "all" | "100%" => Ok(NegativeSampling::All),
            other => Err(Error::InvalidArgument(format!(
                "unknown negative sampling `{other}` (expected ratio-1:1, fraction-10% or all)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Output widths of the four stride-2 backbone stages.
    pub backbone_widths: Vec<usize>,
    /// Width of the feature pyramid and the head towers.
    pub fpn_channels: usize,
    /// Conv + GN + ReLU blocks in each head tower.
    pub head_convs: usize,
    pub gn_groups: usize,
    /// Pyramid levels; level `l` has stride `8 · 2^l`.
    pub levels: usize,
    /// Anchor side as a multiple of the level stride.
    pub anchor_scale: f64,
    /// Embedding width; must equal the teacher's.
    pub embed_dim: usize,
    pub negative_sampling: NegativeSampling,
    pub use_iou_branch: bool,
    /// Candidates per level per ground truth in sample assignment.
    pub atss_topk: usize,
    /// Focusing exponent of the softmax focal loss.
    pub focal_gamma: f64,
    /// Rescale the trainable background embedding to unit length wherever
    /// it enters the classifier; otherwise its norm drifts freely.
    pub unit_background: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            backbone_widths: vec![32, 64, 128, 256],
            fpn_channels: 64,
            head_convs: 2,
            gn_groups: 8,
            levels: 5,
            anchor_scale: 4.0,
            embed_dim: EMBED_DIM,
            negative_sampling: NegativeSampling::TenPercent,
            use_iou_branch: true,
            atss_topk: 9,
            focal_gamma: 2.0,
            unit_background: false,
        }
    }
}

impl DetectorConfig {
    pub fn stride(&self, level: usize) -> usize {
        8 << level
    }

    pub fn anchor_size(&self, level: usize) -> f64 {
        self.anchor_scale * self.stride(level) as f64
    }
}

impl Section for DetectorConfig {
    const NAME: &'static str = "detector";

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("backbone_widths", join(&self.backbone_widths)),
            ("fpn_channels", self.fpn_channels.to_string()),
            ("head_convs", self.head_convs.to_string()),
            ("gn_groups", self.gn_groups.to_string()),
            ("levels", self.levels.to_string()),
            ("anchor_scale", self.anchor_scale.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("negative_sampling", self.negative_sampling.to_string()),
            ("use_iou_branch", self.use_iou_branch.to_string()),
            ("atss_topk", self.atss_topk.to_string()),
            ("focal_gamma", self.focal_gamma.to_string()),
            ("unit_background", self.unit_background.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let s = Self::NAME;
        match key {
            "backbone_widths" => self.backbone_widths = parse_list(s, key, value)?,
            "fpn_channels" => self.fpn_channels = parse(s, key, value)?,
            "head_convs" => self.head_convs = parse(s, key, value)?,
            "gn_groups" => self.gn_groups = parse(s, key, value)?,
            "levels" => self.levels = parse(s, key, value)?,
            "anchor_scale" => self.anchor_scale = parse(s, key, value)?,
            "embed_dim" => self.embed_dim = parse(s, key, value)?,
            "negative_sampling" => {
                self.negative_sampling = value.parse().map_err(|e: Error| invalid(s, key, e.to_string()))?
            }
            "use_iou_branch" => self.use_iou_branch = parse_bool(s, key, value)?,
            "atss_topk" => self.atss_topk = parse(s, key, value)?,
            "focal_gamma" => self.focal_gamma = parse(s, key, value)?,
            "unit_background" => self.unit_background = parse_bool(s, key, value)?,
            _ => return Err(unknown(s, key)),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let s = Self::NAME;
        if self.backbone_widths.len() != 4 || self.backbone_widths.contains(&0) {
            return Err(invalid(s, "backbone_widths", "expected four positive widths"));
        }
        if self.levels == 0 || self.levels > 5 {
            return Err(invalid(s, "levels", "must be in 1..=5"));
        }
        if self.fpn_channels == 0 || self.gn_groups == 0 || self.fpn_channels % self.gn_groups != 0 {
            return Err(invalid(s, "gn_groups", "must divide fpn_channels"));
        }
        if self.backbone_widths.iter().any(|w| w % self.gn_groups != 0) {
            return Err(invalid(s, "gn_groups", "must divide every backbone width"));
        }
        // A single-channel group normalizes a 1x1 map to exactly zero.
        let narrowest = self.backbone_widths.iter().copied().chain([self.fpn_channels]).min().unwrap_or(0);
        if narrowest < 2 * self.gn_groups {
            return Err(invalid(s, "gn_groups", "every group needs at least two channels"));
        }
        if !(self.anchor_scale > 0.0) {
            return Err(invalid(s, "anchor_scale", "must be > 0"));
        }
        if self.embed_dim == 0 {
            return Err(invalid(s, "embed_dim", "must be > 0"));
        }
        if self.atss_topk == 0 {
            return Err(invalid(s, "atss_topk", "must be > 0"));
        }
        if !(self.focal_gamma >= 0.0) {
            return Err(invalid(s, "focal_gamma", "must be >= 0"));
        }
        Ok(())
    }
}
