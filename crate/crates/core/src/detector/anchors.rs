use std::ops::Range;

use crate::detector::DetectorConfig;
use crate::geometry::BBox;

/// One anchor per feature-map location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub level: usize,
    pub cx: f64,
    pub cy: f64,
    pub stride: f64,
    pub bbox: BBox,
}

/// Anchors of every pyramid level, concatenated level by level in
/// row-major location order. This is also the row order of every per-anchor
/// head output.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    anchors: Vec<Anchor>,
    shapes: Vec<(usize, usize)>,
    offsets: Vec<usize>,
}

/// Spatial size after a 3×3, stride-2, pad-1 convolution.
pub fn downsample(n: usize) -> usize {
    n.div_ceil(2)
}

/// Grid size `(h, w)` of each pyramid level for an input of `height × width`.
/// Level 0 sits after three stride-2 stages; each further level halves again.
pub fn level_shapes(levels: usize, height: usize, width: usize) -> Vec<(usize, usize)> {
    let (mut h, mut w) = (height, width);
    for _ in 0..3 {
        h = downsample(h);
        w = downsample(w);
    }
    let mut out = Vec::with_capacity(levels);
    for l in 0..levels {
        if l > 0 {
            h = downsample(h);
            w = downsample(w);
        }
        out.push((h, w));
    }
    out
}

impl AnchorSet {
    pub fn new(config: &DetectorConfig, height: usize, width: usize) -> Self {
        let shapes = level_shapes(config.levels, height, width);
        let mut anchors = Vec::new();
        let mut offsets = Vec::with_capacity(shapes.len() + 1);
        for (level, &(h, w)) in shapes.iter().enumerate() {
            offsets.push(anchors.len());
            let stride = config.stride(level) as f64;
            let half = config.anchor_size(level) / 2.0;
            for i in 0..h {
                for j in 0..w {
                    let cx = (j as f64 + 0.5) * stride;
                    let cy = (i as f64 + 0.5) * stride;
                    anchors.push(Anchor {
                        level,
                        cx,
                        cy,
                        stride,
                        bbox: BBox::new(cx - half, cy - half, cx + half, cy + half),
                    });
                }
            }
        }
        offsets.push(anchors.len());
        AnchorSet {
            anchors,
            shapes,
            offsets,
        }
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    pub fn get(&self, i: usize) -> &Anchor {
        &self.anchors[i]
    }

    pub fn levels(&self) -> usize {
        self.shapes.len()
    }

    pub fn level_shape(&self, level: usize) -> (usize, usize) {
        self.shapes[level]
    }

    pub fn level_shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }

    pub fn level_range(&self, level: usize) -> Range<usize> {
        self.offsets[level]..self.offsets[level + 1]
    }

    /// Decodes distance-to-side regression `raw` (`[l, t, r, b]` in log
    /// stride units) into a box.
    pub fn decode(&self, i: usize, raw: &[f64]) -> BBox {
        let a = &self.anchors[i];
        let d: Vec<f64> = raw.iter().map(|&v| a.stride * v.min(MAX_LOG_DISTANCE).exp()).collect();
        BBox::new(a.cx - d[0], a.cy - d[1], a.cx + d[2], a.cy + d[3])
    }
}

/// Upper clamp on the log-distance regression output.
pub const MAX_LOG_DISTANCE: f64 = 6.0;
