//! Boxes, images, region cropping and non-maximum suppression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned pixel rectangle `[x1, x2) × [y1, y2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    /// From COCO `[x, y, w, h]`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x1, self.y1, self.width(), self.height()]
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x1 <= self.x2
            && self.y1 <= self.y2
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Strict containment of a point.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x > self.x1 && x < self.x2 && y > self.y1 && y < self.y2
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }
}

/// A scored, categorized box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub category: usize,
    pub score: f64,
}

/// Intersection over union; zero whenever either box has zero area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (aa, ab) = (a.area(), b.area());
    if aa <= 0.0 || ab <= 0.0 {
        return 0.0;
    }
    let inter = a.intersection(b);
    let union = aa + ab - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Generalized IoU: `iou - (enclosing - union) / enclosing`, in `[-1, 1]`.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    let enclose = (a.x2.max(b.x2) - a.x1.min(b.x1)) * (a.y2.max(b.y2) - a.y1.min(b.y1));
    if union <= 0.0 || enclose <= 0.0 {
        return 0.0;
    }
    inter / union - (enclose - union) / enclose
}

/// Scales a box about its center by `factor`, then clips to the image.
pub fn expand_box(b: &BBox, factor: f64, width: f64, height: f64) -> BBox {
    expand_unclipped(b, factor).clip(width, height)
}

pub(crate) fn expand_unclipped(b: &BBox, factor: f64) -> BBox {
    let (cx, cy) = b.center();
    let hw = b.width() * factor / 2.0;
    let hh = b.height() * factor / 2.0;
    BBox::new(cx - hw, cy - hh, cx + hw, cy + hh)
}

/// Interleaved RGB image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height * 3, "image buffer size");
        Image {
            width,
            height,
            data,
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Image::new(width, height, vec![0.0; width * height * 3])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Image::new(img.width() as usize, img.height() as usize, data)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    /// Channel-major `[3, H, W]` layout in `f64` for the detector.
    pub fn to_chw(&self) -> Vec<f64> {
        let hw = self.width * self.height;
        let mut out = vec![0.0; 3 * hw];
        for (p, px) in self.data.chunks(3).enumerate() {
            for c in 0..3 {
                out[c * hw + p] = px[c] as f64;
            }
        }
        out
    }
}

/// Integer pixel window of `b` inside the image, or an error when empty.
pub fn crop_window(img: &Image, b: &BBox) -> Result<(usize, usize, usize, usize)> {
    let x0 = b.x1.max(0.0).floor();
    let y0 = b.y1.max(0.0).floor();
    let x1 = b.x2.min(img.width as f64).ceil();
    let y1 = b.y2.min(img.height as f64).ceil();
    if !(x1 > x0 && y1 > y0) || !b.is_valid() {
        return Err(Error::InvalidCrop(format!(
            "({:.2}, {:.2}, {:.2}, {:.2})",
            b.x1, b.y1, b.x2, b.y2
        )));
    }
    Ok((x0 as usize, y0 as usize, x1 as usize, y1 as usize))
}

/// Crops `b`, scales the long side to `target` preserving aspect ratio and
/// zero-pads the short side at the bottom/right to a `target × target` image.
/// Resampling is bilinear with half-pixel centers.
pub fn crop_resize_long_side_pad(img: &Image, b: &BBox, target: usize) -> Result<Image> {
    if target == 0 {
        return Err(Error::InvalidArgument("crop target side must be > 0".into()));
    }
    let (x0, y0, x1, y1) = crop_window(img, b)?;
    let (cw, ch) = (x1 - x0, y1 - y0);
    let (ow, oh) = content_size(cw, ch, target);
    let mut out = Image::zeros(target, target);
    let sx = cw as f64 / ow as f64;
    let sy = ch as f64 / oh as f64;
    for oy in 0..oh {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (ch - 1) as f64);
        let iy0 = fy.floor() as usize;
        let iy1 = (iy0 + 1).min(ch - 1);
        let wy = (fy - iy0 as f64) as f32;
        for ox in 0..ow {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (cw - 1) as f64);
            let ix0 = fx.floor() as usize;
            let ix1 = (ix0 + 1).min(cw - 1);
            let wx = (fx - ix0 as f64) as f32;
            let p00 = img.pixel(x0 + ix0, y0 + iy0);
            let p01 = img.pixel(x0 + ix1, y0 + iy0);
            let p10 = img.pixel(x0 + ix0, y0 + iy1);
            let p11 = img.pixel(x0 + ix1, y0 + iy1);
            let mut px = [0.0f32; 3];
            for c in 0..3 {
                let top = p00[c] * (1.0 - wx) + p01[c] * wx;
                let bot = p10[c] * (1.0 - wx) + p11[c] * wx;
                px[c] = top * (1.0 - wy) + bot * wy;
            }
            out.set_pixel(ox, oy, px);
        }
    }
    Ok(out)
}

/// Size of the non-padded region for a `cw × ch` crop resized to `target`.
pub fn content_size(cw: usize, ch: usize, target: usize) -> (usize, usize) {
    if cw >= ch {
        let h = ((ch as f64 * target as f64 / cw as f64).round() as usize).clamp(1, target);
        (target, h)
    } else {
        let w = ((cw as f64 * target as f64 / ch as f64).round() as usize).clamp(1, target);
        (w, target)
    }
}

/// Greedy class-wise NMS. Candidates are visited by score descending, then
/// category ascending, then `x1` ascending; a candidate is dropped when it
/// overlaps an already kept box of the same category with IoU above
/// `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| detection_order(&dets[a], &dets[b]));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.category == d.category && iou(&k.bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Total order used for NMS and detection ranking.
pub fn detection_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.category.cmp(&b.category))
        .then(a.bbox.x1.total_cmp(&b.bbox.x1))
}
