//! Frozen visual-language teacher: prompts, embedding tables and a
//! deterministic stub backend.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{crop_resize_long_side_pad, expand_box, BBox, Image};

/// Embedding width of the teacher (ViT-B/32 text/image projection width).
pub const EMBED_DIM: usize = 512;
/// Side of the square image the image encoder consumes.
pub const TEACHER_INPUT: usize = 224;
pub const PROMPT_TEMPLATE: &str = "a photo of a [CLS].";
pub const BACKGROUND_PROMPT: &str = "a photo of background.";

/// Text encoder 𝒯 and image encoder 𝒱 of a frozen teacher.
///
/// Implementations hold no mutable state after construction.
pub trait Teacher: Send + Sync {
    fn dim(&self) -> usize;
    fn encode_text(&self, text: &str) -> Vec<f64>;
    fn encode_image(&self, image: &Image) -> Vec<f64>;
    /// Side of the square crops handed to `encode_image`.
    fn input_size(&self) -> usize {
        TEACHER_INPUT
    }
    /// Digest over every parameter; used to assert the teacher stays frozen.
    fn checksum(&self) -> String;
}

/// Fills the prompt template verbatim (no article correction).
pub fn build_prompt(category_name: &str) -> Result<String> {
    if category_name.trim().is_empty() {
        return Err(Error::InvalidArgument("category name must be nonempty".into()));
    }
    Ok(PROMPT_TEMPLATE.replace("[CLS]", category_name))
}

pub fn l2_normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

pub fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    l2_normalize(&mut v);
    v
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

/// Ordered category names with one unit-norm embedding row each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    names: Vec<String>,
    dim: usize,
    rows: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(names: Vec<String>, dim: usize, rows: Vec<f64>) -> Result<Self> {
        if rows.len() != names.len() * dim {
            return Err(Error::Shape(format!(
                "{} names x {dim} dims needs {} values, got {}",
                names.len(),
                names.len() * dim,
                rows.len()
            )));
        }
        Ok(EmbeddingTable { names, dim, rows })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.len(), self.dim], self.rows.clone())
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &EmbeddingTable) -> Result<EmbeddingTable> {
        if self.dim != other.dim {
            return Err(Error::Shape(format!("table dims {} vs {}", self.dim, other.dim)));
        }
        let mut names = self.names.clone();
        names.extend(other.names.iter().cloned());
        let mut rows = self.rows.clone();
        rows.extend_from_slice(&other.rows);
        EmbeddingTable::new(names, self.dim, rows)
    }

    /// Rescales every row; used by tests of scale invariance.
    pub fn scaled(&self, k: f64) -> EmbeddingTable {
        EmbeddingTable {
            names: self.names.clone(),
            dim: self.dim,
            rows: self.rows.iter().map(|v| v * k).collect(),
        }
    }
}

/// Prompt → text encoder → L2 normalize, one row per name in input order.
pub fn encode_categories(names: &[String], teacher: &dyn Teacher) -> Result<EmbeddingTable> {
    for (i, n) in names.iter().enumerate() {
        if names[..i].contains(n) {
            return Err(Error::InvalidArgument(format!("duplicate category name `{n}`")));
        }
    }
    let mut rows = Vec::with_capacity(names.len() * teacher.dim());
    for name in names {
        let prompt = build_prompt(name)?;
        rows.extend(normalized(teacher.encode_text(&prompt)));
    }
    EmbeddingTable::new(names.to_vec(), teacher.dim(), rows)
}

/// Initial value of the trainable background embedding.
pub fn background_embedding(teacher: &dyn Teacher) -> Vec<f64> {
    normalized(teacher.encode_text(BACKGROUND_PROMPT))
}

/// 𝒱(I, r): expand, crop with long-side resize and padding, encode, normalize.
pub fn encode_region(image: &Image, b: &BBox, expansion: f64, teacher: &dyn Teacher) -> Result<Vec<f64>> {
    let region = expand_box(b, expansion, image.width() as f64, image.height() as f64);
    let crop = crop_resize_long_side_pad(image, &region, teacher.input_size())?;
    Ok(normalized(teacher.encode_image(&crop)))
}

/// Whole-caption text embedding 𝒯_C.
pub fn encode_caption(caption: &str, teacher: &dyn Teacher) -> Result<Vec<f64>> {
    if caption.trim().is_empty() {
        return Err(Error::InvalidArgument("caption must be nonempty".into()));
    }
    Ok(normalized(teacher.encode_text(caption)))
}

/// A category the stub teacher knows: its name and rendered color.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StubCategory {
    pub name: String,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StubTeacherConfig {
    pub dim: usize,
    pub seed: u64,
    /// Share of each category vector's energy carried by a fixed linear map
    /// of its color; 0 makes every name an independent random direction.
    pub color_semantics: f64,
    /// Maximum rotation applied to image embeddings, radians.
    pub max_rotation: f64,
    /// L∞ tolerance (on a 0..1 scale) for a pixel to count as a palette color.
    pub color_tolerance: f32,
    /// Crop side for region encoding. The stub only reads colors, so a
    /// smaller side gives the same categories at a fraction of the cost.
    pub input_size: usize,
}

impl Default for StubTeacherConfig {
    fn default() -> Self {
        StubTeacherConfig {
            dim: EMBED_DIM,
            seed: 0,
            color_semantics: 0.0,
            max_rotation: 0.1,
            color_tolerance: 0.12,
            input_size: TEACHER_INPUT,
        }
    }
}

/// Synthetic teacher with exactly known behaviour.
///
/// * text: every known category name found in the text (word-bounded,
///   case-insensitive) contributes its fixed unit vector; the result is the
///   normalized mean. Text naming no category maps to a seeded vector of the
///   whole string.
/// * image: the palette color covering the most pixels selects a category;
///   the output is that category's vector rotated by a content-seeded angle
///   of at most `max_rotation`. Images without palette pixels encode like
///   the background prompt.
#[derive(Debug, Clone)]
pub struct StubTeacher {
    config: StubTeacherConfig,
    categories: Vec<StubCategory>,
    vectors: Vec<Vec<f64>>,
}

impl StubTeacher {
    pub fn new(categories: Vec<StubCategory>, config: StubTeacherConfig) -> Result<Self> {
        if config.dim < 4 {
            return Err(Error::InvalidArgument("stub teacher needs dim >= 4".into()));
        }
        if config.input_size == 0 {
            return Err(Error::InvalidArgument("stub teacher input size must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&config.color_semantics) {
            return Err(Error::InvalidArgument("color_semantics must lie in [0, 1]".into()));
        }
        let projection = color_projection(config.dim, config.seed);
        let vectors = categories
            .iter()
            .map(|c| {
                let random = seeded_unit(config.dim, config.seed, c.name.to_lowercase().as_bytes());
                let w = config.color_semantics;
                if w == 0.0 {
                    return random;
                }
                let centered: Vec<f64> = c.color.iter().map(|&v| v as f64 / 255.0 - 0.5).collect();
                let len = norm(&centered).max(1e-9);
                let mut v: Vec<f64> = random.iter().map(|r| r * (1.0 - w).sqrt()).collect();
                for (d, out) in v.iter_mut().enumerate() {
                    let proj: f64 = (0..3).map(|k| projection[k][d] * centered[k] / len).sum();
                    *out += w.sqrt() * proj;
                }
                normalized(v)
            })
            .collect();
        Ok(StubTeacher {
            config,
            categories,
            vectors,
        })
    }

    pub fn config(&self) -> &StubTeacherConfig {
        &self.config
    }

    pub fn categories(&self) -> &[StubCategory] {
        &self.categories
    }

    /// Fixed vector of a known category.
    pub fn category_vector(&self, index: usize) -> &[f64] {
        &self.vectors[index]
    }

    /// Index of the dominant palette color, if any pixel matches one.
    pub fn dominant_category(&self, image: &Image) -> Option<usize> {
        let mut counts = vec![0usize; self.categories.len()];
        let palette: Vec<[f32; 3]> = self
            .categories
            .iter()
            .map(|c| c.color.map(|v| v as f32 / 255.0))
            .collect();
        let tol = self.config.color_tolerance;
        for px in image.data().chunks(3) {
            for (k, col) in palette.iter().enumerate() {
                if (px[0] - col[0]).abs() <= tol && (px[1] - col[1]).abs() <= tol && (px[2] - col[2]).abs() <= tol {
                    counts[k] += 1;
                    break;
                }
            }
        }
        let (best, count) = counts
            .iter()
            .enumerate()
            .fold((0, 0), |acc, (k, &c)| if c > acc.1 { (k, c) } else { acc });
        (count > 0).then_some(best)
    }

    fn known_names_in(&self, text: &str) -> Vec<usize> {
        let lower = text.to_lowercase();
        let mut order: Vec<usize> = (0..self.categories.len()).collect();
        order.sort_by_key(|&k| std::cmp::Reverse(self.categories[k].name.len()));
        let mut taken: Vec<(usize, usize)> = Vec::new();
        let mut found: Vec<(usize, usize)> = Vec::new();
        for k in order {
            let name = self.categories[k].name.to_lowercase();
            if name.is_empty() {
                continue;
            }
            for (start, _) in lower.match_indices(&name) {
                let end = start + name.len();
                let before_ok = lower[..start].chars().next_back().is_none_or(|c| !c.is_alphanumeric());
                let after_ok = lower[end..].chars().next().is_none_or(|c| !c.is_alphanumeric());
                let overlaps = taken.iter().any(|&(s, e)| start < e && s < end);
                if before_ok && after_ok && !overlaps {
                    taken.push((start, end));
                    if !found.iter().any(|f| f.1 == k) {
                        found.push((start, k));
                    }
                }
            }
        }
        found.sort();
        found.into_iter().map(|f| f.1).collect()
    }
}

impl Teacher for StubTeacher {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn encode_text(&self, text: &str) -> Vec<f64> {
        let known = self.known_names_in(text);
        if known.is_empty() {
            return seeded_unit(self.config.dim, self.config.seed ^ 0x7e57, text.as_bytes());
        }
        let mut mean = vec![0.0; self.config.dim];
        for k in &known {
            for (m, v) in mean.iter_mut().zip(&self.vectors[*k]) {
                *m += v;
            }
        }
        normalized(mean)
    }

    fn encode_image(&self, image: &Image) -> Vec<f64> {
        let base = match self.dominant_category(image) {
            Some(k) => self.vectors[k].clone(),
            None => self.encode_text(BACKGROUND_PROMPT),
        };
        let bytes: Vec<u8> = image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let h = fnv1a(&bytes);
        let angle = self.config.max_rotation * ((h >> 11) as f64 / (1u64 << 53) as f64);
        let mut dir = seeded_unit(self.config.dim, self.config.seed ^ h, b"rotation");
        let along = dot(&dir, &base);
        dir.iter_mut().zip(&base).for_each(|(d, b)| *d -= along * b);
        l2_normalize(&mut dir);
        base.iter()
            .zip(&dir)
            .map(|(b, d)| angle.cos() * b + angle.sin() * d)
            .collect()
    }

    fn input_size(&self) -> usize {
        self.config.input_size
    }

    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.config.dim as u64).to_le_bytes());
        h.update(self.config.seed.to_le_bytes());
        h.update(self.config.color_semantics.to_le_bytes());
        h.update(self.config.max_rotation.to_le_bytes());
        h.update(self.config.color_tolerance.to_le_bytes());
        h.update((self.config.input_size as u64).to_le_bytes());
        for (c, v) in self.categories.iter().zip(&self.vectors) {
            h.update(c.name.as_bytes());
            h.update(c.color);
            for x in v {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn seeded_unit(dim: usize, seed: u64, key: &[u8]) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(key));
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalized(v)
}

/// Three orthonormal directions used to embed colors.
fn color_projection(dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(3);
    for k in 0..3u8 {
        let mut v = seeded_unit(dim, seed, &[b'c', b'o', b'l', k]);
        for b in &basis {
            let d = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        l2_normalize(&mut v);
        basis.push(v);
    }
    basis
}
