use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{invalid, parse, unknown, Section};
use crate::data::{CocoAnnotation, CocoCategory, CocoFile, CocoImage, SplitSpec};
use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        })
    }
}

impl FromStr for Shape {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "circle" => Ok(Shape::Circle),
            "square" => Ok(Shape::Square),
            "triangle" => Ok(Shape::Triangle),
            _ => Err(format!("unknown shape `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthCategory {
    pub name: String,
    pub color: [u8; 3],
    pub shape: Shape,
    pub novel: bool,
}

impl SynthCategory {
    pub fn new(name: &str, color: [u8; 3], shape: Shape, novel: bool) -> Self {
        SynthCategory {
            name: name.to_string(),
            color,
            shape,
            novel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub train_images: usize,
    pub test_images: usize,
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Side of a shape's square footprint, pixels.
    pub min_size: usize,
    pub max_size: usize,
    /// Minimum empty margin between two shapes' boxes, pixels.
    pub gap: usize,
    /// Sampling weight of each novel category relative to a base one.
    pub novel_weight: f64,
    pub seed: u64,
    pub categories: Vec<SynthCategory>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            train_images: 500,
            test_images: 100,
            image_size: 64,
            min_objects: 1,
            max_objects: 4,
            min_size: 12,
            max_size: 24,
            gap: 2,
            novel_weight: 1.0,
            seed: 0,
            categories: default_categories(),
        }
    }
}

/// Three base and two novel categories, each with a unique color.
pub fn default_categories() -> Vec<SynthCategory> {
    vec![
        SynthCategory::new("red circle", [220, 40, 40], Shape::Circle, false),
        SynthCategory::new("green square", [40, 200, 60], Shape::Square, false),
        SynthCategory::new("blue triangle", [50, 70, 220], Shape::Triangle, false),
        SynthCategory::new("orange circle", [235, 135, 30], Shape::Circle, true),
        SynthCategory::new("purple triangle", [135, 50, 215], Shape::Triangle, true),
    ]
}

impl Section for SynthConfig {
    const NAME: &'static str = "synth";

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("train_images", self.train_images.to_string()),
            ("test_images", self.test_images.to_string()),
            ("image_size", self.image_size.to_string()),
            ("min_objects", self.min_objects.to_string()),
            ("max_objects", self.max_objects.to_string()),
            ("min_size", self.min_size.to_string()),
            ("max_size", self.max_size.to_string()),
            ("gap", self.gap.to_string()),
            ("novel_weight", self.novel_weight.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let s = Self::NAME;
        match key {
            "train_images" => self.train_images = parse(s, key, value)?,
            "test_images" => self.test_images = parse(s, key, value)?,
            "image_size" => self.image_size = parse(s, key, value)?,
            "min_objects" => self.min_objects = parse(s, key, value)?,
            "max_objects" => self.max_objects = parse(s, key, value)?,
            "min_size" => self.min_size = parse(s, key, value)?,
            "max_size" => self.max_size = parse(s, key, value)?,
            "gap" => self.gap = parse(s, key, value)?,
            "novel_weight" => self.novel_weight = parse(s, key, value)?,
            "seed" => self.seed = parse(s, key, value)?,
            _ => return Err(unknown(s, key)),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let s = Self::NAME;
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(invalid(s, "min_objects", "need 1 <= min_objects <= max_objects"));
        }
        if self.min_size < 3 || self.min_size > self.max_size || self.max_size > self.image_size {
            return Err(invalid(s, "min_size", "need 3 <= min_size <= max_size <= image_size"));
        }
        if !(self.novel_weight > 0.0 && self.novel_weight.is_finite()) {
            return Err(invalid(s, "novel_weight", "must be finite and > 0"));
        }
        let base = self.categories.iter().filter(|c| !c.novel).count();
        if base < 2 || base == self.categories.len() {
            return Err(invalid(s, "categories", "need at least 2 base and 1 novel category"));
        }
        for (i, a) in self.categories.iter().enumerate() {
            for b in &self.categories[i + 1..] {
                if a.name == b.name || a.color == b.color {
                    return Err(invalid(s, "categories", format!("`{}` and `{}` collide", a.name, b.name)));
                }
            }
        }
        Ok(())
    }
}

impl SynthConfig {
    pub fn split(&self) -> SplitSpec {
        let pick = |novel: bool| {
            self.categories
                .iter()
                .filter(|c| c.novel == novel)
                .map(|c| c.name.clone())
                .collect()
        };
        SplitSpec {
            id: "synthetic".into(),
            base: pick(false),
            novel: pick(true),
        }
    }
}

struct Placed {
    category: usize,
    x: usize,
    y: usize,
    size: usize,
}

const SHAPE_ATTEMPTS: usize = 50;
const LAYOUT_ATTEMPTS: usize = 200;

fn layout(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Placed>> {
    let weights = config.categories.iter().map(|c| if c.novel { config.novel_weight } else { 1.0 });
    let picker = WeightedIndex::new(weights).map_err(|e| Error::Generation(e.to_string()))?;
    let count = rng.random_range(config.min_objects..=config.max_objects);
    'attempt: for _ in 0..LAYOUT_ATTEMPTS {
        let mut placed: Vec<Placed> = Vec::with_capacity(count);
        while placed.len() < count {
            let mut spot = None;
            for _ in 0..SHAPE_ATTEMPTS {
                let size = rng.random_range(config.min_size..=config.max_size);
                let x = rng.random_range(0..=config.image_size - size);
                let y = rng.random_range(0..=config.image_size - size);
                let g = config.gap;
                let clash = placed.iter().any(|p| {
                    x < p.x + p.size + g && p.x < x + size + g && y < p.y + p.size + g && p.y < y + size + g
                });
                if !clash {
                    spot = Some((x, y, size));
                    break;
                }
            }
            let Some((x, y, size)) = spot else {
                continue 'attempt;
            };
            let category = picker.sample(rng);
            placed.push(Placed { category, x, y, size });
        }
        return Ok(placed);
    }
    Err(Error::Generation(format!(
        "could not place {count} non-overlapping shapes in {LAYOUT_ATTEMPTS} attempts"
    )))
}

/// Whether the pixel centred at `(u, v)` lies inside a shape whose square
/// footprint starts at `(x, y)` with side `s`.
fn covers(shape: Shape, x: f64, y: f64, s: f64, u: f64, v: f64) -> bool {
    match shape {
        Shape::Square => u >= x && u <= x + s && v >= y && v <= y + s,
        Shape::Circle => {
            let (cx, cy, r) = (x + s / 2.0, y + s / 2.0, s / 2.0);
            (u - cx).powi(2) + (v - cy).powi(2) <= r * r
        }
        Shape::Triangle => v >= y && v <= y + s && (u - (x + s / 2.0)).abs() <= (v - y) / 2.0,
    }
}

fn caption(names: &[&str]) -> String {
    let items: Vec<String> = names
        .iter()
        .map(|n| {
            let article = if n.starts_with(['a', 'e', 'i', 'o', 'u']) { "an" } else { "a" };
            format!("{article} {n}")
        })
        .collect();
    let list = match items.len() {
        0 => String::new(),
        1 => items[0].clone(),
        n => format!("{} and {}", items[..n - 1].join(", "), items[n - 1]),
    };
    format!("a photo with {list}")
}

fn render_split(config: &SynthConfig, count: usize, stream: u64, dir: &Path) -> Result<()> {
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(stream);
    let n = config.image_size;
    let mut file = CocoFile {
        images: Vec::with_capacity(count),
        annotations: Vec::new(),
        categories: config
            .categories
            .iter()
            .enumerate()
            .map(|(i, c)| CocoCategory {
                id: i as u64 + 1,
                name: c.name.clone(),
                color: Some(c.color),
                shape: Some(c.shape.to_string()),
            })
            .collect(),
        captions: BTreeMap::new(),
    };
    for idx in 0..count {
        let id = idx as u64 + 1;
        let level: f64 = rng.random_range(0.35..0.65);
        let mut img = image::RgbImage::new(n as u32, n as u32);
        for px in img.pixels_mut() {
            let g = ((level + rng.random_range(-0.1..0.1)) * 255.0).round() as u8;
            *px = image::Rgb([g, g, g]);
        }
        let shapes = layout(config, &mut rng)?;
        let mut names = Vec::with_capacity(shapes.len());
        for p in &shapes {
            let cat = &config.categories[p.category];
            let (x, y, s) = (p.x as f64, p.y as f64, p.size as f64);
            let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
            for v in p.y..p.y + p.size {
                for u in p.x..p.x + p.size {
                    if covers(cat.shape, x, y, s, u as f64 + 0.5, v as f64 + 0.5) {
                        img.put_pixel(u as u32, v as u32, image::Rgb(cat.color));
                        x0 = x0.min(u);
                        y0 = y0.min(v);
                        x1 = x1.max(u + 1);
                        y1 = y1.max(v + 1);
                    }
                }
            }
            let bbox = BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64);
            file.annotations.push(CocoAnnotation {
                id: file.annotations.len() as u64 + 1,
                image_id: id,
                category_id: p.category as u64 + 1,
                bbox: bbox.to_xywh(),
                area: bbox.area(),
            });
            names.push(cat.name.as_str());
        }
        let file_name = format!("{id:06}.png");
        let path = images_dir.join(&file_name);
        img.save(&path).map_err(|source| Error::Image { path, source })?;
        file.images.push(CocoImage {
            id,
            file_name: format!("images/{file_name}"),
            width: n,
            height: n,
        });
        file.captions.insert(id, vec![caption(&names)]);
    }
    file.write(&dir.join("annotations.json"))
}

/// Writes `train/` and `test/` (each `annotations.json` plus `images/`) and
/// `split.txt` under `out`. Returns the split.
pub fn generate_synthetic(config: &SynthConfig, out: &Path) -> Result<SplitSpec> {
    config.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    render_split(config, config.train_images, 0, &out.join("train"))?;
    render_split(config, config.test_images, 1, &out.join("test"))?;
    let split = config.split();
    let path = out.join("split.txt");
    std::fs::write(&path, split.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_dataset, Phase};

    fn small() -> SynthConfig {
        SynthConfig {
            train_images: 6,
            test_images: 4,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn captions_name_every_shape() {
        assert_eq!(caption(&["red circle", "blue square"]), "a photo with a red circle and a blue square");
        assert_eq!(caption(&["a", "b", "c"]), "a photo with an a, a b and a c");
        assert_eq!(caption(&["orange circle"]), "a photo with an orange circle");
        let dir = tempfile::tempdir().unwrap();
        let split = generate_synthetic(&small(), dir.path()).unwrap();
        let test = load_dataset(&dir.path().join("test/annotations.json"), &dir.path().join("test"), &split, Phase::Test).unwrap();
        for s in &test.samples {
            assert!(!s.annotations.is_empty() && s.annotations.len() <= 4);
            for a in &s.annotations {
                assert!(s.captions[0].contains(&a.category));
            }
        }
    }

    #[test]
    fn boxes_are_tight() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let split = generate_synthetic(&cfg, dir.path()).unwrap();
        let ds = load_dataset(&dir.path().join("train/annotations.json"), &dir.path().join("train"), &split, Phase::Test).unwrap();
        for s in &ds.samples {
            for a in &s.annotations {
                let color = cfg.categories.iter().find(|c| c.name == a.category).unwrap().color;
                let rgb = color.map(|v| v as f32 / 255.0);
                let b = a.bbox;
                let (x0, y0, x1, y1) = (b.x1 as usize, b.y1 as usize, b.x2 as usize, b.y2 as usize);
                let has = |x: usize, y: usize| s.image.pixel(x, y) == rgb;
                assert!((x0..x1).any(|x| has(x, y0)) && (x0..x1).any(|x| has(x, y1 - 1)));
                assert!((y0..y1).any(|y| has(x0, y)) && (y0..y1).any(|y| has(x1 - 1, y)));
            }
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_synthetic(&small(), a.path()).unwrap();
        generate_synthetic(&small(), b.path()).unwrap();
        for f in ["train/annotations.json", "test/images/000003.png", "split.txt"] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        }
    }

    #[test]
    fn crowded_layout_errors() {
        let cfg = SynthConfig {
            min_objects: 4,
            max_objects: 4,
            min_size: 40,
            max_size: 40,
            ..small()
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(generate_synthetic(&cfg, dir.path()), Err(Error::Generation(_))));
    }
}
