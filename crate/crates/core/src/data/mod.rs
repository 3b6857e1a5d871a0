//! Annotated image-caption datasets, base/novel splits and the synthetic
//! shapes generator.
//!
//! Annotation files follow a COCO-style JSON schema:
//!
//! ```json
//! {
//!   "images": [{"id": 1, "file_name": "000001.png", "width": 64, "height": 64}],
//!   "annotations": [{"id": 1, "image_id": 1, "category_id": 2, "bbox": [x, y, w, h], "area": 100.0}],
//!   "categories": [{"id": 2, "name": "red circle", "color": [220, 40, 40], "shape": "circle"}],
//!   "captions": {"1": ["a photo with a red circle"]}
//! }
//! ```
//!
//! `color` and `shape` are optional; `captions` may be omitted.

mod split;
mod synth;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Image};

pub use split::SplitSpec;
pub use synth::{generate_synthetic, Shape, SynthCategory, SynthConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, width, height]` in pixels.
    pub bbox: [f64; 4],
    #[serde(default)]
    pub area: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<[u8; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
    #[serde(default)]
    pub captions: BTreeMap<u64, Vec<String>>,
}

impl CocoFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: format!("{}:{}:{}", path.display(), e.line(), e.column()),
            message: e.to_string(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("annotation file serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Novel-category annotations are dropped.
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub bbox: BBox,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: u64,
    pub image: Image,
    pub annotations: Vec<Annotation>,
    pub captions: Vec<String>,
}

impl ImageSample {
    /// One caption, drawn uniformly per epoch when several exist.
    pub fn caption(&self, epoch: u64, seed: u64) -> Option<&str> {
        match self.captions.len() {
            0 => None,
            1 => Some(&self.captions[0]),
            n => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ self.id.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ epoch);
                Some(&self.captions[rng.random_range(0..n)])
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<ImageSample>,
    pub categories: Vec<CocoCategory>,
}

impl Dataset {
    pub fn num_annotations(&self) -> usize {
        self.samples.iter().map(|s| s.annotations.len()).sum()
    }
}

/// Loads an annotation file and its PNG images. Every annotated category
/// must belong to the split; in the training phase novel annotations are
/// dropped while images and captions are kept.
pub fn load_dataset(annotation_file: &Path, images_root: &Path, split: &SplitSpec, phase: Phase) -> Result<Dataset> {
    let file = CocoFile::read(annotation_file)?;
    let at = |what: String| Error::Parse {
        path: annotation_file.display().to_string(),
        message: what,
    };
    let names: HashMap<u64, &str> = file.categories.iter().map(|c| (c.id, c.name.as_str())).collect();
    let mut by_image: HashMap<u64, Vec<&CocoAnnotation>> = HashMap::new();
    for a in &file.annotations {
        by_image.entry(a.image_id).or_default().push(a);
    }
    let known_images: HashMap<u64, ()> = file.images.iter().map(|i| (i.id, ())).collect();
    if let Some(a) = file.annotations.iter().find(|a| !known_images.contains_key(&a.image_id)) {
        return Err(at(format!("annotation {} refers to unknown image {}", a.id, a.image_id)));
    }
    let mut samples = Vec::with_capacity(file.images.len());
    for info in &file.images {
        let path = images_root.join(&info.file_name);
        let rgb = image::open(&path)
            .map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?
            .to_rgb8();
        if (rgb.width() as usize, rgb.height() as usize) != (info.width, info.height) {
            return Err(at(format!(
                "image {} is {}x{} on disk but {}x{} in the annotations",
                info.id,
                rgb.width(),
                rgb.height(),
                info.width,
                info.height
            )));
        }
        let mut annotations = Vec::new();
        for a in by_image.get(&info.id).map(|v| v.as_slice()).unwrap_or(&[]) {
            let name = *names
                .get(&a.category_id)
                .ok_or_else(|| at(format!("annotation {} has unknown category id {}", a.id, a.category_id)))?;
            if !split.contains(name) {
                return Err(Error::UnknownCategory(name.to_string()));
            }
            if phase == Phase::Train && split.is_novel(name) {
                continue;
            }
            let [x, y, w, h] = a.bbox;
            let bbox = BBox::from_xywh(x, y, w, h).clip(info.width as f64, info.height as f64);
            if !(w > 0.0 && h > 0.0) || !bbox.is_valid() || bbox.area() <= 0.0 {
                return Err(at(format!("annotation {} has an empty or out-of-image box", a.id)));
            }
            annotations.push(Annotation {
                bbox,
                category: name.to_string(),
            });
        }
        samples.push(ImageSample {
            id: info.id,
            image: Image::from_rgb8(&rgb),
            annotations,
            captions: file.captions.get(&info.id).cloned().unwrap_or_default(),
        });
    }
    Ok(Dataset {
        samples,
        categories: file.categories,
    })
}
