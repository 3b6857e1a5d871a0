//! Instance-level distillation: positive-anchor features are pulled towards
//! the teacher's embedding of the image region each anchor predicts.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Function, Tape, Tensor, Var};
use crate::config::{invalid, parse, parse_bool, unknown, Section};
use crate::detector::SampleAssignment;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, Image};
use crate::teacher::{encode_region, norm, Teacher};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistillNorm {
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CropSource {
    Predicted,
    GroundTruth,
}

impl fmt::Display for DistillNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistillNorm::L1 => "l1",
            DistillNorm::L2 => "l2",
        })
    }
}

impl FromStr for DistillNorm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(DistillNorm::L1),
            "l2" => Ok(DistillNorm::L2),
            _ => Err("expected l1 or l2".into()),
        }
    }
}

impl fmt::Display for CropSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CropSource::Predicted => "predicted",
            CropSource::GroundTruth => "ground-truth",
        })
    }
}

impl FromStr for CropSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "predicted" => Ok(CropSource::Predicted),
            "ground-truth" | "gt" => Ok(CropSource::GroundTruth),
            _ => Err("expected predicted or ground-truth".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IkdConfig {
    pub enabled: bool,
    pub norm: DistillNorm,
    pub weight: f64,
    pub crop_source: CropSource,
    pub expansion: f64,
    /// Positives whose decoded box overlaps its ground truth less than this
    /// are not distilled.
    pub iou_threshold: f64,
    /// Steps during which ground-truth crops replace predicted ones.
    pub warmup_steps: u64,
}

impl Default for IkdConfig {
    fn default() -> Self {
        IkdConfig {
            enabled: false,
            norm: DistillNorm::L1,
            weight: 1.0,
            crop_source: CropSource::Predicted,
            expansion: 1.5,
            iou_threshold: 0.5,
            warmup_steps: 0,
        }
    }
}

impl Section for IkdConfig {
    const NAME: &'static str = "ikd";

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("enabled", self.enabled.to_string()),
            ("norm", self.norm.to_string()),
            ("weight", self.weight.to_string()),
            ("crop_source", self.crop_source.to_string()),
            ("expansion", self.expansion.to_string()),
            ("iou_threshold", self.iou_threshold.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let s = Self::NAME;
        match key {
            "enabled" => self.enabled = parse_bool(s, key, value)?,
            "norm" => self.norm = parse(s, key, value)?,
            "weight" => self.weight = parse(s, key, value)?,
            "crop_source" => self.crop_source = parse(s, key, value)?,
            "expansion" => self.expansion = parse(s, key, value)?,
            "iou_threshold" => self.iou_threshold = parse(s, key, value)?,
            "warmup_steps" => self.warmup_steps = parse(s, key, value)?,
            _ => return Err(unknown(s, key)),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let s = Self::NAME;
        if !(self.weight > 0.0) {
            return Err(invalid(s, "weight", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.iou_threshold) {
            return Err(invalid(s, "iou_threshold", "must be in [0, 1)"));
        }
        if !(self.expansion >= 1.0) {
            return Err(invalid(s, "expansion", "must be >= 1"));
        }
        Ok(())
    }
}

/// Positives whose decoded box reaches `threshold` IoU with the matched
/// ground truth, in anchor order.
pub fn select_distill_points(
    assignment: &SampleAssignment,
    decoded: &[BBox],
    gt_boxes: &[BBox],
    threshold: f64,
) -> Vec<usize> {
    (0..assignment.len())
        .filter(|&i| match assignment.matched[i] {
            Some(g) => iou(&decoded[i], &gt_boxes[g]) >= threshold,
            None => false,
        })
        .collect()
}

/// Mean distance between L2-normalised student and teacher vectors, with the
/// outer norm L1 (sum of absolute differences) or L2 (Euclidean).
pub fn ikd_loss(student: &[Vec<f64>], teacher: &[Vec<f64>], kind: DistillNorm) -> Result<f64> {
    if student.len() != teacher.len() {
        return Err(Error::Shape(format!("{} student vs {} teacher vectors", student.len(), teacher.len())));
    }
    if student.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (f, v) in student.iter().zip(teacher) {
        let (u, t) = unit_pair(f, v)?;
        total += distance(&u, &t, kind);
    }
    Ok(total / student.len() as f64)
}

fn unit_pair(f: &[f64], v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if f.len() != v.len() {
        return Err(Error::Shape(format!("student dim {} vs teacher dim {}", f.len(), v.len())));
    }
    let nf = norm(f);
    if nf == 0.0 {
        return Err(Error::InvalidArgument("zero-norm student feature".into()));
    }
    let nv = norm(v);
    if nv == 0.0 {
        return Err(Error::InvalidArgument("zero-norm teacher vector".into()));
    }
    Ok((f.iter().map(|x| x / nf).collect(), v.iter().map(|x| x / nv).collect()))
}

fn distance(u: &[f64], t: &[f64], kind: DistillNorm) -> f64 {
    match kind {
        DistillNorm::L1 => u.iter().zip(t).map(|(a, b)| (a - b).abs()).sum(),
        DistillNorm::L2 => u.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt(),
    }
}

/// [`ikd_loss`] over rows `points` of `features: [A, d]`; teacher vectors
/// carry no gradient.
pub fn ikd_loss_op(
    tape: &mut Tape,
    features: Var,
    points: &[usize],
    teacher: &[Vec<f64>],
    kind: DistillNorm,
) -> Result<Var> {
    let fv = tape.value(features);
    let student: Vec<Vec<f64>> = points.iter().map(|&i| fv.row(i).to_vec()).collect();
    let value = ikd_loss(&student, teacher, kind)?;
    let func = IkdFn {
        points: points.to_vec(),
        teacher: teacher.to_vec(),
        kind,
    };
    Ok(tape.custom(&[features], Tensor::scalar(value), Box::new(func)))
}

struct IkdFn {
    points: Vec<usize>,
    teacher: Vec<Vec<f64>>,
    kind: DistillNorm,
}

impl Function for IkdFn {
    fn name(&self) -> &'static str {
        "ikd_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let d = x.shape()[1];
        let mut out = vec![0.0; x.len()];
        if self.points.is_empty() {
            return vec![Some(Tensor::new(x.shape().to_vec(), out))];
        }
        let scale = grad.item() / self.points.len() as f64;
        for (&i, v) in self.points.iter().zip(&self.teacher) {
            let f = x.row(i);
            let nf = norm(f);
            let (u, t) = unit_pair(f, v).expect("validated in forward");
            let gu: Vec<f64> = match self.kind {
                DistillNorm::L1 => u.iter().zip(&t).map(|(a, b)| sign(a - b)).collect(),
                DistillNorm::L2 => {
                    let dist = distance(&u, &t, DistillNorm::L2);
                    if dist == 0.0 {
                        vec![0.0; d]
                    } else {
                        u.iter().zip(&t).map(|(a, b)| (a - b) / dist).collect()
                    }
                }
            };
            let proj: f64 = u.iter().zip(&gu).map(|(a, b)| a * b).sum();
            for k in 0..d {
                out[i * d + k] += scale * (gu[k] - u[k] * proj) / nf;
            }
        }
        vec![Some(Tensor::new(x.shape().to_vec(), out))]
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Teacher embeddings of expanded regions, computed once per distinct box.
pub struct RegionCache<'a> {
    teacher: &'a dyn Teacher,
    expansion: f64,
    memo: HashMap<(usize, [u64; 4]), Option<Vec<f64>>>,
}

impl<'a> RegionCache<'a> {
    pub fn new(teacher: &'a dyn Teacher, expansion: f64) -> Self {
        RegionCache {
            teacher,
            expansion,
            memo: HashMap::new(),
        }
    }

    /// Embedding of `region` in image number `image_key`, or `None` when the
    /// region misses the image.
    pub fn get(&mut self, image_key: usize, image: &Image, region: &BBox) -> Result<Option<Vec<f64>>> {
        let key = (image_key, [region.x1.to_bits(), region.y1.to_bits(), region.x2.to_bits(), region.y2.to_bits()]);
        if let Some(v) = self.memo.get(&key) {
            return Ok(v.clone());
        }
        let v = match encode_region(image, region, self.expansion, self.teacher) {
            Ok(v) => Some(v),
            Err(Error::InvalidCrop(_)) => None,
            Err(e) => return Err(e),
        };
        self.memo.insert(key, v.clone());
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.memo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.memo.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{max_rel_err, numeric_grad};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parallel_pairs_are_free() {
        let s = vec![vec![1.0, 2.0, -3.0], vec![0.5, 0.0, 0.1]];
        // Power-of-two scales keep normalisation exact.
        let t = vec![vec![2.0, 4.0, -6.0], vec![0.125, 0.0, 0.025]];
        assert_eq!(ikd_loss(&s, &t, DistillNorm::L1).unwrap(), 0.0);
        let t = vec![vec![3.0, 6.0, -9.0], vec![5.0, 0.0, 1.0]];
        assert!(ikd_loss(&s, &t, DistillNorm::L1).unwrap() < 1e-12);
        assert_eq!(ikd_loss(&[], &[], DistillNorm::L1).unwrap(), 0.0);
    }

    #[test]
    fn opposite_pair_is_twice_l1_norm() {
        let u = vec![0.6, -0.8, 0.0];
        let neg: Vec<f64> = u.iter().map(|v| -v).collect();
        let v = ikd_loss(&[neg], &[u.clone()], DistillNorm::L1).unwrap();
        assert!((v - 2.0 * 1.4).abs() < 1e-12);
        let v2 = ikd_loss(&[vec![-0.6, 0.8, 0.0]], &[u], DistillNorm::L2).unwrap();
        assert!((v2 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_student_is_an_error() {
        assert!(ikd_loss(&[vec![0.0, 0.0]], &[vec![1.0, 0.0]], DistillNorm::L1).is_err());
    }

    #[test]
    fn op_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in [DistillNorm::L1, DistillNorm::L2] {
            let x = Tensor::new(vec![4, 6], (0..24).map(|_| rng.random_range(-1.0..1.0)).collect());
            let teacher: Vec<Vec<f64>> = (0..2).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let points = [1, 3];
            let run = |t: &Tensor| {
                let mut tape = Tape::new();
                let v = tape.param(t.clone());
                let l = ikd_loss_op(&mut tape, v, &points, &teacher, kind).unwrap();
                (tape, v, l)
            };
            let (tape, v, l) = run(&x);
            let g = tape.backward(l).take(v).unwrap();
            let num = numeric_grad(&x, 1e-6, |t| {
                let (tape, _, l) = run(t);
                tape.value(l).item()
            });
            assert!(max_rel_err(&g, &num) < 1e-5);
        }
    }

    #[test]
    fn config_round_trip() {
        let cfg = IkdConfig {
            enabled: true,
            norm: DistillNorm::L2,
            crop_source: CropSource::GroundTruth,
            ..IkdConfig::default()
        };
        assert_eq!(IkdConfig::from_kv_str(&cfg.to_kv_string()).unwrap(), cfg);
        assert!(IkdConfig::from_kv_str("iou_threshold = 1").is_err());
    }
}
