use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::detector::{AnchorSet, NegativeSampling};
use crate::geometry::{iou, BBox};

/// Per-anchor training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleAssignment {
    /// Category index into the training vocabulary, `None` for background.
    pub labels: Vec<Option<usize>>,
    /// Index of the matched ground truth for positives.
    pub matched: Vec<Option<usize>>,
    /// IoU of the anchor box with its matched ground truth (0 for background).
    pub ious: Vec<f64>,
    pub num_pos: usize,
    /// Anchors entering the classification loss.
    pub num_considered: usize,
}

impl SampleAssignment {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn is_positive(&self, i: usize) -> bool {
        self.labels[i].is_some()
    }

    /// Positive anchor indices in ascending order.
    pub fn positives(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_positive(i)).collect()
    }
}

/// Adaptive training sample selection.
///
/// For every ground truth the `topk` anchors per level closest to its centre
/// become candidates; candidates whose IoU reaches the mean plus standard
/// deviation of the candidate IoUs, and whose centre lies strictly inside the
/// box, are positive. Conflicts go to the ground truth with the highest IoU,
/// the lower index on ties.
pub fn assign_samples(
    anchors: &AnchorSet,
    gt_boxes: &[BBox],
    gt_labels: &[usize],
    topk: usize,
) -> SampleAssignment {
    assert_eq!(gt_boxes.len(), gt_labels.len(), "boxes and labels differ in length");
    let n = anchors.len();
    let mut best: Vec<Option<(usize, f64)>> = vec![None; n];
    for (g, gt) in gt_boxes.iter().enumerate() {
        let (gx, gy) = gt.center();
        let mut candidates = Vec::new();
        for level in 0..anchors.levels() {
            let mut dist: Vec<(f64, usize)> = anchors
                .level_range(level)
                .map(|i| {
                    let a = anchors.get(i);
                    ((a.cx - gx).hypot(a.cy - gy), i)
                })
                .collect();
            dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            candidates.extend(dist.iter().take(topk).map(|d| d.1));
        }
        if candidates.is_empty() {
            continue;
        }
        let ious: Vec<f64> = candidates.iter().map(|&i| iou(&anchors.get(i).bbox, gt)).collect();
        let threshold = mean_plus_std(&ious);
        for (&i, &v) in candidates.iter().zip(&ious) {
            let a = anchors.get(i);
            if v >= threshold && gt.contains(a.cx, a.cy) {
                match best[i] {
                    Some((_, prev)) if prev >= v => {}
                    _ => best[i] = Some((g, v)),
                }
            }
        }
    }
    let mut out = SampleAssignment {
        labels: vec![None; n],
        matched: vec![None; n],
        ious: vec![0.0; n],
        num_pos: 0,
        num_considered: n,
    };
    for (i, b) in best.into_iter().enumerate() {
        if let Some((g, v)) = b {
            out.labels[i] = Some(gt_labels[g]);
            out.matched[i] = Some(g);
            out.ious[i] = v;
            out.num_pos += 1;
        }
    }
    out
}

/// Mean plus unbiased standard deviation (zero spread for a single value).
pub fn mean_plus_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return mean;
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    mean + var.sqrt()
}

/// Mask of anchors entering the classification loss. Positives are always
/// kept; negatives are drawn uniformly without replacement.
pub fn sample_negatives(assignment: &SampleAssignment, strategy: NegativeSampling, seed: u64) -> Vec<bool> {
    let negatives: Vec<usize> = (0..assignment.len()).filter(|&i| !assignment.is_positive(i)).collect();
    let mut mask: Vec<bool> = (0..assignment.len()).map(|i| assignment.is_positive(i)).collect();
    let keep = match strategy {
        NegativeSampling::All => negatives.len(),
        NegativeSampling::OneToOne => assignment.num_pos.min(negatives.len()),
        NegativeSampling::TenPercent => negatives.len().div_ceil(10),
    };
    if keep == negatives.len() {
        for &i in &negatives {
            mask[i] = true;
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for k in index::sample(&mut rng, negatives.len(), keep) {
            mask[negatives[k]] = true;
        }
    }
    mask
}
