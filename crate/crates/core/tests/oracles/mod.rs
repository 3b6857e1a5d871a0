//! Brute-force reference implementations and randomized comparisons against
//! the library. Every `check_*` function returns the largest deviation seen
//! over its instances; discrete mismatches count as infinity.
#![allow(dead_code)]

use hierkd::detector::{assign_samples, AnchorSet, DetectorConfig, FeatureMaps};
use hierkd::autograd::Tensor;
use hierkd::evaluation::{average_precision, match_detections, GroundTruth};
use hierkd::geometry::{detection_order, nms, BBox, Detection};
use hierkd::gkd::{cross_attention, pool_patches, PatchFeatureSet, Pooling};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: u64 = 200;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn ref_iou(a: &BBox, b: &BBox) -> f64 {
    let area = |r: &BBox| (r.x2 - r.x1).max(0.0) * (r.y2 - r.y1).max(0.0);
    let (aa, ab) = (area(a), area(b));
    if aa <= 0.0 || ab <= 0.0 {
        return 0.0;
    }
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    (inter / (aa + ab - inter)).clamp(0.0, 1.0)
}

pub fn random_box(r: &mut ChaCha8Rng, extent: f64, min_side: f64, max_side: f64) -> BBox {
    let w = r.random_range(min_side..max_side);
    let h = r.random_range(min_side..max_side);
    let x = r.random_range(0.0..(extent - w).max(1e-3));
    let y = r.random_range(0.0..(extent - h).max(1e-3));
    BBox::from_xywh(x, y, w, h)
}

/// Scores from a coarse grid so that ties occur.
fn random_score(r: &mut ChaCha8Rng) -> f64 {
    if r.random_bool(0.3) {
        r.random_range(1..5) as f64 / 5.0
    } else {
        r.random_range(0.0..1.0)
    }
}

fn random_detections(r: &mut ChaCha8Rng, n: usize, categories: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| Detection {
            bbox: random_box(r, 40.0, 4.0, 20.0),
            category: r.random_range(0..categories),
            score: random_score(r),
        })
        .collect()
}

// ----- NMS -----

/// Repeatedly takes the best remaining detection and deletes every remaining
/// same-category detection overlapping it above the threshold.
pub fn ref_nms(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    let mut pool: Vec<(usize, Detection)> = dets.iter().copied().enumerate().collect();
    let mut kept = Vec::new();
    while !pool.is_empty() {
        let mut best = 0;
        for j in 1..pool.len() {
            let (a, b) = (&pool[j], &pool[best]);
            let before = a.1.score > b.1.score
                || (a.1.score == b.1.score
                    && (a.1.category < b.1.category
                        || (a.1.category == b.1.category
                            && (a.1.bbox.x1 < b.1.bbox.x1 || (a.1.bbox.x1 == b.1.bbox.x1 && a.0 < b.0)))));
            if before {
                best = j;
            }
        }
        let (_, top) = pool.remove(best);
        pool.retain(|(_, d)| !(d.category == top.category && ref_iou(&d.bbox, &top.bbox) > threshold));
        kept.push(top);
    }
    kept
}

pub fn check_nms(seed: u64) -> f64 {
    let mut r = rng(seed);
    for _ in 0..INSTANCES {
        let n = r.random_range(0..14);
        let dets = random_detections(&mut r, n, 3);
        let thr = r.random_range(0.2..0.8);
        if nms(&dets, thr) != ref_nms(&dets, thr) {
            return f64::INFINITY;
        }
    }
    0.0
}

// ----- sample assignment -----

pub struct RefAssignment {
    pub labels: Vec<Option<usize>>,
    pub matched: Vec<Option<usize>>,
    pub ious: Vec<f64>,
}

/// Candidate test by rank counting: anchor `i` is among the `k` closest of
/// its level when fewer than `k` anchors precede it in (distance, index).
pub fn ref_assign(anchors: &AnchorSet, gts: &[BBox], labels: &[usize], k: usize) -> RefAssignment {
    let n = anchors.len();
    let mut qualified: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (g, gt) in gts.iter().enumerate() {
        let gx = (gt.x1 + gt.x2) / 2.0;
        let gy = (gt.y1 + gt.y2) / 2.0;
        let dist = |i: usize| {
            let a = anchors.get(i);
            (a.cx - gx).hypot(a.cy - gy)
        };
        let mut candidates = Vec::new();
        for level in 0..anchors.levels() {
            let range = anchors.level_range(level);
            for i in range.clone() {
                let ahead = range
                    .clone()
                    .filter(|&j| dist(j) < dist(i) || (dist(j) == dist(i) && j < i))
                    .count();
                if ahead < k {
                    candidates.push(i);
                }
            }
        }
        let ious: Vec<f64> = candidates.iter().map(|&i| ref_iou(&anchors.get(i).bbox, gt)).collect();
        let m = ious.len() as f64;
        let mean = ious.iter().sum::<f64>() / m;
        let std = if ious.len() > 1 {
            (ious.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0)).sqrt()
        } else {
            0.0
        };
        for (&i, &v) in candidates.iter().zip(&ious) {
            let a = anchors.get(i);
            let inside = a.cx > gt.x1 && a.cx < gt.x2 && a.cy > gt.y1 && a.cy < gt.y2;
            if v >= mean + std && inside {
                qualified[i].push((g, v));
            }
        }
    }
    let mut out = RefAssignment {
        labels: vec![None; n],
        matched: vec![None; n],
        ious: vec![0.0; n],
    };
    for (i, q) in qualified.iter().enumerate() {
        let best = q
            .iter()
            .copied()
            .reduce(|a, b| if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) { b } else { a });
        if let Some((g, v)) = best {
            out.labels[i] = Some(labels[g]);
            out.matched[i] = Some(g);
            out.ious[i] = v;
        }
    }
    out
}

pub fn check_assignment(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let config = DetectorConfig {
            levels: r.random_range(1..4),
            ..DetectorConfig::default()
        };
        let side = r.random_range(16..72);
        let anchors = AnchorSet::new(&config, side, side);
        let n = r.random_range(0..5);
        let gts: Vec<BBox> = (0..n).map(|_| random_box(&mut r, side as f64, 3.0, side as f64 * 0.7)).collect();
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
        let k = r.random_range(1..10);
        let got = assign_samples(&anchors, &gts, &labels, k);
        let want = ref_assign(&anchors, &gts, &labels, k);
        if got.labels != want.labels || got.matched != want.matched {
            return f64::INFINITY;
        }
        if got.num_pos != want.labels.iter().filter(|l| l.is_some()).count() {
            return f64::INFINITY;
        }
        for (a, b) in got.ious.iter().zip(&want.ious) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

// ----- detection to ground-truth matching -----

pub fn ref_match(dets: &[Detection], gts: &[GroundTruth], threshold: f64, agnostic: bool) -> (Vec<Option<usize>>, Vec<bool>) {
    let mut taken = vec![false; gts.len()];
    let mut matches = Vec::new();
    for d in dets {
        let pick = (0..gts.len())
            .filter(|&g| !taken[g] && (agnostic || gts[g].category == d.category))
            .map(|g| (g, ref_iou(&d.bbox, &gts[g].bbox)))
            .filter(|&(_, v)| v >= threshold)
            .reduce(|a, b| if b.1 > a.1 { b } else { a });
        if let Some((g, _)) = pick {
            taken[g] = true;
        }
        matches.push(pick.map(|p| p.0));
    }
    (matches, taken)
}

pub fn check_matching(seed: u64) -> f64 {
    let mut r = rng(seed);
    for _ in 0..INSTANCES {
        let n = r.random_range(0..12);
        let mut dets = random_detections(&mut r, n, 3);
        dets.sort_by(detection_order);
        let m = r.random_range(0..7);
        let gts: Vec<GroundTruth> = (0..m)
            .map(|_| GroundTruth {
                bbox: random_box(&mut r, 40.0, 4.0, 20.0),
                category: r.random_range(0..3),
            })
            .collect();
        let agnostic = r.random_bool(0.3);
        let thr = [0.3, 0.5, 0.75][r.random_range(0..3)];
        let got = match_detections(&dets, &gts, thr, agnostic);
        let (matches, taken) = ref_match(&dets, &gts, thr, agnostic);
        if got.matches != matches || got.gt_matched != taken {
            return f64::INFINITY;
        }
    }
    0.0
}

// ----- average precision -----

/// Sum over true positives, in rank order, of the best precision reached at
/// that rank or any later one, divided by the ground-truth count.
pub fn ref_ap(flags: &[bool], scores: &[f64], total_gt: usize) -> f64 {
    if total_gt == 0 {
        return 0.0;
    }
    let mut idx: Vec<usize> = (0..flags.len()).collect();
    // Insertion sort: score descending, input order on ties.
    for i in 1..idx.len() {
        let mut j = i;
        while j > 0 && scores[idx[j]] > scores[idx[j - 1]] {
            idx.swap(j, j - 1);
            j -= 1;
        }
    }
    let ranked: Vec<bool> = idx.iter().map(|&i| flags[i]).collect();
    let precision_at = |r: usize| ranked[..=r].iter().filter(|&&f| f).count() as f64 / (r + 1) as f64;
    let mut ap = 0.0;
    for r in 0..ranked.len() {
        if ranked[r] {
            let best = (r..ranked.len()).map(precision_at).fold(0.0, f64::max);
            ap += best / total_gt as f64;
        }
    }
    ap
}

pub fn check_ap(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let n = r.random_range(0..30);
        let flags: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
        let scores: Vec<f64> = (0..n).map(|_| random_score(&mut r)).collect();
        let tp = flags.iter().filter(|&&f| f).count();
        let total = tp + r.random_range(0..5);
        worst = worst.max((average_precision(&flags, &scores, total) - ref_ap(&flags, &scores, total)).abs());
    }
    worst
}

// ----- patch pooling -----

fn random_tensor(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect())
}

pub fn random_maps(r: &mut ChaCha8Rng, d: usize) -> FeatureMaps {
    let levels = r.random_range(1..4);
    let shapes: Vec<(usize, usize)> = (0..levels).map(|_| (r.random_range(1..10), r.random_range(1..10))).collect();
    let tensors = shapes.iter().map(|&(h, w)| random_tensor(r, h * w, d)).collect();
    FeatureMaps {
        shapes,
        levels: tensors,
    }
}

/// Rows of cell `c` when `len` rows are cut into `n` cells of `ceil(len/n)`;
/// cells beyond the end reuse the last row.
fn ref_cell(len: usize, n: usize, c: usize) -> Vec<usize> {
    let size = len.div_ceil(n);
    let rows: Vec<usize> = (0..len).filter(|&i| i / size == c).collect();
    if rows.is_empty() {
        vec![len - 1]
    } else {
        rows
    }
}

pub fn ref_pool(maps: &FeatureMaps, grid: usize, mode: Pooling) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for (t, &(h, w)) in maps.levels.iter().zip(&maps.shapes) {
        let d = t.shape()[1];
        for ci in 0..grid {
            for cj in 0..grid {
                let cells: Vec<usize> = ref_cell(h, grid, ci)
                    .into_iter()
                    .flat_map(|i| ref_cell(w, grid, cj).into_iter().map(move |j| i * w + j))
                    .collect();
                let row: Vec<f64> = (0..d)
                    .map(|k| {
                        let vals = cells.iter().map(|&s| t.row(s)[k]);
                        match mode {
                            Pooling::Max => vals.fold(f64::NEG_INFINITY, f64::max),
                            Pooling::Average => vals.sum::<f64>() / cells.len() as f64,
                        }
                    })
                    .collect();
                out.push(row);
            }
        }
    }
    out
}

pub fn check_pooling(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let d = r.random_range(1..6);
        let maps = random_maps(&mut r, d);
        let grid = r.random_range(1..5);
        for mode in [Pooling::Max, Pooling::Average] {
            let got = pool_patches(&maps, grid, mode).unwrap();
            let want = ref_pool(&maps, grid, mode);
            if got.len() != want.len() {
                return f64::INFINITY;
            }
            for (i, row) in want.iter().enumerate() {
                for (a, b) in got.features.row(i).iter().zip(row) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    worst
}

// ----- cross attention -----

/// Weights `exp(cos_j) / Σ exp(cos)` and the weighted patch sum.
pub fn ref_attention(caption: &[f64], patches: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let len = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cos: Vec<f64> = patches
        .iter()
        .map(|p| {
            let (a, b) = (len(caption), len(p));
            if a == 0.0 || b == 0.0 {
                0.0
            } else {
                caption.iter().zip(p).map(|(x, y)| x * y).sum::<f64>() / (a * b)
            }
        })
        .collect();
    let z: f64 = cos.iter().map(|c| c.exp()).sum();
    let weights: Vec<f64> = cos.iter().map(|c| c.exp() / z).collect();
    let mut agg = vec![0.0; caption.len()];
    for (p, w) in patches.iter().zip(&weights) {
        for (a, v) in agg.iter_mut().zip(p) {
            *a += w * v;
        }
    }
    (agg, weights)
}

pub fn check_attention(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let d = r.random_range(1..9);
        let m = r.random_range(1..20);
        let patches: Vec<Vec<f64>> = (0..m).map(|_| (0..d).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
        let caption: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let set = PatchFeatureSet {
            grid: 1,
            levels: m,
            features: Tensor::new(vec![m, d], patches.concat()),
        };
        let (agg, w) = cross_attention(&caption, &set).unwrap();
        let (ragg, rw) = ref_attention(&caption, &patches);
        for (a, b) in agg.iter().zip(&ragg).chain(w.iter().zip(&rw)) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// Every oracle comparison by name.
pub fn all_checks() -> Vec<(&'static str, fn(u64) -> f64)> {
    vec![
        ("nms", check_nms),
        ("sample assignment", check_assignment),
        ("detection matching", check_matching),
        ("average precision", check_ap),
        ("patch pooling", check_pooling),
        ("cross attention", check_attention),
    ]
}
