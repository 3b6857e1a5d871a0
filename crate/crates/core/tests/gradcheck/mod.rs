//! Finite-difference checks of the hand-written backward rules. Each
//! `check_*` returns the largest relative error over its instances.
#![allow(dead_code)]

use hierkd::autograd::{max_rel_err, numeric_grad, Tape, Tensor, Var};
use hierkd::detector::loss::{focal_loss_op, giou_loss_op, iou_bce_op};
use hierkd::detector::{AnchorSet, DetectorConfig};
use hierkd::geometry::BBox;
use hierkd::gkd::{gkd_loss_op, GkdConfig, GlobalLoss, Pooling};
use hierkd::ikd::{ikd_loss_op, DistillNorm};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: u64 = 25;
const EPS: f64 = 1e-6;

fn tensor(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect())
}

/// Relative error between tape gradients and central differences of a
/// scalar built from `inputs` by `build`, scaled by the largest gradient
/// entry over all inputs jointly.
pub fn compare(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out);
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (k, input) in inputs.iter().enumerate() {
        let n = numeric_grad(input, EPS, |probe| {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, x)| t.param(if j == k { probe.clone() } else { x.clone() }))
                .collect();
            let o = build(&mut t, &vs);
            t.value(o).item()
        });
        numeric.extend_from_slice(n.data());
        match grads.get(vars[k]) {
            Some(g) => analytic.extend_from_slice(g.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, input.len())),
        }
    }
    let len = analytic.len();
    max_rel_err(&Tensor::new(vec![len], analytic), &Tensor::new(vec![len], numeric))
}

pub fn check_focal(seed: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let (a, k) = (r.random_range(1..7), r.random_range(2..6));
        let logits = tensor(&mut r, &[a, k], -3.0, 3.0);
        let labels: Vec<usize> = (0..a).map(|_| r.random_range(0..k)).collect();
        let mut mask: Vec<bool> = (0..a).map(|_| r.random_bool(0.7)).collect();
        mask[0] = true;
        let gamma = [0.0, 1.0, 2.0, r.random_range(1.0..3.0)][r.random_range(0..4)];
        let normalizer = r.random_range(1.0..5.0);
        worst = worst.max(compare(&[logits], |t, v| focal_loss_op(t, v[0], &labels, &mask, gamma, normalizer)));
    }
    worst
}

/// Unit vectors whose coordinates differ by at least `margin` everywhere, so
/// the L1 distance is differentiable at the sample.
fn away_from_kinks(f: &Tensor, points: &[usize], teacher: &[Vec<f64>], margin: f64) -> bool {
    let d = f.shape()[1];
    let unit = |v: &[f64]| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    points.iter().zip(teacher).all(|(&i, t)| {
        let (u, w) = (unit(f.row(i)), unit(t));
        (0..d).all(|k| (u[k] - w[k]).abs() > margin)
    })
}

pub fn check_ikd(seed: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < INSTANCES {
        let (a, d) = (r.random_range(1..6), r.random_range(2..9));
        let features = tensor(&mut r, &[a, d], -1.0, 1.0);
        let mask: Vec<bool> = (0..a).map(|_| r.random_bool(0.6)).collect();
        let points: Vec<usize> = (0..a).filter(|&i| mask[i]).collect();
        let teacher: Vec<Vec<f64>> = points.iter().map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        if !away_from_kinks(&features, &points, &teacher, 1e-3) {
            continue;
        }
        for kind in [DistillNorm::L1, DistillNorm::L2] {
            worst = worst.max(compare(std::slice::from_ref(&features), |t, v| {
                ikd_loss_op(t, v[0], &points, &teacher, kind).unwrap()
            }));
        }
        done += 1;
    }
    worst
}

/// Pooling, attention, matching scores and the batch loss, differentiated
/// with respect to every level map of every image and the temperature.
pub fn check_gkd(seed: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let b = r.random_range(1..4);
        let d = r.random_range(2..6);
        let levels = r.random_range(1..3);
        let shapes: Vec<Vec<(usize, usize)>> = (0..b)
            .map(|_| (0..levels).map(|_| (r.random_range(1..6), r.random_range(1..6))).collect())
            .collect();
        let mut inputs = Vec::new();
        for s in &shapes {
            for &(h, w) in s {
                inputs.push(tensor(&mut r, &[h * w, d], -1.0, 1.0));
            }
        }
        inputs.push(Tensor::scalar(r.random_range(1.0..20.0)));
        let captions = tensor(&mut r, &[b, d], -1.0, 1.0);
        let config = GkdConfig {
            enabled: true,
            grid: r.random_range(1..4),
            pooling: if r.random_bool(0.5) { Pooling::Max } else { Pooling::Average },
            loss: if r.random_bool(0.8) { GlobalLoss::Contrastive } else { GlobalLoss::PositiveOnly },
            weight: 1.0,
        };
        worst = worst.max(compare(&inputs, |t, v| {
            let mut next = 0;
            let images: Vec<(Vec<Var>, Vec<(usize, usize)>)> = shapes
                .iter()
                .map(|s| {
                    let vars = v[next..next + s.len()].to_vec();
                    next += s.len();
                    (vars, s.clone())
                })
                .collect();
            let (li, lc) = gkd_loss_op(t, &images, &captions, v[next], &config).unwrap();
            t.weighted_sum(&[(li, 0.5), (lc, 0.5)])
        }));
    }
    worst
}

pub fn check_iou_branch(seed: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let a = r.random_range(1..8);
        let logits = tensor(&mut r, &[a, 1], -4.0, 4.0);
        let mut targets = Vec::new();
        for i in 0..a {
            if r.random_bool(0.7) {
                targets.push((i, r.random_range(0.0..1.0)));
            }
        }
        worst = worst.max(compare(&[logits], |t, v| iou_bce_op(t, v[0], &targets)));
    }
    worst
}

pub fn check_box_regression(seed: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let anchors = AnchorSet::new(&DetectorConfig { levels: 2, ..DetectorConfig::default() }, 32, 32);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let raw = tensor(&mut r, &[anchors.len(), 4], -1.0, 1.5);
        let mut targets: Vec<(usize, BBox)> = Vec::new();
        for (i, a) in anchors.anchors().iter().enumerate() {
            if r.random_bool(0.5) {
                let mut side = || r.random_range(0.3..3.0) * a.stride;
                let g = BBox::new(a.cx - side(), a.cy - side(), a.cx + side(), a.cy + side());
                targets.push((i, g));
            }
        }
        worst = worst.max(compare(std::slice::from_ref(&raw), |t, v| giou_loss_op(t, v[0], &anchors, &targets)));
    }
    worst
}

pub fn all_checks() -> Vec<(&'static str, fn(u64) -> f64)> {
    vec![
        ("softmax focal loss", check_focal),
        ("instance distillation loss", check_ikd),
        ("global distillation chain", check_gkd),
        ("iou branch loss", check_iou_branch),
        ("box regression loss", check_box_regression),
    ]
}
