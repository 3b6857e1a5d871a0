//! Classification, localization and IoU-quality losses, each as a plain
//! scalar function and as a fused operation on the [`Tape`].

use crate::autograd::{Function, Tape, Tensor, Var};
use crate::detector::{AnchorSet, MAX_LOG_DISTANCE};
use crate::error::{Error, Result};
use crate::geometry::{giou, iou, BBox};
use crate::teacher::{dot, EmbeddingTable};

const PROB_FLOOR: f64 = 1e-12;

/// Softmax over `tau_c · [table · f, bg · f]`; the last entry is background.
pub fn classify(f: &[f64], table: &EmbeddingTable, bg: &[f64], tau_c: f64) -> Result<Vec<f64>> {
    if f.len() != table.dim() || bg.len() != table.dim() {
        return Err(Error::Shape(format!(
            "feature of dim {} and background of dim {} against table of dim {}",
            f.len(),
            bg.len(),
            table.dim()
        )));
    }
    if !(tau_c > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {tau_c}")));
    }
    let mut logits: Vec<f64> = (0..table.len()).map(|k| tau_c * dot(table.row(k), f)).collect();
    logits.push(tau_c * dot(bg, f));
    Ok(softmax(&logits))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `-(1 - p_y)^gamma · log(max(p_y, 1e-12))`.
pub fn softmax_focal_loss(p: &[f64], y: usize, gamma: f64) -> f64 {
    let py = p[y];
    -(1.0 - py).max(0.0).powf(gamma) * py.max(PROB_FLOOR).ln()
}

/// Mean `1 - GIoU` over positives; 0 without positives.
pub fn localization_loss(predicted: &[BBox], matched: &[BBox], positives: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for ((p, g), &pos) in predicted.iter().zip(matched).zip(positives) {
        if pos {
            total += 1.0 - giou(p, g);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Mean binary cross-entropy between predicted IoU and the IoU of the decoded
/// box with its ground truth, over positives; 0 without positives.
pub fn iou_branch_loss(predicted_iou: &[f64], decoded: &[BBox], matched: &[BBox], positives: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for i in 0..predicted_iou.len() {
        if positives[i] {
            let t = iou(&decoded[i], &matched[i]);
            let q = predicted_iou[i].clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            total -= t * q.ln() + (1.0 - t) * (1.0 - q).ln();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

// ----- fused tape operations -----

/// Softmax focal loss summed over masked rows of `logits: [A, K]` and divided
/// by `normalizer`. `labels[i]` indexes a column (background included).
pub fn focal_loss_op(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    mask: &[bool],
    gamma: f64,
    normalizer: f64,
) -> Var {
    let z = tape.value(logits);
    let k = z.shape()[1];
    let mut total = 0.0;
    let mut probs = vec![0.0; z.len()];
    for (i, row) in z.data().chunks(k).enumerate() {
        if !mask[i] {
            continue;
        }
        let p = softmax(row);
        total += softmax_focal_loss(&p, labels[i], gamma);
        probs[i * k..(i + 1) * k].copy_from_slice(&p);
    }
    let func = FocalFn {
        probs,
        labels: labels.to_vec(),
        mask: mask.to_vec(),
        gamma,
        normalizer,
        cols: k,
    };
    tape.custom(&[logits], Tensor::scalar(total / normalizer), Box::new(func))
}

struct FocalFn {
    probs: Vec<f64>,
    labels: Vec<usize>,
    mask: Vec<bool>,
    gamma: f64,
    normalizer: f64,
    cols: usize,
}

impl Function for FocalFn {
    fn name(&self) -> &'static str {
        "softmax_focal"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let scale = grad.item() / self.normalizer;
        let k = self.cols;
        let gm = self.gamma;
        let mut out = vec![0.0; inputs[0].len()];
        for (i, &keep) in self.mask.iter().enumerate() {
            if !keep {
                continue;
            }
            let p = &self.probs[i * k..(i + 1) * k];
            let y = self.labels[i];
            let py = p[y];
            let q = (1.0 - py).max(0.0);
            // dL/dp_y multiplied by p_y, so that dL/dz_j = c · (δ_jy - p_j).
            let c = if py >= PROB_FLOOR {
                let pow1 = if gm == 0.0 { 0.0 } else { gm * q.powf(gm - 1.0) };
                pow1 * py * py.ln() - q.powf(gm)
            } else {
                let pow1 = if gm == 0.0 { 0.0 } else { gm * q.powf(gm - 1.0) };
                pow1 * py * PROB_FLOOR.ln()
            };
            for j in 0..k {
                let delta = if j == y { 1.0 } else { 0.0 };
                out[i * k + j] = scale * c * (delta - p[j]);
            }
        }
        vec![Some(Tensor::new(inputs[0].shape().to_vec(), out))]
    }
}

/// Mean `1 - GIoU` between boxes decoded from `raw: [A, 4]` and their targets,
/// over the listed `(anchor, target)` pairs.
pub fn giou_loss_op(tape: &mut Tape, raw: Var, anchors: &AnchorSet, targets: &[(usize, BBox)]) -> Var {
    let r = tape.value(raw);
    let mut total = 0.0;
    for &(i, g) in targets {
        total += 1.0 - giou(&anchors.decode(i, r.row(i)), &g);
    }
    let n = targets.len().max(1) as f64;
    let func = GiouFn {
        anchors: targets
            .iter()
            .map(|&(i, g)| {
                let a = anchors.get(i);
                (i, a.cx, a.cy, a.stride, g)
            })
            .collect(),
        n,
    };
    tape.custom(&[raw], Tensor::scalar(total / n), Box::new(func))
}

struct GiouFn {
    anchors: Vec<(usize, f64, f64, f64, BBox)>,
    n: f64,
}

/// Gradient of `1 - GIoU(p, g)` with respect to the corners of `p`.
pub(crate) fn giou_loss_grad(p: &BBox, g: &BBox) -> [f64; 4] {
    let ap = p.area();
    let ag = g.area();
    let ix1 = p.x1.max(g.x1);
    let ix2 = p.x2.min(g.x2);
    let iy1 = p.y1.max(g.y1);
    let iy2 = p.y2.min(g.y2);
    let iw = (ix2 - ix1).max(0.0);
    let ih = (iy2 - iy1).max(0.0);
    let inter = iw * ih;
    let union = ap + ag - inter;
    let cw = p.x2.max(g.x2) - p.x1.min(g.x1);
    let ch = p.y2.max(g.y2) - p.y1.min(g.y1);
    let c = cw * ch;
    if union <= 0.0 || c <= 0.0 {
        return [0.0; 4];
    }
    let d_inter = -(1.0 / union + inter / (union * union)) + 1.0 / c;
    let d_ap = inter / (union * union) - 1.0 / c;
    let d_c = union / (c * c);

    let (pw, ph) = (p.x2 - p.x1, p.y2 - p.y1);
    // Intersection extents.
    let diw_dx1 = if iw > 0.0 && p.x1 > g.x1 { -1.0 } else { 0.0 };
    let diw_dx2 = if iw > 0.0 && p.x2 < g.x2 { 1.0 } else { 0.0 };
    let dih_dy1 = if ih > 0.0 && p.y1 > g.y1 { -1.0 } else { 0.0 };
    let dih_dy2 = if ih > 0.0 && p.y2 < g.y2 { 1.0 } else { 0.0 };
    // Enclosing extents.
    let dcw_dx1 = if p.x1 < g.x1 { -1.0 } else { 0.0 };
    let dcw_dx2 = if p.x2 > g.x2 { 1.0 } else { 0.0 };
    let dch_dy1 = if p.y1 < g.y1 { -1.0 } else { 0.0 };
    let dch_dy2 = if p.y2 > g.y2 { 1.0 } else { 0.0 };

    [
        d_inter * ih * diw_dx1 + d_ap * -ph + d_c * ch * dcw_dx1,
        d_inter * iw * dih_dy1 + d_ap * -pw + d_c * cw * dch_dy1,
        d_inter * ih * diw_dx2 + d_ap * ph + d_c * ch * dcw_dx2,
        d_inter * iw * dih_dy2 + d_ap * pw + d_c * cw * dch_dy2,
    ]
}

impl Function for GiouFn {
    fn name(&self) -> &'static str {
        "giou_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let raw = inputs[0];
        let scale = grad.item() / self.n;
        let mut out = vec![0.0; raw.len()];
        for &(i, cx, cy, stride, g) in &self.anchors {
            let r = raw.row(i);
            let d: Vec<f64> = r.iter().map(|&v| stride * v.min(MAX_LOG_DISTANCE).exp()).collect();
            let p = BBox::new(cx - d[0], cy - d[1], cx + d[2], cy + d[3]);
            let gc = giou_loss_grad(&p, &g);
            // x1 = cx - l, y1 = cy - t, x2 = cx + r, y2 = cy + b.
            let gd = [-gc[0], -gc[1], gc[2], gc[3]];
            for k in 0..4 {
                if r[k] < MAX_LOG_DISTANCE {
                    out[i * 4 + k] += scale * gd[k] * d[k];
                }
            }
        }
        vec![Some(Tensor::new(raw.shape().to_vec(), out))]
    }
}

/// Mean binary cross-entropy with logits over `(anchor, target)` pairs of
/// `logits: [A, 1]`.
pub fn iou_bce_op(tape: &mut Tape, logits: Var, targets: &[(usize, f64)]) -> Var {
    let z = tape.value(logits);
    let mut total = 0.0;
    for &(i, t) in targets {
        let x = z.data()[i];
        total += softplus(x) - t * x;
    }
    let n = targets.len().max(1) as f64;
    let func = IouBceFn {
        targets: targets.to_vec(),
        n,
    };
    tape.custom(&[logits], Tensor::scalar(total / n), Box::new(func))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

struct IouBceFn {
    targets: Vec<(usize, f64)>,
    n: f64,
}

impl Function for IouBceFn {
    fn name(&self) -> &'static str {
        "iou_bce"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let z = inputs[0];
        let scale = grad.item() / self.n;
        let mut out = vec![0.0; z.len()];
        for &(i, t) in &self.targets {
            out[i] += scale * (sigmoid(z.data()[i]) - t);
        }
        vec![Some(Tensor::new(z.shape().to_vec(), out))]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{max_rel_err, numeric_grad};
    use crate::detector::DetectorConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn focal_closed_forms() {
        assert_eq!(softmax_focal_loss(&[1.0, 0.0], 0, 2.0), 0.0);
        let v = softmax_focal_loss(&[0.5, 0.5], 1, 2.0);
        assert!((v - 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!(softmax_focal_loss(&[1.0, 0.0], 1, 2.0).is_finite());
    }

    #[test]
    fn classify_uniform_when_orthogonal() {
        let table = EmbeddingTable::new(vec!["a".into(), "b".into()], 4, vec![1., 0., 0., 0., 0., 1., 0., 0.]).unwrap();
        let p = classify(&[0., 0., 0., 1.], &table, &[0., 0., 1., 0.], 100.0).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!(classify(&[0., 1.], &table, &[0., 0., 1., 0.], 1.0).is_err());
    }

    #[test]
    fn focal_op_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let (a, k) = (6, 4);
            let z = Tensor::new(vec![a, k], (0..a * k).map(|_| rng.random_range(-3.0..3.0)).collect());
            let labels: Vec<usize> = (0..a).map(|_| rng.random_range(0..k)).collect();
            let mask: Vec<bool> = (0..a).map(|i| i != 2).collect();
            let run = |t: &Tensor| {
                let mut tape = Tape::new();
                let v = tape.param(t.clone());
                let l = focal_loss_op(&mut tape, v, &labels, &mask, 2.0, 3.0);
                (tape, v, l)
            };
            let (tape, v, l) = run(&z);
            let g = tape.backward(l).take(v).unwrap();
            let num = numeric_grad(&z, 1e-5, |t| {
                let (tape, _, l) = run(t);
                tape.value(l).item()
            });
            assert!(max_rel_err(&g, &num) < 1e-6, "{g:?} vs {num:?}");
        }
    }

    #[test]
    fn giou_op_gradient_and_value() {
        let cfg = DetectorConfig::default();
        let anchors = AnchorSet::new(&cfg, 64, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let raw = Tensor::new(
                vec![anchors.len(), 4],
                (0..anchors.len() * 4).map(|_| rng.random_range(-1.0..1.0)).collect(),
            );
            let targets: Vec<(usize, BBox)> = (0..3)
                .map(|_| {
                    let i = rng.random_range(0..anchors.len());
                    let x = rng.random_range(0.0..40.0);
                    let y = rng.random_range(0.0..40.0);
                    (i, BBox::new(x, y, x + rng.random_range(5.0..20.0), y + rng.random_range(5.0..20.0)))
                })
                .collect();
            let run = |t: &Tensor| {
                let mut tape = Tape::new();
                let v = tape.param(t.clone());
                let l = giou_loss_op(&mut tape, v, &anchors, &targets);
                (tape, v, l)
            };
            let (tape, v, l) = run(&raw);
            let decoded: Vec<BBox> = targets.iter().map(|&(i, _)| anchors.decode(i, raw.row(i))).collect();
            let gts: Vec<BBox> = targets.iter().map(|t| t.1).collect();
            let expect = localization_loss(&decoded, &gts, &[true; 3]);
            assert!((tape.value(l).item() - expect).abs() < 1e-12);
            let g = tape.backward(l).take(v).unwrap();
            let num = numeric_grad(&raw, 1e-6, |t| {
                let (tape, _, l) = run(t);
                tape.value(l).item()
            });
            assert!(max_rel_err(&g, &num) < 1e-5);
        }
    }

    #[test]
    fn giou_disjoint_by_hand() {
        // Union 2, enclosing box 4: GIoU = 0 - (4 - 2) / 4.
        let p = BBox::new(0.0, 0.0, 1.0, 1.0);
        let g = BBox::new(3.0, 0.0, 4.0, 1.0);
        assert!((localization_loss(&[p], &[g], &[true]) - 1.5).abs() < 1e-12);
        assert_eq!(localization_loss(&[p], &[g], &[false]), 0.0);
    }

    #[test]
    fn iou_bce_matches_probability_form() {
        let logits = Tensor::new(vec![3, 1], vec![0.3, -1.2, 2.0]);
        let decoded = [BBox::new(0., 0., 2., 2.), BBox::new(0., 0., 1., 1.), BBox::new(1., 1., 3., 3.)];
        let gts = [BBox::new(1., 1., 3., 3.), BBox::new(0., 0., 1., 1.), BBox::new(0., 0., 2., 2.)];
        let mask = [true, false, true];
        let targets: Vec<(usize, f64)> = (0..3).filter(|&i| mask[i]).map(|i| (i, iou(&decoded[i], &gts[i]))).collect();
        let mut tape = Tape::new();
        let v = tape.param(logits.clone());
        let l = iou_bce_op(&mut tape, v, &targets);
        let probs: Vec<f64> = logits.data().iter().map(|&x| sigmoid(x)).collect();
        let expect = iou_branch_loss(&probs, &decoded, &gts, &mask);
        assert!((tape.value(l).item() - expect).abs() < 1e-9);
    }

    #[test]
    fn bce_at_target_is_entropy() {
        let b = BBox::new(0., 0., 2., 2.);
        let g = BBox::new(1., 0., 3., 2.);
        let t = iou(&b, &g);
        let v = iou_branch_loss(&[t], &[b], &[g], &[true]);
        let h = -(t * t.ln() + (1.0 - t) * (1.0 - t).ln());
        assert!((v - h).abs() < 1e-12);
        assert_eq!(iou_branch_loss(&[0.3], &[b], &[g], &[false]), 0.0);
    }
}
