//! Global-level distillation: pooled feature-map patches are aggregated by
//! caption-conditioned attention and contrasted against caption embeddings
//! across the batch.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Function, Tape, Tensor, Var};
use crate::config::{invalid, parse, parse_bool, unknown, Section};
use crate::detector::{softmax, FeatureMaps};
use crate::error::{Error, Result};
use crate::teacher::{dot, norm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pooling {
    Max,
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GlobalLoss {
    /// Symmetric batch contrastive loss.
    Contrastive,
    /// Only the matching scores of paired image and caption.
    PositiveOnly,
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Max => "max",
            Pooling::Average => "average",
        })
    }
}

impl FromStr for Pooling {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "max" => Ok(Pooling::Max),
            "average" | "avg" | "mean" => Ok(Pooling::Average),
            _ => Err("expected max or average".into()),
        }
    }
}

impl fmt::Display for GlobalLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GlobalLoss::Contrastive => "contrastive",
            GlobalLoss::PositiveOnly => "positive-only",
        })
    }
}

impl FromStr for GlobalLoss {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "contrastive" => Ok(GlobalLoss::Contrastive),
            "positive-only" => Ok(GlobalLoss::PositiveOnly),
            _ => Err("expected contrastive or positive-only".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GkdConfig {
    pub enabled: bool,
    /// Patches per side on every pyramid level.
    pub grid: usize,
    pub pooling: Pooling,
    pub loss: GlobalLoss,
    pub weight: f64,
}

impl Default for GkdConfig {
    fn default() -> Self {
        GkdConfig {
            enabled: false,
            grid: 3,
            pooling: Pooling::Max,
            loss: GlobalLoss::Contrastive,
            weight: 0.1,
        }
    }
}

impl Section for GkdConfig {
    const NAME: &'static str = "gkd";

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("enabled", self.enabled.to_string()),
            ("grid", self.grid.to_string()),
            ("pooling", self.pooling.to_string()),
            ("loss", self.loss.to_string()),
            ("weight", self.weight.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let s = Self::NAME;
        match key {
            "enabled" => self.enabled = parse_bool(s, key, value)?,
            "grid" => self.grid = parse(s, key, value)?,
            "pooling" => self.pooling = parse(s, key, value)?,
            "loss" => self.loss = parse(s, key, value)?,
            "weight" => self.weight = parse(s, key, value)?,
            _ => return Err(unknown(s, key)),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.grid == 0 {
            return Err(invalid(Self::NAME, "grid", "must be >= 1"));
        }
        if !(self.weight >= 0.0) {
            return Err(invalid(Self::NAME, "weight", "must be >= 0"));
        }
        Ok(())
    }
}

/// Pooled patch features of every level, `levels · grid²` rows of width `d`,
/// ordered by level, then patch row, then patch column.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatureSet {
    pub grid: usize,
    pub levels: usize,
    pub features: Tensor,
}

impl PatchFeatureSet {
    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch(&self, level: usize, index: usize) -> &[f64] {
        self.features.row(level * self.grid * self.grid + index)
    }
}

/// Row range `[start, end)` of cell `c` out of `n` along an axis of length
/// `len`. Cells have size `ceil(len / n)`; cells past the end collapse onto
/// the last row or column.
pub fn cell_range(len: usize, n: usize, c: usize) -> (usize, usize) {
    let size = len.div_ceil(n);
    let start = (c * size).min(len - 1);
    let end = ((c + 1) * size).min(len).max(start + 1);
    (start, end)
}

/// Pools one `[h · w, d]` level into `[n², d]`. For max pooling, also returns
/// the source row of every output element.
fn pool_level(rows: &Tensor, h: usize, w: usize, n: usize, mode: Pooling) -> (Vec<f64>, Vec<usize>) {
    let d = rows.shape()[1];
    let mut out = vec![0.0; n * n * d];
    let mut arg = vec![0; if mode == Pooling::Max { n * n * d } else { 0 }];
    for ci in 0..n {
        let (r0, r1) = cell_range(h, n, ci);
        for cj in 0..n {
            let (c0, c1) = cell_range(w, n, cj);
            let o = (ci * n + cj) * d;
            let count = ((r1 - r0) * (c1 - c0)) as f64;
            for k in 0..d {
                let mut best = f64::NEG_INFINITY;
                let mut best_at = 0;
                let mut sum = 0.0;
                for i in r0..r1 {
                    for j in c0..c1 {
                        let src = i * w + j;
                        let v = rows.data()[src * d + k];
                        if v > best {
                            best = v;
                            best_at = src;
                        }
                        sum += v;
                    }
                }
                match mode {
                    Pooling::Max => {
                        out[o + k] = best;
                        arg[o + k] = best_at;
                    }
                    Pooling::Average => out[o + k] = sum / count,
                }
            }
        }
    }
    (out, arg)
}

pub fn pool_patches(maps: &FeatureMaps, grid: usize, mode: Pooling) -> Result<PatchFeatureSet> {
    if grid == 0 {
        return Err(Error::InvalidArgument("patch grid must be >= 1".into()));
    }
    let d = maps.levels.first().map(|t| t.shape()[1]).unwrap_or(0);
    let mut data = Vec::new();
    for (rows, &(h, w)) in maps.levels.iter().zip(&maps.shapes) {
        if h == 0 || w == 0 {
            return Err(Error::Shape("empty feature level".into()));
        }
        data.extend(pool_level(rows, h, w, grid, mode).0);
    }
    let n = maps.levels.len() * grid * grid;
    Ok(PatchFeatureSet {
        grid,
        levels: maps.levels.len(),
        features: Tensor::new(vec![n, d], data),
    })
}

/// Pools a `[h · w, d]` level node into a `[grid², d]` node.
pub fn pool_op(tape: &mut Tape, rows: Var, h: usize, w: usize, grid: usize, mode: Pooling) -> Var {
    let v = tape.value(rows);
    let d = v.shape()[1];
    let (out, arg) = pool_level(v, h, w, grid, mode);
    let func = PoolFn { h, w, grid, mode, arg };
    tape.custom(&[rows], Tensor::new(vec![grid * grid, d], out), Box::new(func))
}

struct PoolFn {
    h: usize,
    w: usize,
    grid: usize,
    mode: Pooling,
    arg: Vec<usize>,
}

impl Function for PoolFn {
    fn name(&self) -> &'static str {
        "patch_pool"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let d = x.shape()[1];
        let n = self.grid;
        let mut out = vec![0.0; x.len()];
        match self.mode {
            Pooling::Max => {
                for (o, &g) in grad.data().iter().enumerate() {
                    out[self.arg[o] * d + o % d] += g;
                }
            }
            Pooling::Average => {
                for ci in 0..n {
                    let (r0, r1) = cell_range(self.h, n, ci);
                    for cj in 0..n {
                        let (c0, c1) = cell_range(self.w, n, cj);
                        let count = ((r1 - r0) * (c1 - c0)) as f64;
                        let g = &grad.data()[(ci * n + cj) * d..(ci * n + cj + 1) * d];
                        for i in r0..r1 {
                            for j in c0..c1 {
                                let src = (i * self.w + j) * d;
                                for k in 0..d {
                                    out[src + k] += g[k] / count;
                                }
                            }
                        }
                    }
                }
            }
        }
        vec![Some(Tensor::new(x.shape().to_vec(), out))]
    }
}

/// Cosine with a zero-norm side defined as 0.
fn safe_cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Caption-conditioned aggregation: softmax over the cosines between the
/// caption and every patch, then the weighted sum of patches. Returns the
/// aggregate and the weights.
pub fn cross_attention(caption: &[f64], patches: &PatchFeatureSet) -> Result<(Vec<f64>, Vec<f64>)> {
    let x = &patches.features;
    if x.shape()[0] == 0 {
        return Err(Error::InvalidArgument("no patches to attend over".into()));
    }
    let d = x.shape()[1];
    if caption.len() != d {
        return Err(Error::Shape(format!("caption dim {} vs patch dim {d}", caption.len())));
    }
    let sims: Vec<f64> = x.data().chunks(d).map(|p| safe_cosine(caption, p)).collect();
    let weights = softmax(&sims);
    let mut agg = vec![0.0; d];
    for (p, &wt) in x.data().chunks(d).zip(&weights) {
        for (a, v) in agg.iter_mut().zip(p) {
            *a += wt * v;
        }
    }
    Ok((agg, weights))
}

/// Cosine between the aggregated patches and the caption.
pub fn matching_score(aggregate: &[f64], caption: &[f64]) -> Result<f64> {
    let (na, nc) = (norm(aggregate), norm(caption));
    if na == 0.0 || nc == 0.0 {
        return Err(Error::InvalidArgument("zero vector in matching score".into()));
    }
    Ok(dot(aggregate, caption) / (na * nc))
}

/// Image-side and caption-side losses over the `b × b` score matrix
/// `scores[p][q] = <image p, caption q>`.
pub fn global_contrastive_loss(scores: &[Vec<f64>], tau_m: f64, kind: GlobalLoss) -> Result<(f64, f64)> {
    let b = scores.len();
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch in contrastive loss".into()));
    }
    if scores.iter().any(|r| r.len() != b) {
        return Err(Error::Shape("score matrix must be square".into()));
    }
    let bf = b as f64;
    match kind {
        GlobalLoss::PositiveOnly => {
            let l = (0..b).map(|p| 1.0 - scores[p][p]).sum::<f64>() / bf;
            Ok((l, l))
        }
        GlobalLoss::Contrastive => {
            let mut li = 0.0;
            let mut lc = 0.0;
            for p in 0..b {
                let row: Vec<f64> = (0..b).map(|q| tau_m * scores[p][q]).collect();
                li += log_sum_exp(&row) - row[p];
                let col: Vec<f64> = (0..b).map(|q| tau_m * scores[q][p]).collect();
                lc += log_sum_exp(&col) - col[p];
            }
            Ok((li / bf, lc / bf))
        }
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Row `p` of the score matrix: patches of image `p` (`[M, d]`) against every
/// caption (`[b, d]`, constant). Output `[1, b]`.
pub fn attend_score_op(tape: &mut Tape, patches: Var, captions: &Tensor) -> Result<Var> {
    let set = PatchFeatureSet {
        grid: 0,
        levels: 0,
        features: tape.value(patches).clone(),
    };
    let b = captions.shape()[0];
    let mut scores = Vec::with_capacity(b);
    for q in 0..b {
        let (agg, _) = cross_attention(captions.row(q), &set)?;
        scores.push(matching_score(&agg, captions.row(q))?);
    }
    let func = AttendScoreFn {
        captions: captions.clone(),
    };
    Ok(tape.custom(&[patches], Tensor::new(vec![1, b], scores), Box::new(func)))
}

struct AttendScoreFn {
    captions: Tensor,
}

impl Function for AttendScoreFn {
    fn name(&self) -> &'static str {
        "attend_score"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let d = x.shape()[1];
        let norms: Vec<f64> = x.data().chunks(d).map(norm).collect();
        let mut out = vec![0.0; x.len()];
        for (q, &gs) in grad.data().iter().enumerate() {
            if gs == 0.0 {
                continue;
            }
            let t = self.captions.row(q);
            let nt = norm(t);
            let sims: Vec<f64> = x.data().chunks(d).map(|p| safe_cosine(t, p)).collect();
            let w = softmax(&sims);
            let mut agg = vec![0.0; d];
            for (p, &wt) in x.data().chunks(d).zip(&w) {
                for (a, v) in agg.iter_mut().zip(p) {
                    *a += wt * v;
                }
            }
            let na = norm(&agg);
            let s = dot(&agg, t) / (na * nt);
            // d score / d aggregate.
            let ga: Vec<f64> = (0..d).map(|k| gs * (t[k] / nt - s * agg[k] / na) / na).collect();
            let ga_dot_agg = dot(&ga, &agg);
            for (j, p) in x.data().chunks(d).enumerate() {
                let ge = w[j] * (dot(&ga, p) - ga_dot_agg);
                let row = &mut out[j * d..(j + 1) * d];
                for k in 0..d {
                    row[k] += w[j] * ga[k];
                }
                if norms[j] > 0.0 {
                    let nj = norms[j];
                    let e = sims[j];
                    for k in 0..d {
                        row[k] += ge * (t[k] / nt - e * p[k] / nj) / nj;
                    }
                }
            }
        }
        vec![Some(Tensor::new(x.shape().to_vec(), out))]
    }
}

/// Both global losses from a `[b, b]` score node and a temperature node;
/// the output is `[loss_image, loss_caption]`.
pub fn contrastive_op(tape: &mut Tape, scores: Var, tau_m: Var, kind: GlobalLoss) -> Result<Var> {
    let s = tape.value(scores);
    let b = s.shape()[0];
    let rows: Vec<Vec<f64>> = (0..b).map(|p| s.row(p).to_vec()).collect();
    let tau = tape.value(tau_m).item();
    let (li, lc) = global_contrastive_loss(&rows, tau, kind)?;
    let func = ContrastiveFn { kind };
    Ok(tape.custom(&[scores, tau_m], Tensor::new(vec![2], vec![li, lc]), Box::new(func)))
}

struct ContrastiveFn {
    kind: GlobalLoss,
}

impl Function for ContrastiveFn {
    fn name(&self) -> &'static str {
        "global_contrastive"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let s = inputs[0];
        let tau = inputs[1].item();
        let b = s.shape()[0];
        let bf = b as f64;
        let (gi, gc) = (grad.data()[0], grad.data()[1]);
        let mut gs = vec![0.0; b * b];
        let mut gtau = 0.0;
        match self.kind {
            GlobalLoss::PositiveOnly => {
                for p in 0..b {
                    gs[p * b + p] = -(gi + gc) / bf;
                }
            }
            GlobalLoss::Contrastive => {
                for p in 0..b {
                    let row: Vec<f64> = (0..b).map(|q| tau * s.data()[p * b + q]).collect();
                    let pr = softmax(&row);
                    let col: Vec<f64> = (0..b).map(|q| tau * s.data()[q * b + p]).collect();
                    let pc = softmax(&col);
                    for q in 0..b {
                        let delta = if p == q { 1.0 } else { 0.0 };
                        gs[p * b + q] += gi * tau * (pr[q] - delta) / bf;
                        gs[q * b + p] += gc * tau * (pc[q] - delta) / bf;
                        gtau += gi * (pr[q] - delta) * s.data()[p * b + q] / bf;
                        gtau += gc * (pc[q] - delta) * s.data()[q * b + p] / bf;
                    }
                }
            }
        }
        vec![Some(Tensor::new(vec![b, b], gs)), Some(Tensor::scalar(gtau))]
    }
}

/// The full global chain for a batch: pool every level of every image,
/// score each image against every caption, and apply the batch loss.
/// Returns `(loss_image, loss_caption)` nodes.
pub fn gkd_loss_op(
    tape: &mut Tape,
    images: &[(Vec<Var>, Vec<(usize, usize)>)],
    captions: &Tensor,
    tau_m: Var,
    config: &GkdConfig,
) -> Result<(Var, Var)> {
    if images.len() != captions.shape()[0] {
        return Err(Error::Shape(format!("{} images vs {} captions", images.len(), captions.shape()[0])));
    }
    let mut rows = Vec::with_capacity(images.len());
    for (levels, shapes) in images {
        let pooled: Vec<Var> = levels
            .iter()
            .zip(shapes)
            .map(|(&v, &(h, w))| pool_op(tape, v, h, w, config.grid, config.pooling))
            .collect();
        let patches = tape.concat_rows(&pooled);
        rows.push(attend_score_op(tape, patches, captions)?);
    }
    let scores = tape.concat_rows(&rows);
    let both = contrastive_op(tape, scores, tau_m, config.loss)?;
    Ok((tape.pick(both, 0), tape.pick(both, 1)))
}
