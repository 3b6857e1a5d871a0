use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Tensor, Var};
use crate::detector::loss::{classify, sigmoid};
use crate::detector::{AnchorSet, DetectorConfig};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Image};
use crate::teacher::EmbeddingTable;

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn value(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.values[i]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    /// Puts every parameter on the tape, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.values
            .iter()
            .map(|v| if trainable { tape.param(v.clone()) } else { tape.constant(v.clone()) })
            .collect()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (n, v) in self.names.iter().zip(&self.values) {
            h.update(n.as_bytes());
            for &s in v.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for &x in v.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: usize,
    b: Option<usize>,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    conv: Conv,
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    stages: Vec<[Block; 2]>,
    lateral: [Conv; 2],
    output: [Conv; 2],
    extra: Vec<Conv>,
    cls_tower: Vec<Block>,
    reg_tower: Vec<Block>,
    embed: Conv,
    regress: Conv,
    quality: Conv,
    background: usize,
    tau_c: usize,
}

/// Per-level anchor features, each `[H_l · W_l, d]` in row-major location
/// order (one unit-norm row per location).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMaps {
    pub shapes: Vec<(usize, usize)>,
    pub levels: Vec<Tensor>,
}

/// Tape handles produced by [`Detector::forward`].
pub struct HeadOutput {
    pub anchors: AnchorSet,
    /// `[A, d]` unit-norm anchor features.
    pub features: Var,
    /// Per-level `[H_l · W_l, d]` slices of `features`.
    pub level_features: Vec<Var>,
    /// `[A, 4]` log-distance box regression.
    pub deltas: Var,
    /// `[A, 1]` IoU-quality logits.
    pub iou_logits: Var,
}

/// Detached per-anchor predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseOutput {
    pub anchors: AnchorSet,
    /// `[A, d]` unit-norm anchor features.
    pub features: Tensor,
    pub feature_maps: FeatureMaps,
    /// Decoded, unclipped boxes.
    pub boxes: Vec<BBox>,
    /// Predicted IoU in (0, 1); all ones when the branch is disabled.
    pub quality: Vec<f64>,
    /// Background embedding and classification temperature at prediction time.
    pub background: Vec<f64>,
    pub tau_c: f64,
}

impl DenseOutput {
    /// Class probabilities per anchor against `table` plus background.
    pub fn probabilities(&self, table: &EmbeddingTable) -> Result<Vec<Vec<f64>>> {
        let d = self.features.shape()[1];
        self.features
            .data()
            .chunks(d)
            .map(|f| classify(f, table, &self.background, self.tau_c))
            .collect()
    }
}

pub const TAU_C_INIT: f64 = 100.0;

/// The one-stage student network.
#[derive(Debug, Clone)]
pub struct Detector {
    config: DetectorConfig,
    params: ParamStore,
    layout: Layout,
}

struct Init<'a> {
    params: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn normal(&mut self, name: String, shape: Vec<usize>, std: f64) -> usize {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.params.push(name, Tensor::new(shape, data))
    }

    fn fill(&mut self, name: String, shape: Vec<usize>, v: f64) -> usize {
        let n: usize = shape.iter().product();
        self.params.push(name, Tensor::new(shape, vec![v; n]))
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, std: Option<f64>, bias: bool) -> Conv {
        let fan_in = (cin * k * k) as f64;
        let std = std.unwrap_or((2.0 / fan_in).sqrt());
        let w = self.normal(format!("{name}.weight"), vec![cout, cin, k, k], std);
        let b = bias.then(|| self.fill(format!("{name}.bias"), vec![cout], 0.0));
        Conv {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> Block {
        let conv = self.conv(&format!("{name}.conv"), cin, cout, 3, stride, None, false);
        let gamma = self.fill(format!("{name}.gn.gamma"), vec![cout], 1.0);
        let beta = self.fill(format!("{name}.gn.beta"), vec![cout], 0.0);
        Block { conv, gamma, beta }
    }
}

impl Detector {
    /// Builds a randomly initialised detector. `background` seeds the
    /// trainable background embedding.
    pub fn new(config: DetectorConfig, background: &[f64], seed: u64) -> Result<Self> {
        use crate::config::Section;
        config.validate()?;
        if background.len() != config.embed_dim {
            return Err(Error::Shape(format!(
                "background embedding has dim {}, detector expects {}",
                background.len(),
                config.embed_dim
            )));
        }
        let mut params = ParamStore::new();
        let mut init = Init {
            params: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let widths = &config.backbone_widths;
        let f = config.fpn_channels;
        let mut stages = Vec::new();
        let mut cin = 3;
        for (s, &w) in widths.iter().enumerate() {
            let down = init.block(&format!("backbone.stage{s}.down"), cin, w, 2);
            let refine = init.block(&format!("backbone.stage{s}.refine"), w, w, 1);
            stages.push([down, refine]);
            cin = w;
        }
        let lateral = [
            init.conv("fpn.lateral0", widths[2], f, 1, 1, None, true),
            init.conv("fpn.lateral1", widths[3], f, 1, 1, None, true),
        ];
        let output = [
            init.conv("fpn.output0", f, f, 3, 1, None, true),
            init.conv("fpn.output1", f, f, 3, 1, None, true),
        ];
        let extra = (2..config.levels)
            .map(|l| init.conv(&format!("fpn.extra{l}"), f, f, 3, 2, None, true))
            .collect();
        let cls_tower = (0..config.head_convs)
            .map(|i| init.block(&format!("head.cls{i}"), f, f, 1))
            .collect();
        let reg_tower = (0..config.head_convs)
            .map(|i| init.block(&format!("head.reg{i}"), f, f, 1))
            .collect();
        let embed = init.conv("head.embed", f, config.embed_dim, 1, 1, Some((1.0 / f as f64).sqrt()), true);
        let regress = init.conv("head.regress", f, 4, 3, 1, Some(0.01), true);
        let quality = init.conv("head.quality", f, 1, 3, 1, Some(0.01), true);
        let background = params.push("head.background", Tensor::new(vec![1, config.embed_dim], background.to_vec()));
        let tau_c = params.push("head.tau_c", Tensor::scalar(TAU_C_INIT));
        Ok(Detector {
            layout: Layout {
                stages,
                lateral,
                output,
                extra,
                cls_tower,
                reg_tower,
                embed,
                regress,
                quality,
                background,
                tau_c,
            },
            config,
            params,
        })
    }

    /// Rebuilds a detector around previously saved parameters.
    pub fn with_params(config: DetectorConfig, params: ParamStore) -> Result<Self> {
        let zero = vec![0.0; config.embed_dim];
        let mut det = Detector::new(config, &zero, 0)?;
        if det.params.names() != params.names() {
            return Err(Error::Checkpoint("parameter names do not match the detector layout".into()));
        }
        for (i, v) in params.values().iter().enumerate() {
            if v.shape() != det.params.value(i).shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    params.name(i),
                    v.shape(),
                    det.params.value(i).shape()
                )));
            }
        }
        det.params = params;
        Ok(det)
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn background_index(&self) -> usize {
        self.layout.background
    }

    pub fn tau_c_index(&self) -> usize {
        self.layout.tau_c
    }

    pub fn background(&self) -> &[f64] {
        self.params.value(self.layout.background).data()
    }

    /// The background row as the classifier sees it.
    pub fn classifier_background(&self) -> Vec<f64> {
        let bg = self.background().to_vec();
        if self.config.unit_background {
            crate::teacher::normalized(bg)
        } else {
            bg
        }
    }

    pub fn tau_c(&self) -> f64 {
        self.params.value(self.layout.tau_c).item()
    }

    fn conv(&self, tape: &mut Tape, vars: &[Var], c: &Conv, x: Var) -> Var {
        tape.conv2d(x, vars[c.w], c.b.map(|b| vars[b]), c.stride, c.pad)
    }

    fn block(&self, tape: &mut Tape, vars: &[Var], b: &Block, x: Var) -> Var {
        let y = self.conv(tape, vars, &b.conv, x);
        let y = tape.group_norm(y, vars[b.gamma], vars[b.beta], self.config.gn_groups);
        tape.relu(y)
    }

    /// Records the network on `tape`; `vars` come from binding
    /// [`Detector::params`].
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], image: &Image) -> Result<HeadOutput> {
        let (h, w) = (image.height(), image.width());
        if h == 0 || w == 0 {
            return Err(Error::InvalidArgument("empty image".into()));
        }
        let pixels: Vec<f64> = image.to_chw().into_iter().map(|v| (v - 0.5) / 0.25).collect();
        let mut x = tape.constant(Tensor::new(vec![3, h, w], pixels));
        let mut stage_out = Vec::with_capacity(4);
        for [down, refine] in &self.layout.stages {
            x = self.block(tape, vars, down, x);
            x = self.block(tape, vars, refine, x);
            stage_out.push(x);
        }
        let l = &self.layout;
        let lat1 = self.conv(tape, vars, &l.lateral[1], stage_out[3]);
        let lat0 = self.conv(tape, vars, &l.lateral[0], stage_out[2]);
        let s0 = tape.value(lat0).shape().to_vec();
        let up = tape.upsample_nearest(lat1, s0[1], s0[2]);
        let merged = tape.add(lat0, up);
        let mut pyramid = vec![
            self.conv(tape, vars, &l.output[0], merged),
            self.conv(tape, vars, &l.output[1], lat1),
        ];
        for (i, c) in l.extra.iter().enumerate() {
            let prev = *pyramid.last().expect("pyramid has two levels");
            let input = if i == 0 { prev } else { tape.relu(prev) };
            pyramid.push(self.conv(tape, vars, c, input));
        }
        pyramid.truncate(self.config.levels);

        let anchors = AnchorSet::new(&self.config, h, w);
        let mut level_features = Vec::new();
        let mut deltas = Vec::new();
        let mut quality = Vec::new();
        for (level, &p) in pyramid.iter().enumerate() {
            let shape = tape.value(p).shape();
            debug_assert_eq!((shape[1], shape[2]), anchors.level_shape(level));
            let mut c = p;
            for b in &l.cls_tower {
                c = self.block(tape, vars, b, c);
            }
            let e = self.conv(tape, vars, &l.embed, c);
            let rows = tape.to_rows(e);
            level_features.push(tape.row_normalize(rows));
            let mut r = p;
            for b in &l.reg_tower {
                r = self.block(tape, vars, b, r);
            }
            let d = self.conv(tape, vars, &l.regress, r);
            deltas.push(tape.to_rows(d));
            let q = self.conv(tape, vars, &l.quality, r);
            quality.push(tape.to_rows(q));
        }
        let features = tape.concat_rows(&level_features);
        let deltas = tape.concat_rows(&deltas);
        let iou_logits = tape.concat_rows(&quality);
        for (name, v) in [("features", features), ("box regression", deltas), ("IoU logits", iou_logits)] {
            if !tape.value(v).all_finite() {
                return Err(Error::NonFinite(format!("detector {name}")));
            }
        }
        Ok(HeadOutput {
            anchors,
            features,
            level_features,
            deltas,
            iou_logits,
        })
    }

    /// `tau_c · [table; background] · fᵀ` as an `[A, K + 1]` node.
    pub fn class_logits(&self, tape: &mut Tape, vars: &[Var], features: Var, table: &EmbeddingTable) -> Var {
        let t = tape.constant(table.to_tensor());
        let mut bg = vars[self.layout.background];
        if self.config.unit_background {
            bg = tape.row_normalize(bg);
        }
        let all = tape.concat_rows(&[t, bg]);
        let logits = tape.matmul_nt(features, all);
        tape.scale_by(logits, vars[self.layout.tau_c])
    }

    /// Forward pass without gradient bookkeeping.
    pub fn predict(&self, image: &Image) -> Result<DenseOutput> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let out = self.forward(&mut tape, &vars, image)?;
        let raw = tape.value(out.deltas);
        let boxes = (0..out.anchors.len()).map(|i| out.anchors.decode(i, raw.row(i))).collect();
        let quality = if self.config.use_iou_branch {
            tape.value(out.iou_logits).data().iter().map(|&z| sigmoid(z)).collect()
        } else {
            vec![1.0; out.anchors.len()]
        };
        let feature_maps = FeatureMaps {
            shapes: out.anchors.level_shapes().to_vec(),
            levels: out.level_features.iter().map(|&v| tape.value(v).clone()).collect(),
        };
        Ok(DenseOutput {
            features: tape.value(out.features).clone(),
            anchors: out.anchors,
            feature_maps,
            boxes,
            quality,
            background: self.classifier_background(),
            tau_c: self.tau_c(),
        })
    }
}
