//! Objective assembly, optimizer state and the training loop.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Tensor, Var};
use crate::config::{invalid, join, parse, parse_list, unknown, Section};
use crate::data::ImageSample;
use crate::detector::loss::{focal_loss_op, giou_loss_op, iou_bce_op};
use crate::detector::{assign_samples, sample_negatives, AnchorSet, Detector, DetectorConfig, ParamStore, SampleAssignment};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::gkd::{gkd_loss_op, GkdConfig};
use crate::ikd::{ikd_loss_op, select_distill_points, CropSource, IkdConfig, RegionCache};
use crate::teacher::{encode_caption, EmbeddingTable, Teacher};

/// Lower bound applied to both temperatures after every update.
pub const TEMPERATURE_FLOOR: f64 = 1e-2;
pub const TAU_M_INIT: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub epochs: u64,
    /// Stop after this many steps when nonzero.
    pub max_steps: u64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs at whose start the rate is multiplied by `lr_decay`.
    pub lr_decay_epochs: Vec<u64>,
    pub lr_decay: f64,
    /// Linear warm-up from `warmup_ratio · lr` over this many steps.
    pub warmup_steps: u64,
    pub warmup_ratio: f64,
    pub grad_clip: f64,
    pub cls_weight: f64,
    pub loc_weight: f64,
    pub iou_weight: f64,
    pub tau_m_init: f64,
    /// Write a checkpoint every this many epochs when nonzero; the final
    /// checkpoint is always written.
    pub checkpoint_every: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 8,
            epochs: 12,
            max_steps: 0,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay_epochs: vec![8, 11],
            lr_decay: 0.1,
            warmup_steps: 0,
            warmup_ratio: 0.001,
            grad_clip: 10.0,
            cls_weight: 1.0,
            loc_weight: 2.0,
            iou_weight: 0.5,
            tau_m_init: TAU_M_INIT,
            checkpoint_every: 0,
        }
    }
}

impl TrainingConfig {
    /// Learning rate in effect at `step` (0-based) during `epoch`.
    pub fn learning_rate(&self, step: u64, epoch: u64) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| epoch >= e).count();
        let mut lr = self.lr * self.lr_decay.powi(decays as i32);
        if step < self.warmup_steps {
            let t = step as f64 / self.warmup_steps as f64;
            lr *= self.warmup_ratio + (1.0 - self.warmup_ratio) * t;
        }
        lr
    }
}

impl Section for TrainingConfig {
    const NAME: &'static str = "training";

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("lr_decay_epochs", join(&self.lr_decay_epochs)),
            ("lr_decay", self.lr_decay.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("warmup_ratio", self.warmup_ratio.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("cls_weight", self.cls_weight.to_string()),
            ("loc_weight", self.loc_weight.to_string()),
            ("iou_weight", self.iou_weight.to_string()),
            ("tau_m_init", self.tau_m_init.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let s = Self::NAME;
        match key {
            "batch_size" => self.batch_size = parse(s, key, value)?,
            "epochs" => self.epochs = parse(s, key, value)?,
            "max_steps" => self.max_steps = parse(s, key, value)?,
            "lr" => self.lr = parse(s, key, value)?,
            "momentum" => self.momentum = parse(s, key, value)?,
            "weight_decay" => self.weight_decay = parse(s, key, value)?,
            "lr_decay_epochs" => self.lr_decay_epochs = parse_list(s, key, value)?,
            "lr_decay" => self.lr_decay = parse(s, key, value)?,
            "warmup_steps" => self.warmup_steps = parse(s, key, value)?,
            "warmup_ratio" => self.warmup_ratio = parse(s, key, value)?,
            "grad_clip" => self.grad_clip = parse(s, key, value)?,
            "cls_weight" => self.cls_weight = parse(s, key, value)?,
            "loc_weight" => self.loc_weight = parse(s, key, value)?,
            "iou_weight" => self.iou_weight = parse(s, key, value)?,
            "tau_m_init" => self.tau_m_init = parse(s, key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(s, key, value)?,
            _ => return Err(unknown(s, key)),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let s = Self::NAME;
        if self.batch_size == 0 {
            return Err(invalid(s, "batch_size", "must be positive"));
        }
        if self.epochs == 0 && self.max_steps == 0 {
            return Err(invalid(s, "epochs", "must be positive"));
        }
        for (k, v) in [("lr", self.lr), ("grad_clip", self.grad_clip), ("lr_decay", self.lr_decay)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(s, k, "must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid(s, "momentum", "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(invalid(s, "warmup_ratio", "must lie in [0, 1]"));
        }
        for (k, v) in [
            ("weight_decay", self.weight_decay),
            ("cls_weight", self.cls_weight),
            ("loc_weight", self.loc_weight),
            ("iou_weight", self.iou_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(s, k, "must be non-negative"));
            }
        }
        if self.tau_m_init < TEMPERATURE_FLOOR {
            return Err(invalid(s, "tau_m_init", format!("must be at least {TEMPERATURE_FLOOR}")));
        }
        Ok(())
    }
}

/// Unweighted loss terms. `iou` already carries the IoU-branch weight.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub cls: f64,
    pub loc: f64,
    pub iou: f64,
    pub ins: f64,
    pub glo_i: f64,
    pub glo_c: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub loc: f64,
    pub ins: f64,
    pub glo: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub components: LossComponents,
    pub weights: LossWeights,
    pub total: f64,
}

pub fn total_loss(c: LossComponents, w: LossWeights) -> Result<LossBundle> {
    for (name, v) in [
        ("cls", c.cls),
        ("loc", c.loc),
        ("iou", c.iou),
        ("ins", c.ins),
        ("glo_i", c.glo_i),
        ("glo_c", c.glo_c),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss component {name} is {v}")));
        }
    }
    let total = w.cls * c.cls + w.loc * c.loc + c.iou + w.ins * c.ins + w.glo * (c.glo_i + c.glo_c);
    Ok(LossBundle {
        components: c,
        weights: w,
        total,
    })
}

/// Everything that changes during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub detector: Detector,
    pub tau_m: f64,
    /// One momentum buffer per detector parameter.
    pub velocity: Vec<Tensor>,
    pub tau_m_velocity: f64,
    pub step: u64,
    pub seed: u64,
}

impl TrainState {
    pub fn new(detector: Detector, tau_m: f64, seed: u64) -> Self {
        let velocity = detector
            .params()
            .values()
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect();
        TrainState {
            detector,
            tau_m,
            velocity,
            tau_m_velocity: 0.0,
            step: 0,
            seed,
        }
    }
}

/// Per-step record written to the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: LossBundle,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub tau_c: f64,
    pub tau_m: f64,
    pub num_pos: usize,
    pub num_distill: usize,
    pub num_captions: usize,
}

impl StepRecord {
    pub fn to_log_line(&self) -> String {
        let c = &self.loss.components;
        let w = &self.loss.weights;
        format!(
            "step={} epoch={} lr={} cls={} loc={} iou={} ins={} glo_i={} glo_c={} w_cls={} w_loc={} w_ins={} w_glo={} total={} grad_norm={} tau_c={} tau_m={} num_pos={} num_distill={} num_captions={}",
            self.step,
            self.epoch,
            self.lr,
            c.cls,
            c.loc,
            c.iou,
            c.ins,
            c.glo_i,
            c.glo_c,
            w.cls,
            w.loc,
            w.ins,
            w.glo,
            self.loss.total,
            self.grad_norm,
            self.tau_c,
            self.tau_m,
            self.num_pos,
            self.num_distill,
            self.num_captions
        )
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(a << 6).wrapping_add(a >> 2);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct Prepared {
    anchors: AnchorSet,
    gt_boxes: Vec<BBox>,
    assignment: SampleAssignment,
    mask: Vec<bool>,
}

/// Runs training steps against a frozen teacher and a fixed training
/// vocabulary.
pub struct Trainer<'a> {
    teacher: &'a dyn Teacher,
    vocabulary: EmbeddingTable,
    training: TrainingConfig,
    ikd: IkdConfig,
    gkd: GkdConfig,
    gt_regions: RegionCache<'a>,
    captions: HashMap<String, Vec<f64>>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        teacher: &'a dyn Teacher,
        vocabulary: EmbeddingTable,
        training: TrainingConfig,
        ikd: IkdConfig,
        gkd: GkdConfig,
    ) -> Self {
        let expansion = ikd.expansion;
        Trainer {
            teacher,
            vocabulary,
            training,
            ikd,
            gkd,
            gt_regions: RegionCache::new(teacher, expansion),
            captions: HashMap::new(),
        }
    }

    pub fn training(&self) -> &TrainingConfig {
        &self.training
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            cls: self.training.cls_weight,
            loc: self.training.loc_weight,
            ins: if self.ikd.enabled { self.ikd.weight } else { 0.0 },
            glo: if self.gkd.enabled { self.gkd.weight } else { 0.0 },
        }
    }

    fn prepare(&self, config: &DetectorConfig, sample: &ImageSample, seed: u64) -> Result<Prepared> {
        let anchors = AnchorSet::new(config, sample.image.height(), sample.image.width());
        let mut gt_boxes = Vec::with_capacity(sample.annotations.len());
        let mut labels = Vec::with_capacity(sample.annotations.len());
        for a in &sample.annotations {
            let k = self
                .vocabulary
                .position(&a.category)
                .ok_or_else(|| Error::UnknownCategory(a.category.clone()))?;
            gt_boxes.push(a.bbox);
            labels.push(k);
        }
        let assignment = assign_samples(&anchors, &gt_boxes, &labels, config.atss_topk);
        let mask = sample_negatives(&assignment, config.negative_sampling, seed);
        Ok(Prepared {
            anchors,
            gt_boxes,
            assignment,
            mask,
        })
    }

    fn caption_embedding(&mut self, caption: &str) -> Result<Vec<f64>> {
        if let Some(v) = self.captions.get(caption) {
            return Ok(v.clone());
        }
        let v = encode_caption(caption, self.teacher)?;
        self.captions.insert(caption.to_string(), v.clone());
        Ok(v)
    }

    /// One optimisation step on `batch`, given as `(dataset index, sample)`
    /// pairs.
    pub fn step(&mut self, state: &mut TrainState, batch: &[(usize, &ImageSample)], epoch: u64) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let det_cfg = state.detector.config().clone();
        let step_seed = mix(state.seed, state.step);
        let prepared: Vec<Prepared> = batch
            .iter()
            .map(|&(key, s)| self.prepare(&det_cfg, s, mix(step_seed, key as u64)))
            .collect::<Result<_>>()?;
        let num_pos: usize = prepared.iter().map(|p| p.assignment.num_pos).sum();
        let normalizer = num_pos.max(1) as f64;
        let background = self.vocabulary.len();

        let mut tape = Tape::new();
        let vars = state.detector.params().bind(&mut tape, true);
        let tau_m = tape.param(Tensor::scalar(state.tau_m));
        let use_gt_crops = self.ikd.crop_source == CropSource::GroundTruth || state.step < self.ikd.warmup_steps;
        let mut step_regions = RegionCache::new(self.teacher, self.ikd.expansion);

        let mut cls_terms = Vec::new();
        let mut loc_terms = Vec::new();
        let mut iou_terms = Vec::new();
        let mut distill = Vec::new();
        let mut global_images = Vec::new();
        let mut global_captions = Vec::new();
        for (&(key, sample), prep) in batch.iter().zip(&prepared) {
            let out = state.detector.forward(&mut tape, &vars, &sample.image)?;
            let logits = state.detector.class_logits(&mut tape, &vars, out.features, &self.vocabulary);
            let labels: Vec<usize> = prep.assignment.labels.iter().map(|l| l.unwrap_or(background)).collect();
            cls_terms.push((
                focal_loss_op(&mut tape, logits, &labels, &prep.mask, det_cfg.focal_gamma, normalizer),
                1.0,
            ));

            let positives = prep.assignment.positives();
            let raw = tape.value(out.deltas).clone();
            let decoded: Vec<BBox> = (0..prep.anchors.len()).map(|i| prep.anchors.decode(i, raw.row(i))).collect();
            if !positives.is_empty() {
                let share = positives.len() as f64 / normalizer;
                let targets: Vec<(usize, BBox)> = positives
                    .iter()
                    .map(|&i| (i, prep.gt_boxes[prep.assignment.matched[i].expect("positive has a match")]))
                    .collect();
                loc_terms.push((giou_loss_op(&mut tape, out.deltas, &prep.anchors, &targets), share));
                if det_cfg.use_iou_branch {
                    let iou_targets: Vec<(usize, f64)> =
                        targets.iter().map(|&(i, g)| (i, iou(&decoded[i], &g))).collect();
                    iou_terms.push((iou_bce_op(&mut tape, out.iou_logits, &iou_targets), share));
                }
            }

            if self.ikd.enabled {
                let points = select_distill_points(&prep.assignment, &decoded, &prep.gt_boxes, self.ikd.iou_threshold);
                let (w, h) = (sample.image.width() as f64, sample.image.height() as f64);
                let mut kept = Vec::new();
                let mut vectors = Vec::new();
                for i in points {
                    let v = if use_gt_crops {
                        let g = prep.gt_boxes[prep.assignment.matched[i].expect("distilled point is positive")];
                        self.gt_regions.get(key, &sample.image, &g)?
                    } else {
                        step_regions.get(key, &sample.image, &decoded[i].clip(w, h))?
                    };
                    if let Some(v) = v {
                        kept.push(i);
                        vectors.push(v);
                    }
                }
                if !kept.is_empty() {
                    distill.push((out.features, kept, vectors));
                }
            }

            if self.gkd.enabled {
                if let Some(caption) = sample.caption(epoch, state.seed) {
                    let caption = caption.to_string();
                    global_captions.push(self.caption_embedding(&caption)?);
                    global_images.push((out.level_features.clone(), out.anchors.level_shapes().to_vec()));
                }
            }
        }

        let num_distill: usize = distill.iter().map(|d| d.1.len()).sum();
        let mut ins_terms = Vec::new();
        for (features, points, vectors) in &distill {
            let op = ikd_loss_op(&mut tape, *features, points, vectors, self.ikd.norm)?;
            ins_terms.push((op, points.len() as f64 / num_distill as f64));
        }
        let (glo_i, glo_c) = if global_images.is_empty() {
            (None, None)
        } else {
            let d = global_captions[0].len();
            let flat: Vec<f64> = global_captions.concat();
            let table = Tensor::new(vec![global_captions.len(), d], flat);
            let (a, b) = gkd_loss_op(&mut tape, &global_images, &table, tau_m, &self.gkd)?;
            (Some(a), Some(b))
        };

        let sum = |tape: &mut Tape, terms: &[(Var, f64)]| -> Option<Var> {
            (!terms.is_empty()).then(|| tape.weighted_sum(terms))
        };
        let cls = sum(&mut tape, &cls_terms);
        let loc = sum(&mut tape, &loc_terms);
        let iou_raw = sum(&mut tape, &iou_terms);
        let ins = sum(&mut tape, &ins_terms);
        let value = |tape: &Tape, v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
        let weights = self.weights();
        let components = LossComponents {
            cls: value(&tape, cls),
            loc: value(&tape, loc),
            iou: self.training.iou_weight * value(&tape, iou_raw),
            ins: value(&tape, ins),
            glo_i: value(&tape, glo_i),
            glo_c: value(&tape, glo_c),
        };
        let bundle = total_loss(components, weights)?;
        let terms: Vec<(Var, f64)> = [
            (cls, weights.cls),
            (loc, weights.loc),
            (iou_raw, self.training.iou_weight),
            (ins, weights.ins),
            (glo_i, weights.glo),
            (glo_c, weights.glo),
        ]
        .into_iter()
        .filter_map(|(v, w)| v.map(|v| (v, w)))
        .collect();
        let total = tape.weighted_sum(&terms);

        let mut grads = tape.backward(total);
        let mut param_grads: Vec<Tensor> = vars
            .iter()
            .zip(state.detector.params().values())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
            .collect();
        let mut tau_m_grad = grads.take(tau_m).map_or(0.0, |g| g.item());
        let sq: f64 = param_grads.iter().flat_map(|g| g.data()).map(|g| g * g).sum::<f64>() + tau_m_grad * tau_m_grad;
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm at step {}", state.step)));
        }
        let max_norm = self.training.grad_clip;
        if grad_norm > max_norm {
            let scale = max_norm / (grad_norm + 1e-6);
            for g in &mut param_grads {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            tau_m_grad *= scale;
        }

        let lr = self.training.learning_rate(state.step, epoch);
        let mu = self.training.momentum;
        let wd = self.training.weight_decay;
        let params = state.detector.params_mut();
        for (i, g) in param_grads.iter().enumerate() {
            let decay = if params.name(i).ends_with(".weight") { wd } else { 0.0 };
            let velocity = state.velocity[i].data_mut();
            let p = params.value_mut(i).data_mut();
            for ((pv, vv), gv) in p.iter_mut().zip(velocity.iter_mut()).zip(g.data()) {
                *vv = mu * *vv + gv + decay * *pv;
                *pv -= lr * *vv;
            }
        }
        let tau_c = state.detector.tau_c_index();
        let tc = &mut state.detector.params_mut().value_mut(tau_c).data_mut()[0];
        *tc = tc.max(TEMPERATURE_FLOOR);
        state.tau_m_velocity = mu * state.tau_m_velocity + tau_m_grad;
        state.tau_m = (state.tau_m - lr * state.tau_m_velocity).max(TEMPERATURE_FLOOR);

        let record = StepRecord {
            step: state.step + 1,
            epoch,
            lr,
            loss: bundle,
            grad_norm,
            tau_c: state.detector.tau_c(),
            tau_m: state.tau_m,
            num_pos,
            num_distill,
            num_captions: global_captions.len(),
        };
        state.step += 1;
        Ok(record)
    }
}

/// Visiting order of the dataset in `epoch`.
pub fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, epoch.wrapping_add(0x5eed)));
    order.shuffle(&mut rng);
    order
}

/// Runs the configured schedule. `on_step` sees every record and
/// `on_epoch` the state after each finished epoch (1-based count).
pub fn train(
    trainer: &mut Trainer<'_>,
    state: &mut TrainState,
    samples: &[ImageSample],
    mut on_step: impl FnMut(&StepRecord) -> Result<()>,
    mut on_epoch: impl FnMut(u64, &TrainState) -> Result<()>,
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    let cfg = trainer.training().clone();
    let epochs = if cfg.epochs == 0 { u64::MAX } else { cfg.epochs };
    for epoch in 0..epochs {
        let order = epoch_order(samples.len(), state.seed, epoch);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps > 0 && state.step >= cfg.max_steps {
                return Ok(());
            }
            let batch: Vec<(usize, &ImageSample)> = chunk.iter().map(|&i| (i, &samples[i])).collect();
            let record = trainer.step(state, &batch, epoch)?;
            log::debug!("{}", record.to_log_line());
            on_step(&record)?;
        }
        on_epoch(epoch + 1, state)?;
    }
    Ok(())
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"HIERKDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    step: u64,
    seed: u64,
    config_hash: String,
    tau_m: f64,
    tau_m_velocity: f64,
    detector: String,
    tensors: Vec<(String, Vec<usize>)>,
    payload_sha256: String,
}

/// Saved training state plus the hash of the configuration that produced it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub state: TrainState,
    pub config_hash: String,
}

impl Checkpoint {
    /// Layout: magic, version (u32 LE), header length (u64 LE), JSON
    /// header, then every parameter followed by every momentum buffer as
    /// f64 LE.
    pub fn save(path: &Path, state: &TrainState, config_hash: &str) -> Result<()> {
        let params = state.detector.params();
        let mut payload = Vec::with_capacity(16 * params.num_scalars());
        for t in params.values().iter().chain(&state.velocity) {
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            step: state.step,
            seed: state.seed,
            config_hash: config_hash.to_string(),
            tau_m: state.tau_m,
            tau_m_velocity: state.tau_m_velocity,
            detector: state.detector.config().to_kv_string(),
            tensors: params
                .names()
                .iter()
                .zip(params.values())
                .map(|(n, t)| (n.clone(), t.shape().to_vec()))
                .collect(),
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let mut out = Vec::with_capacity(payload.len() + json.len() + 20);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(20..20 + len).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| bad(&e.to_string()))?;
        let payload = &bytes[20 + len..];
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return Err(bad("payload digest mismatch"));
        }
        let config = DetectorConfig::from_kv_str(&header.detector)?;
        let total: usize = header.tensors.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if payload.len() != 16 * total {
            return Err(bad("payload size does not match the tensor list"));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut read = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            Tensor::new(shape.to_vec(), values.by_ref().take(n).collect())
        };
        let mut params = ParamStore::new();
        for (name, shape) in &header.tensors {
            params.push(name.clone(), read(shape));
        }
        let velocity = header.tensors.iter().map(|(_, shape)| read(shape)).collect();
        let detector = Detector::with_params(config, params)?;
        Ok(Checkpoint {
            state: TrainState {
                detector,
                tau_m: header.tau_m,
                velocity,
                tau_m_velocity: header.tau_m_velocity,
                step: header.step,
                seed: header.seed,
            },
            config_hash: header.config_hash,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Annotation;
    use crate::geometry::Image;
    use crate::teacher::{background_embedding, encode_categories, StubCategory, StubTeacher, StubTeacherConfig};

    fn teacher() -> StubTeacher {
        let cats = vec![
            StubCategory { name: "red square".into(), color: [220, 40, 40] },
            StubCategory { name: "green square".into(), color: [40, 200, 60] },
            StubCategory { name: "blue square".into(), color: [50, 70, 220] },
        ];
        StubTeacher::new(cats, StubTeacherConfig { dim: 16, ..Default::default() }).unwrap()
    }

    fn sample(id: u64, color: [f32; 3], name: &str, at: usize) -> ImageSample {
        let mut image = Image::zeros(32, 32);
        for y in 0..32 {
            for x in 0..32 {
                image.set_pixel(x, y, [0.5, 0.5, 0.5]);
            }
        }
        for y in at..at + 12 {
            for x in at..at + 12 {
                image.set_pixel(x, y, color);
            }
        }
        let b = at as f64;
        ImageSample {
            id,
            image,
            annotations: vec![Annotation {
                bbox: BBox::new(b, b, b + 12.0, b + 12.0),
                category: name.into(),
            }],
            captions: vec![format!("a photo with a {name} and a blue square")],
        }
    }

    fn samples() -> Vec<ImageSample> {
        vec![
            sample(1, [220.0 / 255.0, 40.0 / 255.0, 40.0 / 255.0], "red square", 4),
            sample(2, [40.0 / 255.0, 200.0 / 255.0, 60.0 / 255.0], "green square", 14),
            sample(3, [220.0 / 255.0, 40.0 / 255.0, 40.0 / 255.0], "red square", 10),
        ]
    }

    fn setup(t: &StubTeacher, ikd: bool, gkd: bool) -> (Trainer<'_>, TrainState) {
        let det_cfg = DetectorConfig {
            backbone_widths: vec![8, 8, 8, 8],
            fpn_channels: 8,
            head_convs: 1,
            gn_groups: 4,
            embed_dim: 16,
            ..DetectorConfig::default()
        };
        let det = Detector::new(det_cfg, &background_embedding(t), 1).unwrap();
        let vocab = encode_categories(&["red square".into(), "green square".into()], t).unwrap();
        let trainer = Trainer::new(
            t,
            vocab,
            TrainingConfig::default(),
            IkdConfig {
                enabled: ikd,
                crop_source: CropSource::GroundTruth,
                iou_threshold: 0.0,
                ..IkdConfig::default()
            },
            GkdConfig {
                enabled: gkd,
                ..GkdConfig::default()
            },
        );
        (trainer, TrainState::new(det, TAU_M_INIT, 5))
    }

    #[test]
    fn total_loss_sums_and_names_nan() {
        let w = LossWeights { cls: 1.0, loc: 2.0, ins: 1.0, glo: 0.1 };
        assert_eq!(total_loss(LossComponents::default(), w).unwrap().total, 0.0);
        let c = LossComponents { cls: 1.0, loc: 0.5, iou: 0.25, ins: 0.3, glo_i: 2.0, glo_c: 4.0 };
        assert!((total_loss(c, w).unwrap().total - (1.0 + 1.0 + 0.25 + 0.3 + 0.6)).abs() < 1e-12);
        let err = total_loss(LossComponents { ins: f64::NAN, ..c }, w).unwrap_err();
        assert!(err.to_string().contains("ins"));
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainingConfig {
            warmup_steps: 10,
            warmup_ratio: 0.1,
            ..TrainingConfig::default()
        };
        assert!((cfg.learning_rate(0, 0) - 0.001).abs() < 1e-15);
        assert_eq!(cfg.learning_rate(10, 0), 0.01);
        assert!((cfg.learning_rate(100, 8) - 0.001).abs() < 1e-15);
        assert!((cfg.learning_rate(100, 11) - 0.0001).abs() < 1e-15);
    }

    #[test]
    fn disabled_modules_report_zero() {
        let t = teacher();
        let data = samples();
        let (mut trainer, mut state) = setup(&t, false, false);
        let batch: Vec<(usize, &ImageSample)> = data.iter().enumerate().collect();
        let r = trainer.step(&mut state, &batch, 0).unwrap();
        let c = r.loss.components;
        assert_eq!((c.ins, c.glo_i, c.glo_c), (0.0, 0.0, 0.0));
        assert!(c.cls > 0.0 && c.loc > 0.0 && c.iou > 0.0);
        assert_eq!(state.tau_m, TAU_M_INIT);
        assert!(trainer.step(&mut state, &[], 0).is_err());
    }

    #[test]
    fn hierarchical_step_is_deterministic() {
        let t = teacher();
        let data = samples();
        let run = || {
            let (mut trainer, mut state) = setup(&t, true, true);
            let batch: Vec<(usize, &ImageSample)> = data.iter().enumerate().collect();
            let a = trainer.step(&mut state, &batch, 0).unwrap();
            let b = trainer.step(&mut state, &batch, 0).unwrap();
            (a.to_log_line(), b.to_log_line(), state.detector.params().checksum())
        };
        let first = run();
        assert_eq!(first, run());
        let (_, mut state) = setup(&t, true, true);
        let (mut trainer, _) = setup(&t, true, true);
        let batch: Vec<(usize, &ImageSample)> = data.iter().enumerate().collect();
        let r = trainer.step(&mut state, &batch, 0).unwrap();
        assert!(r.loss.components.ins > 0.0 && r.loss.components.glo_i > 0.0);
        assert!(r.num_distill > 0 && r.num_captions == 3);
        assert_ne!(state.tau_m, TAU_M_INIT);
    }

    #[test]
    fn clipping_bounds_the_update() {
        let t = teacher();
        let data = samples();
        let (mut trainer, mut state) = setup(&t, true, true);
        trainer.training.grad_clip = 1e-3;
        trainer.training.momentum = 0.0;
        trainer.training.weight_decay = 0.0;
        let before: Vec<f64> = state.detector.params().values().iter().flat_map(|t| t.data().to_vec()).collect();
        let tau_before = state.tau_m;
        let batch: Vec<(usize, &ImageSample)> = data.iter().enumerate().collect();
        let r = trainer.step(&mut state, &batch, 0).unwrap();
        let after: Vec<f64> = state.detector.params().values().iter().flat_map(|t| t.data().to_vec()).collect();
        let moved: f64 = before.iter().zip(&after).map(|(a, b)| (a - b).powi(2)).sum::<f64>() + (tau_before - state.tau_m).powi(2);
        assert!(r.grad_norm > 1e-3);
        assert!(moved.sqrt() <= r.lr * (1e-3 + 1e-6));
    }

    #[test]
    fn loss_descends_on_a_tiny_set() {
        let t = teacher();
        let data = samples();
        let (mut trainer, mut state) = setup(&t, false, false);
        let batch: Vec<(usize, &ImageSample)> = data.iter().enumerate().collect();
        let first = trainer.step(&mut state, &batch, 0).unwrap().loss.total;
        let mut last = first;
        for _ in 0..30 {
            last = trainer.step(&mut state, &batch, 0).unwrap().loss.total;
        }
        assert!(last < first, "{last} !< {first}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let t = teacher();
        let data = samples();
        let (mut trainer, mut state) = setup(&t, false, true);
        let batch: Vec<(usize, &ImageSample)> = data.iter().enumerate().collect();
        trainer.step(&mut state, &batch, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        Checkpoint::save(&path, &state, "abc").unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.config_hash, "abc");
        assert_eq!(back.state.step, 1);
        assert_eq!(back.state.tau_m, state.tau_m);
        assert_eq!(back.state.detector.params().checksum(), state.detector.params().checksum());
        assert_eq!(back.state.velocity, state.velocity);
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 1;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn epoch_orders_are_permutations() {
        let a = epoch_order(50, 3, 0);
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(50, 3, 0));
        assert_ne!(a, epoch_order(50, 3, 1));
    }
}
