//! End-to-end steps shared by the command-line tool and the test suites:
//! loading a configured dataset, training, and producing evaluation reports.

use crate::data::{load_dataset, CocoFile, Dataset, ImageSample, Phase, SplitSpec};
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport, GroundTruth};
use crate::geometry::{BBox, Detection};
use crate::inference::{decode_detections, direct_inference_dense, upper_bound_inference, Vocabulary, VocabularyMode};
use crate::run_config::RunConfig;
use crate::teacher::{background_embedding, encode_categories, StubTeacher, Teacher};
use crate::training::{train, StepRecord, TrainState, Trainer};

/// Split and teacher of a configured run. The stub teacher's palette is the
/// category list of the test annotation file.
pub fn load_split_and_teacher(cfg: &RunConfig) -> Result<(SplitSpec, StubTeacher)> {
    let split = cfg.data.load_split()?;
    let file = CocoFile::read(&cfg.data.resolve(&cfg.data.test_annotations))?;
    let teacher = cfg.teacher.build(cfg.detector.embed_dim, &file.categories)?;
    Ok((split, teacher))
}

pub fn load_train(cfg: &RunConfig, split: &SplitSpec) -> Result<Dataset> {
    let mut data = load_dataset(
        &cfg.data.resolve(&cfg.data.train_annotations),
        &cfg.data.resolve(&cfg.data.train_images),
        split,
        Phase::Train,
    )?;
    if cfg.data.max_train_images > 0 {
        data.samples.truncate(cfg.data.max_train_images);
    }
    Ok(data)
}

pub fn load_test(cfg: &RunConfig, split: &SplitSpec) -> Result<Dataset> {
    load_dataset(
        &cfg.data.resolve(&cfg.data.test_annotations),
        &cfg.data.resolve(&cfg.data.test_images),
        split,
        Phase::Test,
    )
}

/// A fresh training state seeded by `cfg.seed`.
pub fn initial_state(cfg: &RunConfig, teacher: &dyn Teacher) -> Result<TrainState> {
    let detector = Detector::new(cfg.detector.clone(), &background_embedding(teacher), cfg.seed)?;
    Ok(TrainState::new(detector, cfg.training.tau_m_init, cfg.seed))
}

/// Trains on the base vocabulary and returns the final state.
pub fn run_training(
    cfg: &RunConfig,
    teacher: &dyn Teacher,
    split: &SplitSpec,
    train_set: &[ImageSample],
    on_step: impl FnMut(&StepRecord) -> Result<()>,
    on_epoch: impl FnMut(u64, &TrainState) -> Result<()>,
) -> Result<TrainState> {
    let vocabulary = encode_categories(&split.base, teacher)?;
    let mut trainer = Trainer::new(
        teacher,
        vocabulary,
        cfg.training.clone(),
        cfg.ikd.clone(),
        cfg.gkd.clone(),
    );
    let mut state = initial_state(cfg, teacher)?;
    train(&mut trainer, &mut state, train_set, on_step, on_epoch)?;
    Ok(state)
}

/// Ground truth of `sample` restricted to the vocabulary.
pub fn ground_truth(sample: &ImageSample, vocab: &Vocabulary) -> Vec<GroundTruth> {
    sample
        .annotations
        .iter()
        .filter_map(|a| {
            vocab.index(&a.category).map(|category| GroundTruth {
                bbox: a.bbox,
                category,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub enum Method<'a> {
    /// The trained detector with the vocabulary's text embeddings.
    Detector(&'a Detector),
    /// Detector foreground boxes re-classified by the teacher.
    Direct(&'a Detector),
    /// Ground-truth boxes classified by the teacher.
    UpperBound,
}

/// Detections of every test image plus the resulting report.
pub fn evaluate_method(
    method: Method<'_>,
    cfg: &RunConfig,
    teacher: &dyn Teacher,
    split: &SplitSpec,
    test_set: &[ImageSample],
    mode: VocabularyMode,
) -> Result<(EvalReport, Vec<(u64, Vec<Detection>)>)> {
    let vocab = Vocabulary::new(mode, split, teacher)?;
    let ec = &cfg.evaluation;
    let mut images = Vec::with_capacity(test_set.len());
    let mut dumps = Vec::with_capacity(test_set.len());
    for sample in test_set {
        let gts = ground_truth(sample, &vocab);
        let (w, h) = (sample.image.width(), sample.image.height());
        let dets = match method {
            Method::Detector(det) => decode_detections(&det.predict(&sample.image)?, &vocab, w, h, ec)?,
            Method::Direct(det) => direct_inference_dense(
                &det.predict(&sample.image)?,
                &sample.image,
                teacher,
                &vocab,
                ec.direct_topk,
                ec.direct_tau,
                ec.direct_expansion,
                ec,
            )?,
            Method::UpperBound => {
                let boxes: Vec<BBox> = gts.iter().map(|g| g.bbox).collect();
                upper_bound_inference(&sample.image, &boxes, teacher, &vocab, ec.direct_tau)?
            }
        };
        dumps.push((sample.id, dets.clone()));
        images.push((dets, gts));
    }
    if images.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let report = evaluate(&images, vocab.names(), &vocab.novel, &mode.to_string(), ec)?;
    Ok((report, dumps))
}
