//! The one-stage student: backbone, feature pyramid, embedding-similarity
//! classification head, box and IoU-quality branches, sample assignment and
//! negative sampling.

mod anchors;
mod assign;
mod config;
pub mod loss;
mod model;

pub use anchors::{level_shapes, Anchor, AnchorSet, MAX_LOG_DISTANCE};
pub use assign::{assign_samples, mean_plus_std, sample_negatives, SampleAssignment};
pub use config::{DetectorConfig, NegativeSampling};
pub use loss::{classify, iou_branch_loss, localization_loss, softmax, softmax_focal_loss};
pub use model::{DenseOutput, Detector, FeatureMaps, HeadOutput, ParamStore, TAU_C_INIT};
