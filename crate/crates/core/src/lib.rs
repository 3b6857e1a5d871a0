//! Open-vocabulary one-stage object detection trained with hierarchical
//! visual-language knowledge distillation from a frozen teacher.
//!
//! The detector classifies anchors by similarity to text embeddings, so the
//! vocabulary can be swapped at inference time. Training combines the usual
//! detection losses with instance-level distillation of teacher region
//! embeddings ([`ikd`]) and a caption-contrastive objective over pooled
//! feature-map patches ([`gkd`]).

pub mod autograd;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod gkd;
pub mod ikd;
pub mod inference;
pub mod pipeline;
pub mod run_config;
pub mod teacher;
pub mod training;

pub use error::{Error, Result};
