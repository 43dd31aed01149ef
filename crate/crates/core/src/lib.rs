//! Continual panoptic perception laboratory.
//!
//! A desk-scale testbed for class-incremental multi-task learning: one shared
//! image encoder drives a mask-transformer segmentation branch and an
//! autoregressive captioning branch. Incremental steps are trained without old
//! data, using task-interactive knowledge distillation against a frozen
//! snapshot and task-asymmetric pseudo-labeling, and evaluated with the
//! panoptic quality family plus BLEU.

pub mod autodiff;
pub mod distill;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod pseudo_label;
pub mod rng;
pub mod synth_data;

pub use error::CoreError;
pub use synth_data::{ClassId, ClassSchedule, DatasetSpec, PanopticSample};
