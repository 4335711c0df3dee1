//! Desk-scale toolkit for converting a pretrained autoregressive Transformer
//! into a hybrid Mamba-Transformer model.
//!
//! The pipeline: train a small Transformer teacher, replace a subset of its
//! attention mixers with selective-SSM (Mamba-style) mixers via closed-form
//! weight transfer, recover quality with multi-level distillation, and
//! quantify the efficiency trade-off with analytic FLOPs/cache models plus
//! synthetic-task error metrics.

pub mod adam;
pub mod attention;
pub mod checkpoint;
pub mod convert;
pub mod distill;
pub mod flops;
pub mod gradcheck;
pub mod importance;
pub mod layout;
pub mod losses;
pub mod mamba;
pub mod matrix;
pub mod model;
pub mod profiler;
pub mod rng;
pub mod runconfig;
pub mod tape;
pub mod tasks;

mod error;

pub use error::{Error, Result};
pub use matrix::{Matrix, SequenceTensor};
