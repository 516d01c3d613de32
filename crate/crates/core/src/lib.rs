//! IDH genotype classification from four-sequence MRI volumes: a
//! hierarchical windowed-attention encoder–decoder with tumor-aware feature
//! encoding (TAFE), a cross-modality T2/FLAIR differential branch (CMD),
//! logit fusion, training and cross-validation harness, occlusion saliency,
//! and a synthetic phantom generator.

pub mod augment;
pub mod backbone;
pub mod checkpoint;
pub mod cmd;
pub mod error;
pub mod gradcheck;
pub mod interpret;
mod layers;
pub mod loss;
pub mod model;
pub mod phantom;
pub mod tafe;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
