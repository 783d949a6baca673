//! Unsupervised disentanglement of appearance and shape for image batches.
//!
//! The library learns, from unlabeled images alone, a set of spatial masks
//! (shape) and per-mask feature vectors (appearance) such that the two can
//! be recombined across images: decoding the shape of one image with the
//! appearance of another transfers pose while preserving color and texture.
//! Training couples a perceptual reconstruction loss, a least-squares
//! adversarial game against a feature classifier, and a color-consistency
//! regularizer over mask-weighted intensity statistics.
//!
//! Modules follow the pipeline: [`config`] and [`types`] define the shared
//! vocabulary, [`autodiff`] provides the tape, [`networks`] the four
//! parametric maps, [`perceptual`] the frozen feature pyramid, [`losses`]
//! the objectives, [`data`] synthetic sprites and folder loading,
//! [`trainer`] the alternating optimization loop with checkpointing, and
//! [`metrics`] the evaluation suite.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod opt;
pub mod perceptual;
pub mod trainer;
pub mod types;

pub use config::{load_config, ModelConfig, TrainConfig};
pub use error::{Error, Result};
pub use types::{AppearanceFeatureSet, ClassifierScore, FilteredImageSet, ImageBatch, MaskSet};
